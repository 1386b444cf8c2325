"""Optimizer, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import atomic_write
from .config import ModelConfig
from .data import stack
from .errors import CheckpointError, ContractError, NeuroTSEError, ParseError
from .metrics import neg_si_sdr_loss, si_sdr, stoi
from .tensor import backward, no_grad, read_tensor, write_tensor


class TrainingError(NeuroTSEError):
    pass


# -- Adam -------------------------------------------------------------------------

@dataclass
class OptState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> "OptState":
        return cls(beta1, beta2, eps, 0,
                   {k: np.zeros(p.shape) for k, p in params.items()},
                   {k: np.zeros(p.shape) for k, p in params.items()})


def adam_step(params: dict, grads: dict, opt: OptState, lr: float) -> None:
    """Bias-corrected Adam update applied in place to every parameter in ``params``."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or opt.m[name].shape != p.shape:
            raise ContractError(f"{name}: gradient {g.shape} / moment {opt.m[name].shape} "
                                f"do not match parameter {p.shape}")
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        new.flags.writeable = False
        p.data = new


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; return the original norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * s
    return total


# -- schedule ---------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    lr_max: float = 2e-4
    total_steps: int = 1000
    warmup_fraction: float = 0.05

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup to lr_max, then cosine annealing to zero at total_steps."""
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")
    w = sched.warmup_steps
    if step <= w:
        return sched.lr_max * step / w
    progress = (step - w) / max(1, sched.total_steps - w)
    return sched.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- checkpoints ------------------------------------------------------------------

CKPT_MANIFEST = "manifest.json"
CKPT_TENSORS = "tensors.nxt"


def save_checkpoint(path, model, opt: OptState | None = None, meta: dict | None = None) -> Path:
    """Directory with a JSON manifest and one NXT1 stream holding every named tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if opt is not None:
        arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    buf = io.BytesIO()
    for arr in arrays.values():
        write_tensor(buf, arr)
    blob = buf.getvalue()
    manifest = {
        "format": "neurotse-checkpoint-1",
        "config": model.cfg.to_dict(),
        "tensors": list(arrays),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "adam": None if opt is None else {"step": opt.step, "beta1": opt.beta1, "beta2": opt.beta2,
                                          "eps": opt.eps},
        "meta": meta or {},
    }
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / CKPT_TENSORS).write_bytes(blob)
        (tmp / CKPT_MANIFEST).write_text(json.dumps(manifest, indent=1))
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_checkpoint(path) -> tuple:
    """Return (manifest, {name: array}); any inconsistency raises CheckpointError."""
    path = Path(path)
    mpath, tpath = path / CKPT_MANIFEST, path / CKPT_TENSORS
    if not mpath.exists() or not tpath.exists():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (need {CKPT_MANIFEST} and {CKPT_TENSORS})")
    try:
        manifest = json.loads(mpath.read_text())
        blob = tpath.read_bytes()
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{mpath}: unreadable manifest ({exc})") from None
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{tpath}: checksum mismatch, file is corrupted")
    fh = io.BytesIO(blob)
    arrays = {}
    try:
        for name in manifest["tensors"]:
            arrays[name] = read_tensor(fh)
    except (ParseError, KeyError) as exc:
        raise CheckpointError(f"{tpath}: {exc}") from None
    return manifest, arrays


def load_checkpoint(path, model=None):
    """Rebuild (model, OptState | None, meta) from a checkpoint directory."""
    from .model import Extractor

    manifest, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(manifest["config"])
    if model is None:
        model = Extractor(cfg)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not fit the stored config ({exc})") from None
    opt = None
    if manifest.get("adam"):
        a = manifest["adam"]
        opt = OptState(a["beta1"], a["beta2"], a["eps"], a["step"],
                       {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")},
                       {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")})
    return model, opt, manifest.get("meta", {})


# -- evaluation -------------------------------------------------------------------

def predict(model, samples, batch_size: int = 8) -> list:
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            mix, _, _, eeg = stack(samples[i:i + batch_size])
            out.extend(np.asarray(model(mix, eeg).data))
    model.train(was)
    return out


def evaluate(model, samples, batch_size: int = 8, with_stoi: bool = True) -> dict:
    """Per-sample SI-SDR (vs attended and unattended), STOI and the selection rate."""
    est = predict(model, samples, batch_size)
    rows = []
    for s, e in zip(samples, est):
        row = {"index": s.index,
               "sisdr": si_sdr(e, s.attended),
               "sisdr_unattended": si_sdr(e, s.unattended),
               "sisdr_mixture": si_sdr(s.mixture, s.attended)}
        if with_stoi:
            row["stoi"] = stoi(e, s.attended, model.cfg.sample_rate)
        row["selected"] = row["sisdr"] > row["sisdr_unattended"]
        rows.append(row)
    sis = np.array([r["sisdr"] for r in rows])
    summary = {"n": len(rows), "sisdr_mean": float(sis.mean()), "sisdr_std": float(sis.std()),
               "sisdri_mean": float(np.mean([r["sisdr"] - r["sisdr_mixture"] for r in rows])),
               "selection_rate": float(np.mean([r["selected"] for r in rows]))}
    if with_stoi:
        st = np.array([r["stoi"] for r in rows])
        summary.update(stoi_mean=float(st.mean()), stoi_std=float(st.std()))
    return {"summary": summary, "rows": rows}


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    log: list
    best_val: float
    steps: int
    out_dir: Path | None = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_step(model, batch, opt: OptState, lr: float, grad_clip: float, rng) -> tuple:
    """One optimizer update; returns (loss, pre-clip grad norm)."""
    mix, att, _, eeg = stack(batch)
    params = model.named_parameters()
    model.zero_grad()
    loss = neg_si_sdr_loss(model(mix, eeg, rng), att)
    value = float(loss.data)
    if not np.isfinite(value):
        return value, float("nan")
    backward(loss)
    grads = {k: p.grad for k, p in params.items()}
    norm = clip_grad_norm(grads, grad_clip)
    adam_step(params, grads, opt, lr)
    return value, norm


def train_loop(model, train_set, val_set, cfg: ModelConfig | None = None, out_dir=None,
               max_steps: int | None = None, resume: bool = False, eval_every_epoch: int = 1,
               on_epoch=None) -> TrainResult:
    """Shuffled mini-batch Adam training with per-epoch validation.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per step), ``last/``
    and ``best/`` checkpoints, and ``loss_curve.png``.  All randomness derives from
    ``cfg.seed`` and the epoch number, so a run resumed from ``last/`` follows the
    same trajectory as an uninterrupted one.
    """
    cfg = cfg or model.cfg
    n = len(train_set)
    if n == 0:
        raise ContractError("empty training set")
    spe = steps_per_epoch(n, cfg.batch_size)
    total = spe * cfg.epochs if max_steps is None else min(max_steps, spe * cfg.epochs)
    sched = Schedule(cfg.lr_max, total, cfg.warmup_fraction)
    params = model.named_parameters()
    opt = OptState.for_params(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    out = Path(out_dir) if out_dir is not None else None
    log, start_epoch, best = [], 0, -math.inf
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last").exists():
            _, opt, meta = load_checkpoint(out / "last", model)
            start_epoch, best = meta["epoch"] + 1, meta["best_val"]
            log = [r for r in read_log(out / "metrics.jsonl") if r["step"] <= opt.step]
    model.train()
    step = opt.step
    for epoch in range(start_epoch, cfg.epochs):
        if step >= total:
            break
        rng = np.random.default_rng([cfg.seed, epoch])
        for b, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            if step >= total:
                break
            drop_rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            lr = lr_at(step + 1, sched)
            batch = [train_set[i] for i in idx]
            value, norm = train_step(model, batch, opt, lr, cfg.grad_clip, drop_rng)
            if not np.isfinite(value):
                ids = [int(train_set[i].index) for i in idx]
                if out is not None:
                    with atomic_write(out / "nan_batch.json", "w") as fh:
                        json.dump({"epoch": epoch, "batch": b, "sample_indices": ids}, fh)
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (sample indices {ids})")
            step += 1
            log.append({"step": step, "epoch": epoch, "lr": lr, "train_loss": value,
                        "grad_norm": norm, "val_sisdr": None})
        last_epoch = epoch == cfg.epochs - 1 or step >= total
        if val_set and ((epoch + 1) % eval_every_epoch == 0 or last_epoch):
            val = evaluate(model, val_set, cfg.batch_size, with_stoi=False)["summary"]["sisdr_mean"]
            log[-1]["val_sisdr"] = val
            model.train()
        else:
            val = None
        if out is not None:
            if val is not None and val > best:
                best = val
                save_checkpoint(out / "best", model, opt, {"epoch": epoch, "step": step, "best_val": best})
            save_checkpoint(out / "last", model, opt, {"epoch": epoch, "step": step, "best_val": best})
            write_log(out / "metrics.jsonl", log)
        elif val is not None:
            best = max(best, val)
        if on_epoch is not None:
            on_epoch(epoch, log)
    if out is not None and log:
        from .plotting import plot_loss_curve
        plot_loss_curve(log, out / "loss_curve.png")
    return TrainResult(log, best, step, out)


def write_log(path, log) -> None:
    with atomic_write(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


def read_log(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
