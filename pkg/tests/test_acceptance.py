"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import time

import numpy as np
import pytest

from neurotse import cli
from neurotse.config import CorpusSpec, desk_config, toy_config
from neurotse.data import generate_split, make_sample, write_corpus
from neurotse.kan import KANLayer, bspline_basis_values, make_grid
from neurotse.metrics import si_sdr
from neurotse.model import Extractor
from neurotse.ssm import discretize, selective_scan_parallel, selective_scan_sequential
from neurotse.tensor import Tensor
from neurotse.training import Schedule, evaluate, load_checkpoint, lr_at, save_checkpoint, train_loop


class _Stop(Exception):
    pass


# 1 -------------------------------------------------------------------------------

def test_gradient_integrity(tmp_path, record):
    t0 = time.perf_counter()
    rc = cli.main(["gradcheck", "--samples", "512", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    rows = list(csv.DictReader(open(tmp_path / "gradcheck.csv")))
    layer = max(float(r["rel_error"]) for r in rows if r["group"] != "model")
    model = max(float(r["rel_error"]) for r in rows if r["group"] == "model")
    record(1, rc == 0 and layer < 1e-4 and model < 1e-3 and elapsed < 120,
           f"{len(rows)} checks, worst per-layer {layer:.2e} (<1e-4), whole model {model:.2e} (<1e-3), "
           f"{elapsed:.0f} s (<120 s)")


# 2 -------------------------------------------------------------------------------

def test_scan_equivalence(record):
    t0 = time.perf_counter()
    worst = 0.0
    for T in (1, 2, 3, 127, 128, 1024):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            d, N = 3, 4
            x = rng.standard_normal((2, T, d))
            delta = np.log1p(np.exp(rng.standard_normal((2, T, d))))
            A = -np.exp(rng.standard_normal((d, N)))
            B, C = rng.standard_normal((2, T, N)), rng.standard_normal((2, T, N))
            D = rng.standard_normal(d)
            abar, bbar = discretize(delta, A, B)
            ys = selective_scan_sequential(x, abar, bbar, C, D).data
            yp = selective_scan_parallel(x, abar, bbar, C, D).data
            worst = max(worst, float(np.max(np.abs(ys - yp))))
    elapsed = time.perf_counter() - t0
    record(2, worst < 1e-10 and elapsed < 30, f"max |parallel - sequential| {worst:.2e} (<1e-10), {elapsed:.1f} s")


# 3 -------------------------------------------------------------------------------

def test_si_sdr_properties(record):
    rng = np.random.default_rng(0)
    ref, est = rng.standard_normal(4000), rng.standard_normal(4000)
    est = est + 2 * ref
    base = si_sdr(est, ref)
    scale = max(abs(si_sdr(a * est, ref) - base) for a in (1e-3, 0.5, 7.0, 1e4))
    raw = si_sdr(np.array([1.0, 1.0]), np.array([1.0, 0.0]), zero_mean=False)
    ortho = si_sdr(np.array([0.0, 1.0]), np.array([1.0, 0.0]), zero_mean=False)
    coll = si_sdr(3 * ref, ref)
    ok = scale <= 1e-9 and raw == 0.0 and ortho == -60.0 and coll == 60.0
    record(3, ok, f"scale drift {scale:.1e} (<=1e-9), raw [1,1] vs [1,0] = {raw} dB, "
                  f"orthogonal {ortho} dB, collinear {coll} dB")


# 4 -------------------------------------------------------------------------------

def test_kan_correctness(record):
    pou = 0.0
    for k in (1, 2, 3):
        grid = make_grid(4, k)
        x = np.concatenate([np.random.default_rng(k).uniform(-1, 1, 1000), grid[k:k + 5]])
        pou = max(pou, float(np.max(np.abs(bspline_basis_values(x, grid, k).sum(-1) - 1.0))))
    layer = KANLayer(1, 1, np.random.default_rng(0), G=4, k=3)
    xs = np.linspace(-1, 1, 400)
    coef, *_ = np.linalg.lstsq(bspline_basis_values(xs, layer.grid, 3), xs, rcond=None)
    layer.spline_coef.data = coef.reshape(1, 1, -1)
    layer.base_weight.data = np.zeros((1, 1))
    layer.scale_spline.data = np.ones((1, 1))
    probe = np.linspace(-1, 1, 2001)
    fit = float(np.max(np.abs(layer(Tensor(probe[:, None])).data[:, 0] - probe)))
    record(4, pou <= 1e-12 and fit < 1e-3, f"partition of unity error {pou:.1e} (<=1e-12), identity fit {fit:.1e} (<1e-3)")


# 5 -------------------------------------------------------------------------------

@pytest.mark.slow
def test_overfit_sanity(record):
    spec = CorpusSpec(n_samples=8, duration=1.0, sample_rate=8000, eeg_snr=30.0, n_channels=16)
    samples = [make_sample(spec, i) for i in range(8)]
    cfg = desk_config(epochs=2000)
    model = Extractor(cfg)
    state = {"gain": -np.inf, "steps": 0}
    t0 = time.perf_counter()

    def check(epoch, log):
        state["steps"] = log[-1]["step"]
        if state["steps"] % 50 == 0:
            state["gain"] = evaluate(model, samples, with_stoi=False)["summary"]["sisdri_mean"]
            model.train()
            if state["gain"] >= 8.0:
                raise _Stop

    try:
        train_loop(model, samples, None, cfg, on_epoch=check)
    except _Stop:
        pass
    elapsed = time.perf_counter() - t0
    record(5, state["gain"] >= 8.0 and state["steps"] <= 2000,
           f"train-set SI-SDR gain over mixture {state['gain']:.2f} dB (>=8) after {state['steps']} steps "
           f"(<=2000), {elapsed / 60:.1f} min")


# 6 and 7 ------------------------------------------------------------------------------

SELECTION_EPOCHS = 20


@pytest.fixture(scope="module")
def selection_runs():
    spec = CorpusSpec(n_samples=250, duration=1.0, eeg_snr=20.0, n_channels=16)
    train, val, test = (generate_split(spec, s) for s in ("train", "val", "test"))
    assert (len(train), len(val), len(test)) == (200, 25, 25)
    out = {}
    for name, kw in (("full", {}), ("linear_eeg", dict(eeg_encoder="linear")),
                     ("conv_front_end", dict(use_speech_mamba=False))):
        cfg = desk_config(epochs=SELECTION_EPOCHS, seed=0, **kw)
        model = Extractor(cfg)
        train_loop(model, train, val, cfg)
        out[name] = evaluate(model, test, with_stoi=False)["summary"]
    return out


@pytest.mark.slow
def test_attention_cue_selection(selection_runs, record):
    s = selection_runs["full"]
    record(6, s["selection_rate"] >= 0.8,
           f"test selection rate {s['selection_rate']:.2f} (>=0.80, chance 0.50), SI-SDR {s['sisdr_mean']:.2f} dB "
           f"over {s['n']} samples")


@pytest.mark.slow
def test_ablation_direction(selection_runs, record):
    full = selection_runs["full"]
    parts, ok = [], True
    for name in ("linear_eeg", "conv_front_end"):
        abl = selection_runs[name]
        ok &= full["selection_rate"] >= abl["selection_rate"] and full["sisdr_mean"] >= abl["sisdr_mean"]
        parts.append(f"{name} {abl['selection_rate']:.2f} / {abl['sisdr_mean']:.2f} dB")
    record(7, ok, f"full {full['selection_rate']:.2f} / {full['sisdr_mean']:.2f} dB vs " + ", ".join(parts))


# 8 -------------------------------------------------------------------------------

def test_schedule(record):
    total = 4000
    s = Schedule(2e-4, total, 0.05)
    W = s.warmup_steps
    peak = lr_at(W, s)
    before = lr_at(W - 1, s)
    cosine_limit = 2e-4 * 0.5 * (1 + np.cos(np.pi * 0 / (total - W)))
    after = lr_at(W + 1, s)
    gap = max(abs(peak - cosine_limit), abs(peak - (before + 2e-4 / W)))
    ok = peak == 2e-4 and W == 200 and all(lr_at(t, s) < 2e-4 for t in range(W)) and gap <= 1e-12 and after < peak
    record(8, ok, f"peak {peak:g} at step {W} = 5% of {total}, boundary gap {gap:.1e} (<=1e-12)")


# 9 -------------------------------------------------------------------------------

def test_determinism_and_persistence(tmp_path, record):
    spec = CorpusSpec(n_samples=12, duration=0.5, n_channels=4)
    write_corpus(spec, tmp_path / "c1")
    write_corpus(spec, tmp_path / "c2")
    files = sorted(p.relative_to(tmp_path / "c1") for p in (tmp_path / "c1").rglob("*") if p.is_file())
    corpus_same = all((tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes() for f in files)

    train, val = generate_split(spec, "train"), generate_split(spec, "val")
    cfg = toy_config(batch_size=4, epochs=2, lr_max=1e-3)
    for run in ("a", "b"):
        train_loop(Extractor(cfg), train, val, cfg, tmp_path / run)
    logs_same = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    model, _, _ = load_checkpoint(tmp_path / "a" / "last")
    model.eval()
    test = generate_split(spec, "test")
    mix = np.stack([s.mixture for s in test])
    eeg = np.stack([s.eeg for s in test])
    y0 = model(mix, eeg).data
    save_checkpoint(tmp_path / "again", model)
    again, _, _ = load_checkpoint(tmp_path / "again")
    again.eval()
    forward_same = np.array_equal(again(mix, eeg).data, y0)
    record(9, corpus_same and logs_same and forward_same,
           f"corpus regeneration identical over {len(files)} files: {corpus_same}, training logs identical: "
           f"{logs_same}, checkpoint forward identical: {forward_same}")
