"""Command-line entry points: gen, train, extract, eval, gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audio_io import atomic_write, eeg_read, wav_read, wav_write
from .config import ConfigError, CorpusSpec, ModelConfig, toy_config
from .errors import ChannelMismatchError, CheckpointError, DataError, NeuroTSEError, ParseError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6
EXIT_DATA = 7


class GradcheckFailed(NeuroTSEError):
    pass


def _load_model_config(path, seed=None) -> ModelConfig:
    cfg = ModelConfig.load(path) if path else ModelConfig()
    return cfg.replace(seed=seed) if seed is not None else cfg


def cmd_gen(args) -> int:
    spec = CorpusSpec.load(args.spec) if args.spec else CorpusSpec()
    over = {k: v for k, v in (("n_samples", args.n_samples), ("eeg_snr", args.eeg_snr),
                              ("duration", args.duration), ("n_channels", args.channels),
                              ("master_seed", args.seed)) if v is not None}
    spec = spec.replace(**over)
    from .data import write_corpus

    out = write_corpus(spec, args.out)
    print(f"wrote {spec.n_samples} samples to {out}")
    return EXIT_OK


def _check_corpus_fits(cfg: ModelConfig, corpus_dir):
    from .data import load_manifest

    spec = CorpusSpec.from_dict(load_manifest(corpus_dir)["corpus_spec"])
    if spec.n_channels != cfg.eeg_channels:
        raise ConfigError(f"corpus has {spec.n_channels} EEG channels but the model config expects "
                          f"{cfg.eeg_channels}")
    if spec.sample_rate != cfg.sample_rate:
        raise ConfigError(f"corpus sample rate {spec.sample_rate} differs from model config {cfg.sample_rate}")
    return spec


def cmd_train(args) -> int:
    from .data import load_split
    from .model import Extractor
    from .training import train_loop

    cfg = _load_model_config(args.config, args.seed)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    _check_corpus_fits(cfg, args.corpus)
    train = load_split(args.corpus, "train", cfg.eeg_channels)
    val = load_split(args.corpus, "val", cfg.eeg_channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / "config.json", "w") as fh:
        fh.write(cfg.to_json())
    res = train_loop(Extractor(cfg), train, val, cfg, out, max_steps=args.max_steps, resume=args.resume)
    print(f"trained {res.steps} steps; best val SI-SDR {res.best_val:.2f} dB; checkpoints in {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .tensor import no_grad
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    mix, rate = wav_read(args.mixture)
    if rate != cfg.sample_rate:
        raise ConfigError(f"{args.mixture} is sampled at {rate} Hz, model expects {cfg.sample_rate} Hz")
    eeg = eeg_read(args.eeg, cfg.eeg_channels)
    model.eval()
    with no_grad():
        est = np.asarray(model(mix[None, :], eeg[None]).data)[0]
    peak = np.max(np.abs(est))
    if peak > 0.99:
        est = est * (0.99 / peak)
    wav_write(args.out, est, rate)
    print(f"wrote {len(est)} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_split
    from .plotting import plot_eval
    from .training import evaluate, load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    _check_corpus_fits(model.cfg, args.corpus)
    samples = load_split(args.corpus, args.split, model.cfg.eeg_channels)
    if not samples:
        raise DataError(f"split {args.split!r} of {args.corpus} is empty")
    res = evaluate(model, samples, model.cfg.batch_size)
    out = Path(args.out)
    fields = ["index", "sisdr", "sisdr_unattended", "sisdr_mixture", "stoi", "selected"]
    with atomic_write(out / f"eval_{args.split}.csv", "w") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in res["rows"]:
            w.writerow({k: r[k] for k in fields})
    with atomic_write(out / f"eval_{args.split}_summary.json", "w") as fh:
        json.dump(res["summary"], fh, indent=1)
    plot_eval(res["rows"], out / f"eval_{args.split}.png")
    s = res["summary"]
    print(f"split={args.split} n={s['n']} sisdr={s['sisdr_mean']:.2f}+/-{s['sisdr_std']:.2f} dB "
          f"sisdri={s['sisdri_mean']:.2f} dB stoi={s['stoi_mean']:.3f}+/-{s['stoi_std']:.3f} "
          f"selection={s['selection_rate']:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    cfg = ModelConfig.load(args.config) if args.config else toy_config()
    results = run_suite(cfg, n_samples=args.samples, seed=args.seed or 0)
    rows = [{"group": r.group, "parameter": r.name, "rel_error": f"{r.error:.3e}", "tol": r.tol,
             "ok": r.ok} for r in results]
    if args.out:
        with atomic_write(Path(args.out) / "gradcheck.csv", "w") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    for r in results:
        if not r.ok or args.verbose:
            print(f"{'ok  ' if r.ok else 'FAIL'} {r.group:16s} {r.name:40s} {r.error:.3e} (tol {r.tol:g})")
    failed = [r for r in results if not r.ok]
    worst = max(r.error for r in results)
    print(f"{len(results)} parameter checks, {len(failed)} failed, worst relative error {worst:.3e}")
    if failed:
        raise GradcheckFailed(f"{len(failed)} gradient checks above tolerance")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurotse", description=__doc__)
    p.add_argument("--device-threads", type=int, default=None, metavar="N",
                   help="cap BLAS/OpenMP threads used by numpy")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--spec", help="CorpusSpec JSON file (defaults used if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="master seed override")
    g.add_argument("--n-samples", type=int)
    g.add_argument("--eeg-snr", type=float)
    g.add_argument("--duration", type=float)
    g.add_argument("--channels", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an extractor on a corpus")
    t.add_argument("--config", help="ModelConfig JSON file")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/last if present")
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("extract", help="extract the attended talker from one mixture")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--mixture", required=True)
    x.add_argument("--eeg", required=True, help="NXE1 binary or CSV (channels as rows)")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_extract)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus split (CSV + PNG)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    c.add_argument("--config", help="ModelConfig JSON (toy config if omitted)")
    c.add_argument("--samples", type=int, default=512)
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    limiter = None
    if args.device_threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.device_threads)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ChannelMismatchError) as exc:
        print(f"error: config mismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: corrupted checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except GradcheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GRADCHECK
    except (DataError, ParseError) as exc:
        print(f"error: bad input data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NeuroTSEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
