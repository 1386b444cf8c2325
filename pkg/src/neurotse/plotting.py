"""Static figures written to files (Agg backend, no display)."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    fig.savefig(tmp, dpi=110)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_loss_curve(log, path) -> Path:
    steps = [r["step"] for r in log]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [-r["train_loss"] for r in log], lw=0.8, label="train SI-SDR")
    val = [(r["step"], r["val_sisdr"]) for r in log if r.get("val_sisdr") is not None]
    if val:
        ax.plot(*zip(*val), "o-", ms=3, label="val SI-SDR")
    ax.set_xlabel("step")
    ax.set_ylabel("dB")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_eval(rows, path) -> Path:
    """Scatter of SI-SDR w.r.t. attended vs unattended; points above the diagonal are correct selections."""
    att = [r["sisdr"] for r in rows]
    un = [r["sisdr_unattended"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(un, att, s=14, c=["tab:green" if r["selected"] else "tab:red" for r in rows])
    lo, hi = min(att + un) - 1, max(att + un) + 1
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.7)
    ax.set_xlabel("SI-SDR vs unattended (dB)")
    ax.set_ylabel("SI-SDR vs attended (dB)")
    ax.set_title(f"selection rate {sum(r['selected'] for r in rows) / len(rows):.2f}")
    fig.tight_layout()
    return _save(fig, path)
