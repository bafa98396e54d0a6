"""Matplotlib figures for training metrics and the timing benchmark (Agg backend, files only)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_metrics(path) -> dict[str, list[float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def plot_training(metrics_csv, out_dir) -> list[Path]:
    """Loss/accuracy curves and per-layer λ trajectories next to the CSV."""
    cols = read_metrics(metrics_csv)
    out_dir = Path(out_dir)
    if not cols:
        return []
    step = cols["step"]

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax_loss.plot(step, cols["loss"], lw=0.8)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("masked loss")
    ax_acc.plot(step, cols["accuracy"], lw=0.8)
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("masked accuracy (batch)")
    fig.tight_layout()
    curves = out_dir / "training_curves.png"
    fig.savefig(curves, dpi=120)
    plt.close(fig)

    layers = sorted({int(k.rsplit("_l", 1)[1]) for k in cols if k.startswith("lambda")})
    fig, axes = plt.subplots(1, max(len(layers), 1), figsize=(4 * max(len(layers), 1), 3.2), squeeze=False)
    for ax, layer in zip(axes[0], layers):
        for j, label in enumerate(("full", "chunk", "mem"), start=1):
            ax.plot(step, cols[f"lambda{j}_l{layer}"], label=f"λ{j} {label}")
        ax.axhline(1 / 3, color="grey", lw=0.5, ls="--")
        ax.set_title(f"layer {layer}")
        ax.set_xlabel("step")
        ax.set_ylim(0, 1)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    lam = out_dir / "lambdas.png"
    fig.savefig(lam, dpi=120)
    plt.close(fig)
    return [curves, lam]


def plot_bench(rows, path) -> Path:
    """Log-log median time versus sequence length, one line per mode."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in sorted({r.mode for r in rows}):
        pts = sorted((r.seq_len, r.median_s) for r in rows if r.mode == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("median attention time (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
