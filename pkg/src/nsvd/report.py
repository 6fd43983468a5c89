"""Report rendering: delimited output plus matplotlib figures saved
alongside it."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import linalg


def save_sweep_figures(rows: list[dict], summary: dict, outdir,
                       prefix: str = "sweep") -> list[str]:
    """Render eval-loss curves, win-rate bars, and the split diagnostic."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    methods = sorted(summary["methods"])

    ratios = sorted({r["ratio"] for r in rows if "skip_reason" not in r})
    if len(ratios) > 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        for method in methods:
            means = [np.mean([r["eval_loss"] for r in rows
                              if r.get("method") == method and r["ratio"] == rho])
                     for rho in ratios]
            ax.plot(ratios, means, marker="o", label=method)
        ax.set_xlabel("compression ratio")
        ax.set_ylabel("mean evaluation activation loss")
        ax.legend()
        fig.tight_layout()
        path = outdir / f"{prefix}_eval_loss_vs_ratio.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))

    fig, ax = plt.subplots(figsize=(6, 4))
    rates = [summary["methods"][m]["win_rate_vs_asvd1"] for m in methods]
    ax.bar(methods, rates)
    ax.set_ylabel("win rate vs asvd1 (eval loss)")
    ax.set_ylim(0, 1)
    ax.axhline(0.5, color="gray", linestyle="--", linewidth=0.8)
    fig.tight_layout()
    path = outdir / f"{prefix}_win_rate.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(str(path))

    splits = sorted({r["split"] for r in rows if "skip_reason" not in r})
    if len(splits) > 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        for method in methods:
            mono = summary["methods"][method]["split_monotonicity"]["eval_loss"]
            ax.plot(mono["splits"], mono["means"], marker="s",
                    label=f"{method} ({mono['verdict']})")
        ax.set_xlabel("split (stage-1 fraction of rank budget)")
        ax.set_ylabel("mean evaluation activation loss")
        ax.invert_xaxis()
        ax.legend()
        fig.tight_layout()
        path = outdir / f"{prefix}_split_sweep.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))

    return written


def save_similarity_figure(cal: np.ndarray, ev: np.ndarray, path,
                           pairs: int = 20000, seed: int = 0) -> str:
    """Histogram of sampled calibration/evaluation column cosine
    similarities."""
    cal = linalg.as_matrix(cal, "cal")
    ev = linalg.as_matrix(ev, "eval")
    rng = np.random.default_rng(seed)
    pairs = min(pairs, cal.shape[1] * ev.shape[1])
    ii = rng.integers(0, cal.shape[1], size=pairs)
    jj = rng.integers(0, ev.shape[1], size=pairs)
    cn = np.linalg.norm(cal, axis=0)[ii]
    en = np.linalg.norm(ev, axis=0)[jj]
    keep = (cn > 0) & (en > 0)
    sims = np.einsum("ij,ij->j", cal[:, ii[keep]], ev[:, jj[keep]]) / (cn[keep] * en[keep])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(sims, bins=60, range=(-1, 1), color="steelblue")
    ax.axvline(float(sims.mean()), color="crimson",
               label=f"mean {sims.mean():.2f} (std {sims.std():.2f})")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("pair count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_layer_loss_figure(reports: list[dict], path) -> str:
    """Bar chart of per-layer plain and evaluation losses."""
    names = [r["layer"] for r in reports]
    xs = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(names)), 4))
    width = 0.35
    ax.bar(xs - width / 2, [r["plain_loss"] for r in reports], width,
           label="plain loss")
    eval_losses = [r.get("eval_loss", math.nan) for r in reports]
    if not all(math.isnan(v) for v in eval_losses):
        ax.bar(xs + width / 2, eval_losses, width, label="eval activation loss")
    ax.set_xticks(xs, names, rotation=30, ha="right")
    ax.set_ylabel("Frobenius loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
