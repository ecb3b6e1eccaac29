"""Figures written next to report files (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import FAMILIES  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(runs: Mapping[str, Sequence[dict]], path: str | Path) -> Path:
    """Total training loss per step, one line per run; Mixup part dashed when logged."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, metrics in runs.items():
        steps = [m["step"] for m in metrics]
        line, = ax.plot(steps, [m["loss_total"] for m in metrics], lw=1.2, label=name)
        mix = [m["loss_mixup"] for m in metrics]
        if all(v is not None for v in mix) and any(m["mu"] for m in metrics):
            ax.plot(steps, mix, lw=0.8, ls="--", color=line.get_color())
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_perplexity_bars(report: dict, path: str | Path) -> Path:
    """Held-out perplexity per family, grouped by run."""
    rows = report["rows"]
    fams = [f for f in FAMILIES if any(f in r["perplexity"]["per_family"] for r in rows)]
    x = np.arange(len(fams) + 1)
    width = 0.8 / max(len(rows), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(x) + 0.3 * len(rows)), 4))
    for i, r in enumerate(rows):
        vals = [r["perplexity"]["per_family"].get(f, np.nan) for f in fams]
        vals.append(r["perplexity"]["overall"])
        ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=r["name"])
    ax.set_xticks(x)
    ax.set_xticklabels(fams + ["overall"])
    ax.set_ylabel("held-out perplexity")
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path)


def plot_composition(composition: dict, path: str | Path) -> Path:
    """Stacked family fractions of the confident and unconfident halves."""
    halves = ["confident", "unconfident"]
    fams = list(composition["fractions"]["confident"])
    fig, ax = plt.subplots(figsize=(5, 4))
    bottom = np.zeros(len(halves))
    for f in fams:
        vals = np.array([composition["fractions"][h][f] for h in halves])
        ax.bar(halves, vals, bottom=bottom, label=f)
        bottom += vals
    ax.set_ylabel("fraction of half")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8, frameon=False, loc="upper left", bbox_to_anchor=(1, 1))
    return _save(fig, path)
