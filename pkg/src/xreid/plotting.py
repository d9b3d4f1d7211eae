"""Figures for ablation grids, written next to their CSVs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SWEEPS = ("sii_stride", "lii_stride")


def _summary(rows, protocol):
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    mean, std = [], []
    for v in variants:
        vals = [r["map"] for r in rows if r["variant"] == v and r["protocol"] == protocol]
        mean.append(np.mean(vals))
        std.append(np.std(vals))
    return variants, np.array(mean), np.array(std)


def plot_grid(rows: list[dict], grid: str, path) -> None:
    protocols = list(dict.fromkeys(r["protocol"] for r in rows))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for j, p in enumerate(protocols):
        variants, mean, std = _summary(rows, p)
        x = np.arange(len(variants))
        if grid in _SWEEPS:
            ax.errorbar(x, mean, yerr=std, marker="o", capsize=3, label=p)
        else:
            w = 0.8 / len(protocols)
            ax.bar(x + (j - (len(protocols) - 1) / 2) * w, mean, w, yerr=std, capsize=3, label=p)
    ax.set_xticks(np.arange(len(variants)))
    ax.set_xticklabels(variants, rotation=30 if len(variants) > 5 else 0, ha="right" if len(variants) > 5 else "center")
    ax.set_ylabel("mAP (mean over seeds)")
    ax.set_title(grid)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
