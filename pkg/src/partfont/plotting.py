"""Figure emitters for the ablation grid and class-wise evaluation."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .dataset import ALPHABET

_PANELS = (("l1", "L1 distance"), ("local_l1", "local L1 distance"), ("ssim", "SSIM"))


def plot_ablation(ablation: dict, out_path: str | Path) -> Path:
    """Three panels (L1, local L1, SSIM) vs part count, one line per size."""
    by_size: dict[int, list[dict]] = defaultdict(list)
    for cell in ablation["cells"]:
        by_size[cell["part_size"]].append(cell)
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for ax, (key, label) in zip(axes, _PANELS):
        for size in sorted(by_size):
            cells = sorted(by_size[size], key=lambda c: c["k"])
            ks = [c["k"] for c in cells]
            ys = [c["aggregate"][key] for c in cells]
            ax.plot(ks, ys, marker="o", label=f"part size {size}")
        ax.set_xlabel("number of parts K")
        ax.set_ylabel(label)
        ax.set_xticks(sorted({c["k"] for cells in by_size.values() for c in cells}))
        ax.grid(alpha=0.3)
        ax.legend()
    fig.suptitle("Generation quality vs part size and part count")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_classwise_l1(report_csv: str | Path, out_path: str | Path, title: str = "") -> Path:
    """Box plot of per-character L1 over the evaluated fonts."""
    per_char: dict[str, list[float]] = defaultdict(list)
    with open(report_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            per_char[row["char"]].append(float(row["l1"]))
    data = [per_char.get(c, []) for c in ALPHABET]
    fig, ax = plt.subplots(figsize=(12, 4))
    ax.boxplot(data, tick_labels=list(ALPHABET))
    ax.set_xlabel("character class")
    ax.set_ylabel("L1 distance")
    ax.set_title(f"Class-wise L1 {('(' + title + ')') if title else ''}")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
