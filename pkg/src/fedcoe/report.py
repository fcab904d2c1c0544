"""Static figures written next to the CSV outputs (Agg backend, PNG files)."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PathLike = Union[str, Path]


def _read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def plot_metrics(metrics_csv: PathLike, out_png: PathLike, title: str = "") -> Path:
    """Global and mean personalized accuracy per round, gate KL on a twin axis."""
    rows = _read_csv(metrics_csv)
    rounds = [int(r["round"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(rounds, [_num(r["global_acc"]) for r in rows], label="global acc")
    ax.plot(rounds, [_num(r["mean_personalized_acc"]) for r in rows], label="mean personalized acc")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    kl = [_num(r["mean_kl_gate"]) for r in rows]
    if any(not math.isnan(v) for v in kl):
        ax2 = ax.twinx()
        ax2.plot(rounds, kl, color="gray", linestyle=":", label="gate KL")
        ax2.set_ylabel("mean gate KL")
        ax2.legend(loc="lower right")
    ax.legend(loc="lower left")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def plot_coldstart(results_csv: PathLike, out_png: PathLike) -> Path:
    """Bar per new client with the zero-shot accuracy."""
    rows = _read_csv(results_csv)
    names = [Path(r["client"]).stem for r in rows]
    accs = [_num(r["accuracy"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    ax.bar(range(len(rows)), accs, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("zero-shot accuracy")
    if rows:
        ax.set_title(f"cold start ({rows[0].get('mode', '')})")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


def plot_sweep(summary_csv: PathLike, grid_keys: Sequence[str], out_png: PathLike) -> Path:
    """Final accuracies per sweep combination."""
    rows = _read_csv(summary_csv)
    labels = [",".join(f"{k}={r[k]}" for k in grid_keys) for r in rows]
    g = [_num(r["global_acc"]) for r in rows]
    p = [_num(r["mean_personalized_acc"]) for r in rows]
    xs = range(len(rows))
    width = 0.4
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(rows) + 2), 4))
    ax.bar([x - width / 2 for x in xs], g, width, label="global acc")
    ax.bar([x + width / 2 for x in xs], p, width, label="mean personalized acc")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("final-round accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
