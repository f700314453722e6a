"""Figures rendered next to the CSV reports."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _size(scale=1.0):
    width = 5.0 * scale
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return width, width * golden


def _save(fig, path):
    fig.tight_layout()
    # no metadata so repeated runs write identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _mean_by(rows, keys, value):
    acc = defaultdict(list)
    for r in rows:
        if r.get(value, "") != "":
            acc[tuple(r[k] for k in keys)].append(float(r[value]))
    return {k: sum(v) / len(v) for k, v in acc.items()}


def plot_hit_rate(rows, path):
    """HR against cutoff, one line per variant (averaged over seeds)."""
    hr = _mean_by(rows, ("variant", "cutoff"), "hr")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        for variant in dict.fromkeys(r["variant"] for r in rows):
            pts = sorted((c, v) for (name, c), v in hr.items() if name == variant)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=variant)
        ax.set_xlabel("cutoff n")
        ax.set_ylabel("HR@n")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_ablation(rows, path):
    """Grouped bars of HR per cutoff and variant."""
    hr = _mean_by(rows, ("variant", "cutoff"), "hr")
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    cutoffs = sorted({r["cutoff"] for r in rows})
    width = 0.8 / max(len(variants), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size(1.2))
        for i, variant in enumerate(variants):
            xs = [j + i * width for j in range(len(cutoffs))]
            ax.bar(xs, [hr.get((variant, c), 0.0) for c in cutoffs], width, label=variant)
        ax.set_xticks([j + width * (len(variants) - 1) / 2 for j in range(len(cutoffs))])
        ax.set_xticklabels([f"HR@{c}" for c in cutoffs])
        ax.set_ylabel("hit rate")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_sweep(rows, path):
    """HR and mean latency against K on twin axes."""
    rows = sorted(rows, key=lambda r: r["k"])
    ks = [r["k"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        ax.plot(ks, [float(r["hr"]) for r in rows], marker="o", color="C0")
        ax.set_xlabel("K (predicted categories)")
        ax.set_ylabel(f"HR@{rows[0]['cutoff']}", color="C0")
        lat = [r.get("mean_ms", "") for r in rows]
        if all(v != "" for v in lat):
            ax2 = ax.twinx()
            ax2.plot(ks, [float(v) for v in lat], marker="s", linestyle="--", color="C1")
            ax2.set_ylabel("mean latency (ms)", color="C1")
        _save(fig, path)


def plot_bench(rows, path):
    """Recall against p50 latency, one line per (mode, K)."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["mode"], r["k"])].append(r)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        for (mode, k), rs in sorted(groups.items()):
            rs = sorted(rs, key=lambda r: float(r["p50_ms"]))
            ax.plot([float(r["p50_ms"]) for r in rs], [float(r["recall"]) for r in rs], marker="o",
                    label=f"{mode} K={k}")
        ax.set_xlabel("p50 latency (ms)")
        ax.set_ylabel("recall vs exact")
        ax.legend(frameon=False)
        _save(fig, path)
