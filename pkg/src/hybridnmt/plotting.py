"""Figures written next to the CLI's TSV/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_scaling(rows, path, title: str = "Scaling factor vs one-device serial") -> None:
    """Bar chart of ``rows = [(strategy, scaling_factor), ...]``."""
    names = [r[0] for r in rows]
    vals = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    bars = ax.bar(names, vals, color="#4c72b0")
    ax.axhline(1.0, color="grey", lw=0.8, ls="--")
    for b, v in zip(bars, vals):
        ax.text(b.get_x() + b.get_width() / 2, v, f"{v:.2f}", ha="center", va="bottom",
                fontsize=8)
    ax.set_ylabel("scaling factor")
    ax.set_title(title)
    ax.tick_params(axis="x", labelrotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_perplexity(records, path) -> None:
    xs = [r["batches"] for r in records]
    ys = [r["devPpl"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(xs, ys, marker="o", ms=3)
    ax.set_xlabel("mini-batches")
    ax.set_ylabel("dev perplexity")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gantt(tasks, n_devices: int, path, title: str = "") -> None:
    """Per-device timeline of simulated tasks (forward blue, backward orange, sync grey)."""
    fig, ax = plt.subplots(figsize=(8, 0.6 * (n_devices + 1) + 1))
    for t in tasks:
        color = ("#999999" if t.name == "sync" else
                 "#dd8452" if t.name.startswith("bwd:") else "#4c72b0")
        ax.broken_barh([(t.start, t.end - t.start)], (t.device - 0.4, 0.8), color=color)
    ax.set_yticks(range(n_devices + 1))
    ax.set_yticklabels([f"dev {d}" for d in range(n_devices)] + ["link"])
    ax.set_xlabel("ticks")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
