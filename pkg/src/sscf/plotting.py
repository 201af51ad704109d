"""Figures for CLI reports, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def training_curve(records: list[dict], path, window: int = 50) -> Path:
    ep = np.array([r["episode"] for r in records])
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key, label in (("loss_total", "total"), ("loss_tet", "TET"), ("loss_info", "InfoNCE")):
        ax_l.plot(ep, _smooth([r[key] for r in records], window), label=label)
    ax_l.set_xlabel("episode")
    ax_l.set_ylabel("loss")
    ax_l.legend()
    ax_a.plot(ep, _smooth([r["accuracy"] for r in records], window))
    ax_a.set_xlabel("episode")
    ax_a.set_ylabel("query accuracy")
    ax_a.set_ylim(0, 1)
    return _save(fig, path)


def sweep_plot(parameter: str, values, means, cis, path, series: dict | None = None) -> Path:
    """Accuracy against the swept value; ``series`` adds extra labelled curves."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(values, means, yerr=cis, marker="o", capsize=3, label="accuracy")
    for label, (m, c) in (series or {}).items():
        ax.errorbar(values, m, yerr=c, marker="s", capsize=3, label=label)
    ax.set_xlabel(parameter)
    ax.set_ylabel("test accuracy")
    if series:
        ax.legend()
    return _save(fig, path)


def energy_bars(report, path) -> Path:
    names = [p.name for p in report.layers]
    sop = np.array([p.sops for p in report.layers], dtype=float)
    mac = np.array([p.analog_flops for p in report.layers], dtype=float)
    fig, ax = plt.subplots(figsize=(max(5, 0.4 * len(names)), 3.5))
    x = np.arange(len(names))
    ax.bar(x, sop * 0.9e-12 * 1e3, label="SOP energy")
    ax.bar(x, mac * 4.6e-12 * 1e3, bottom=sop * 0.9e-12 * 1e3, label="MAC energy")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=70, fontsize=7)
    ax.set_ylabel("mJ per item")
    ax.legend()
    return _save(fig, path)


def raster_plot(counts: dict[str, np.ndarray], path) -> Path:
    """Spike count per layer (rows) and time step (columns)."""
    names = list(counts)
    grid = np.array([counts[n] for n in names], dtype=float)
    fig, ax = plt.subplots(figsize=(max(4, grid.shape[1]), 0.35 * len(names) + 1.5))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("time step")
    fig.colorbar(im, ax=ax, label="spikes")
    return _save(fig, path)


def _smooth(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if window <= 1 or len(v) < 2:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
