"""Optional PNG figures rendered next to the tabular reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
MODE_COLORS = {"random": "0.55", "composition": "#4c72b0", "interpolation": "#55a868",
               "extrapolation": "#c44e52"}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    # no Software tag, so PNG bytes do not depend on the matplotlib version
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ratio_histogram(hist_rows, path) -> Path:
    """Bars over the fixed ratio bins; the overflow bin is drawn at 1.5."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        lo = np.array([float(r["bin_lo"]) for r in hist_rows])
        counts = np.array([r["count"] for r in hist_rows], dtype=float)
        total = counts.sum() or 1.0
        ax.bar(lo, counts / total, width=0.1, align="edge", color="#4c72b0", edgecolor="white")
        ax.axvline(1.0, color="k", lw=0.8, ls="--")
        ax.set_xlabel("|f(x) - mean| / |y - mean|")
        ax.set_ylabel("fraction of samples")
        ax.set_xlim(0, 1.6)
        ax.set_xticks([0, 0.5, 1.0, 1.5])
        ax.set_xticklabels(["0", "0.5", "1", ">=1.5"])
        return _save(fig, path)


def plot_similarity(sim, path) -> Path:
    with plt.rc_context(STYLE):
        n = len(sim.labels)
        fig, ax = plt.subplots(figsize=(1.2 + 0.45 * n, 1.0 + 0.45 * n))
        data = np.ma.masked_array(sim.values, sim.mask)
        im = ax.imshow(data, vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(sim.labels, rotation=90)
        ax.set_yticklabels(sim.labels)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="Pearson ρ")
        return _save(fig, path)


def plot_leaderboard(board, path) -> Path:
    with plt.rc_context(STYLE):
        rows = board.rows
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(rows) + 1.5), 3.0))
        if rows:
            x = np.arange(len(rows))
            means = np.clip([r.mean for r in rows], 0, None)
            ax.bar(x, means, yerr=[r.std for r in rows], capsize=2,
                   color=[MODE_COLORS.get(r.split, "0.3") for r in rows])
            ax.set_xticks(x)
            ax.set_xticklabels([f"{r.dataset}\n{r.predictor}" for r in rows], rotation=90)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("R² (clipped at 0)")
        handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in MODE_COLORS.values()]
        ax.legend(handles, list(MODE_COLORS), frameon=False, fontsize=7, loc="upper right")
        return _save(fig, path)
