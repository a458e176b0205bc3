"""Report figures written next to the JSON/text outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_ar_curve(curve, path, auc_value: float | None = None) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        an = np.arange(1, len(curve) + 1)
        ax.plot(an, 100.0 * np.asarray(curve), lw=1.5)
        ax.set_xlabel("average number of proposals (AN)")
        ax.set_ylabel("AR (%)")
        ax.set_xlim(1, len(curve))
        ax.set_ylim(0, 100)
        if auc_value is not None:
            ax.set_title(f"AR vs AN, AUC = {auc_value:.2f}")
        return _save(fig, path)


def plot_loss(records: list[dict], path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        steps = [r["step"] for r in records]
        for key, style in (("total", "-"), ("L_b", "--"), ("L_cls", ":"), ("L_reg", "-.")):
            ax.plot(steps, [r[key] for r in records], style, lw=1.0, label=key)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_boundaries(p_start, p_end, path, instances=()) -> Path:
    """Start/end probability sequences with ground-truth spans shaded."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 2.4))
        T = len(p_start)
        for s, e in instances:
            ax.axvspan(s * T, e * T, color="0.85", lw=0)
        ax.plot(p_start, lw=1.0, label="start")
        ax.plot(p_end, lw=1.0, label="end")
        ax.set_xlim(0, T - 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("position")
        ax.legend(frameon=False, loc="upper right")
        return _save(fig, path)
