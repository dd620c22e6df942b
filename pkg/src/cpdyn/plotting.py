"""Matplotlib figures for drift reports (error against t, one panel per stepsize)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import _envelope  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 0.8,
}

QUANTITY_LABELS = {
    "E": "energy error",
    "M": "momentum error",
    "I": "magnetic moment error",
    "Hh": "modified energy error (ME)",
    "Ih": "modified magnetic moment error (MM)",
}

Panel = Tuple[str, Mapping[str, Tuple[np.ndarray, np.ndarray]]]


def drift_panels(panels: Sequence[Panel], path, ylabel: str = "", max_points: int = 20_000) -> Path:
    """Stack wide, short panels of ``|Q(t) - Q(t_1/2)|`` against ``t``.

    ``panels`` is a list of ``(title, {label: (t, deviation)})``.
    """
    if not panels:
        raise ValueError("no panels to plot")
    path = Path(path)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(panels), 1, figsize=(7.0, 1.8 * len(panels) + 0.4),
                                 sharex=True, squeeze=False)
        for ax, (title, series) in zip(axes[:, 0], panels):
            for label, (t, dev) in series.items():
                t = np.asarray(t)
                dev = np.abs(np.asarray(dev))
                ok = np.isfinite(dev)
                td, yd = _envelope(t[ok], dev[ok], max_points)
                ax.plot(td, yd, label=label)
            ax.set_title(title, fontsize=9)
            ax.set_ylabel(ylabel)
            ax.ticklabel_format(axis="y", style="sci", scilimits=(-2, 2))
            ax.legend(loc="upper right", ncol=max(1, len(series)), frameon=False)
        axes[-1, 0].set_xlabel("t")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
