"""CSV and SVG emission for run outputs."""

from __future__ import annotations

import csv
import math
from html import escape
from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from . import __version__
from .harness import DRIFT_QUANTITIES, SAMPLE_COLUMNS, RunOutput

SERIES_HEADER = ("t", "x1", "x2", "x3", "v1", "v2", "v3", "E", "M", "I", "xi", "Hh", "Ih")
DRIFT_HEADER = ("quantity", "initial", "max_abs_dev", "final_dev", "first_window_dev", "last_window_dev")
assert SERIES_HEADER == SAMPLE_COLUMNS


def _cell(x: float) -> str:
    # repr round-trips float64 exactly
    return "" if math.isnan(x) else repr(float(x))


def metadata_lines(out: RunOutput) -> list:
    lines = [f"cpdyn {__version__}"]
    lines += [f"scenario.{k} = {v}" for k, v in out.scenario.as_dict().items()]
    st = out.solver_stats
    lines += [
        f"solver.steps = {st.steps}",
        f"solver.total_iterations = {st.total_iterations}",
        f"solver.max_iterations = {st.max_iterations}",
        f"solver.max_residual = {st.max_residual!r}",
        f"wall_time = {out.wall_time:.6f}",
    ]
    return lines


def write_series(data: np.ndarray, meta: Sequence[str], path) -> Path:
    """Write ``#`` metadata lines, the series header and one row per sample."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in meta:
            fh.write(f"# {line}\n")
        fh.write(",".join(SERIES_HEADER) + "\n")
        for row in data:
            fh.write(",".join(_cell(x) for x in row) + "\n")
    return path


def emit_csv(out: RunOutput, path) -> Path:
    """Write midpoint samples with ``#`` metadata lines; NaN becomes an empty cell."""
    return write_series(out.samples.data, metadata_lines(out), path)


def read_series_csv(path) -> Tuple[np.ndarray, Dict[str, str]]:
    """Parse a file written by :func:`emit_csv` into ``(data, metadata)``."""
    meta = {}
    rows = []
    with Path(path).open(newline="") as fh:
        header = None
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if " = " in body:
                    k, v = body.split(" = ", 1)
                    meta[k.strip()] = v.strip()
                else:
                    meta.setdefault("_banner", body)
                continue
            if header is None:
                header = tuple(line.strip().split(","))
                if header != SERIES_HEADER:
                    raise ValueError(f"unexpected CSV header {header}")
                continue
            if line.strip():
                rows.append([float(c) if c else math.nan for c in line.rstrip("\r\n").split(",")])
    data = np.array(rows, dtype=float).reshape(-1, len(SERIES_HEADER))
    return data, meta


def emit_drift_csv(outputs: Mapping[str, RunOutput], path) -> Path:
    """One row per (label, quantity); ``label`` names the run (method or method/h)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        multi = len(outputs) > 1
        w.writerow((("run",) if multi else ()) + DRIFT_HEADER)
        for label, out in outputs.items():
            for q in DRIFT_QUANTITIES:
                d = out.drift[q]
                w.writerow((((label,) if multi else ())
                            + (q,) + tuple(_cell(x) for x in (d.initial, d.max_abs_dev, d.final_dev,
                                                               d.first_window_dev, d.last_window_dev))))
    return path


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _envelope(t: np.ndarray, y: np.ndarray, max_points: int):
    """Keep min and max per bin so downsampled curves preserve their extremes."""
    n = len(t)
    if n <= max_points:
        return t, y
    nb = max_points // 2
    edges = np.linspace(0, n, nb + 1).astype(int)
    keep = []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        seg = y[a:b]
        i, j = a + int(np.nanargmin(seg)), a + int(np.nanargmax(seg))
        keep.extend(sorted({i, j}))
    keep = np.array(keep)
    return t[keep], y[keep]


def padded_range(values: np.ndarray) -> Tuple[float, float]:
    """``[min, max]`` widened by 10% of the span on each side."""
    lo, hi = float(np.nanmin(values)), float(np.nanmax(values))
    span = hi - lo
    if span == 0:
        span = abs(hi) if hi != 0 else 1.0
    return lo - 0.1 * span, hi + 0.1 * span


def emit_svg(series: Mapping[str, Tuple[Sequence[float], Sequence[float]]], path, *,
             title: str = "", xlabel: str = "t", ylabel: str = "",
             width: int = 800, height: int = 260, max_points: int = 4000) -> Path:
    """Standalone SVG line chart: one polyline per series, axis labels and legend.

    The plot area is a nested ``<svg>`` whose ``viewBox`` is in data units
    (y flipped), spanning the time range and the y-range padded by 10%.
    """
    items = [(k, np.asarray(t, float), np.asarray(y, float)) for k, (t, y) in series.items()]
    items = [(k, t[np.isfinite(y)], y[np.isfinite(y)]) for k, t, y in items]
    if not items or all(len(t) == 0 for _, t, _ in items):
        raise ValueError("emit_svg needs at least one non-empty series")
    path = Path(path)
    t_all = np.concatenate([t for _, t, _ in items])
    y_all = np.concatenate([y for _, _, y in items])
    t0, t1 = float(t_all.min()), float(t_all.max())
    if t1 == t0:
        t1 = t0 + 1.0
    y0, y1 = padded_range(y_all)

    ml, mr, mt, mb = 90, 150, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
        f'<svg id="plot" x="{ml}" y="{mt}" width="{pw}" height="{ph}" '
        f'viewBox="{t0!r} {-y1!r} {t1 - t0!r} {y1 - y0!r}" preserveAspectRatio="none">',
    ]
    for i, (label, t, y) in enumerate(items):
        td, yd = _envelope(t, y, max_points)
        pts = " ".join(f"{a!r},{-b!r}" for a, b in zip(td.tolist(), yd.tolist()))
        parts.append(f'<polyline fill="none" stroke="{_PALETTE[i % len(_PALETTE)]}" '
                     f'stroke-width="1.2" vector-effect="non-scaling-stroke" '
                     f'data-label="{escape(label)}" points="{pts}"/>')
    parts.append("</svg>")
    parts += [
        f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{mt + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {mt + ph / 2})">{escape(ylabel)}</text>',
        f'<text x="{ml}" y="{mt + ph + 16}" text-anchor="start">{t0:.6g}</text>',
        f'<text x="{ml + pw}" y="{mt + ph + 16}" text-anchor="end">{t1:.6g}</text>',
        f'<text x="{ml - 4}" y="{mt + ph}" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{ml - 4}" y="{mt + 10}" text-anchor="end">{y1:.3g}</text>',
    ]
    if title:
        parts.append(f'<text x="{ml + pw / 2}" y="{mt - 10}" text-anchor="middle">{escape(title)}</text>')
    for i, (label, _, _) in enumerate(items):
        ly = mt + 14 + 18 * i
        c = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<line x1="{ml + pw + 12}" y1="{ly - 4}" x2="{ml + pw + 36}" y2="{ly - 4}" '
                     f'stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 42}" y="{ly}">{escape(label)}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def deviation_series(out: RunOutput, quantity: str):
    """``(t, Q - Q_first)`` from the stored samples."""
    col = out.samples.column(quantity)
    return out.samples.t, col - out.drift[quantity].initial
