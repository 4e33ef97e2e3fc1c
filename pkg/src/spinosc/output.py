"""CSV / JSON / SVG emission with exact round-tripping.

The trajectory CSV has one fixed 20-column schema regardless of mode; modes
that don't produce a column leave its cells empty.  Values are written with
17 significant digits, so parse(emit(x)) == x bitwise for every finite and
NaN float.  Time is in 1/omega, z in z_g, p in p_g, angular momenta in hbar,
covariances in the matching products.
"""

from __future__ import annotations

import json
import math
from xml.sax.saxutils import escape

import numpy as np

__all__ = [
    "CSV_COLUMNS",
    "AGGREGATE_COLUMNS",
    "trajectory_columns",
    "cumulant_columns",
    "classical_columns",
    "emit_csv",
    "read_csv",
    "emit_aggregate_csv",
    "write_summary",
    "emit_svg",
]

CSV_COLUMNS = (
    "t", "dy_dt", "z_mean", "p_mean", "jx_mean", "jy_mean", "jz_mean",
    "Czz", "Czp", "Cpp", "CzJz", "CpJz", "CJzJz",
    "entropy", "norm_residual",
    "z_classical", "p_classical", "Sx", "Sy", "Sz",
)

AGGREGATE_COLUMNS = (
    "t", "z_mean_avg", "z_mean_var", "p_mean_avg", "p_mean_var",
    "jz_mean_avg", "jz_mean_var", "entropy_avg", "entropy_var",
)

_RECORD_TO_CSV = {
    "dy_rate": "dy_dt",
    "z_mean": "z_mean",
    "p_mean": "p_mean",
    "jx_mean": "jx_mean",
    "jy_mean": "jy_mean",
    "jz_mean": "jz_mean",
    "czz": "Czz",
    "czp": "Czp",
    "cpp": "Cpp",
    "czjz": "CzJz",
    "cpjz": "CpJz",
    "cjzjz": "CJzJz",
    "entropy": "entropy",
    "norm_residual": "norm_residual",
}


def _times_to_display(record) -> np.ndarray:
    omega = record.params.omega if getattr(record, "params", None) is not None else 1.0
    return np.asarray(record.times, dtype=float) * omega


def trajectory_columns(record) -> dict[str, np.ndarray]:
    """CSV columns of a quantum trajectory record."""
    cols = {"t": _times_to_display(record)}
    for attr, name in _RECORD_TO_CSV.items():
        cols[name] = np.asarray(getattr(record, attr), dtype=float)
    return cols


def cumulant_columns(series) -> dict[str, np.ndarray]:
    """CSV columns of a moment-closure series (no spin-x/y, no entropy)."""
    cols = {"t": _times_to_display(series)}
    for attr, name in _RECORD_TO_CSV.items():
        if hasattr(series, attr):
            cols[name] = np.asarray(getattr(series, attr), dtype=float)
    return cols


def classical_columns(record, omega: float = 1.0) -> dict[str, np.ndarray]:
    """CSV columns of a classical reference trace.

    ClassicalRecord does not carry model parameters, so the time scale for
    the display conversion is passed in (1.0 for natural units).
    """
    return {
        "t": np.asarray(record.times, dtype=float) * omega,
        "z_classical": np.asarray(record.z, dtype=float),
        "p_classical": np.asarray(record.p, dtype=float),
        "Sx": np.asarray(record.sx, dtype=float),
        "Sy": np.asarray(record.sy, dtype=float),
        "Sz": np.asarray(record.sz, dtype=float),
    }


def _merge(parts: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    merged: dict[str, np.ndarray] = {}
    n_rows = None
    for part in parts:
        t = part["t"]
        if n_rows is None:
            n_rows = len(t)
            merged["t"] = t
        else:
            if len(t) != n_rows or not np.allclose(merged["t"], t, rtol=1e-9, atol=1e-12):
                raise ValueError("cannot merge records on different time grids")
        for name, arr in part.items():
            if name != "t":
                merged[name] = arr
    if n_rows is None:
        raise ValueError("nothing to write")
    return merged


def _format(value: float) -> str:
    return f"{value:.17g}"


def emit_csv(path: str, *parts: dict[str, np.ndarray]) -> None:
    """Write merged column dicts to the fixed 20-column schema.

    Parts must share the time grid (exactly what compare mode guarantees by
    sampling the classical integrator on the quantum record's times).  Cells
    of absent columns stay empty; computed NaNs are written as nan.
    """
    merged = _merge(list(parts))
    unknown = set(merged) - set(CSV_COLUMNS)
    if unknown:
        raise ValueError(f"columns outside the schema: {sorted(unknown)}")
    n_rows = len(merged["t"])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for i in range(n_rows):
            fh.write(
                ",".join(
                    _format(merged[name][i]) if name in merged else ""
                    for name in CSV_COLUMNS
                )
                + "\n"
            )


def read_csv(path: str) -> dict[str, np.ndarray]:
    """Read a schema CSV back; empty cells and absent columns become NaN-free
    missing entries (columns that are entirely empty are dropped)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    out: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        cells = [row[j] for row in rows]
        if all(cell == "" for cell in cells):
            continue
        out[name] = np.array(
            [math.nan if cell == "" else float(cell) for cell in cells]
        )
    return out


def emit_aggregate_csv(path: str, result) -> None:
    """Write ensemble aggregates (means/variances over surviving trajectories)."""
    omega = result.spec.params.omega
    cols = {
        "t": np.asarray(result.times, dtype=float) * omega,
        "z_mean_avg": result.z_mean_avg, "z_mean_var": result.z_mean_var,
        "p_mean_avg": result.p_mean_avg, "p_mean_var": result.p_mean_var,
        "jz_mean_avg": result.jz_mean_avg, "jz_mean_var": result.jz_mean_var,
        "entropy_avg": result.entropy_avg, "entropy_var": result.entropy_var,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(AGGREGATE_COLUMNS) + "\n")
        for i in range(len(cols["t"])):
            fh.write(",".join(_format(cols[name][i]) for name in AGGREGATE_COLUMNS) + "\n")


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return None if not math.isfinite(v) else v
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value


def write_summary(path: str, payload: dict) -> None:
    """Deterministic JSON (sorted keys; non-finite floats become null)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def emit_svg(
    path: str,
    times: np.ndarray,
    curves: list[tuple[str, np.ndarray]],
    title: str = "",
    y_label: str = "",
) -> None:
    """Minimal static line plot; cosmetic only, no styling dependencies."""
    width, height = 720, 400
    ml, mr, mt, mb = 64, 16, 30, 42
    t = np.asarray(times, dtype=float)
    finite_vals = np.concatenate(
        [np.asarray(y, dtype=float)[np.isfinite(y)] for _, y in curves]
        or [np.array([0.0])]
    )
    if finite_vals.size == 0:
        finite_vals = np.array([0.0, 1.0])
    y_lo, y_hi = float(finite_vals.min()), float(finite_vals.max())
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    t_lo, t_hi = float(t.min()), float(t.max())
    if t_hi == t_lo:
        t_hi = t_lo + 1.0

    def sx(x: float) -> float:
        return ml + (x - t_lo) / (t_hi - t_lo) * (width - ml - mr)

    def sy(y: float) -> float:
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
            f'font-size="14">{escape(title)}</text>'
        )
    # axes
    parts.append(
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" '
        f'stroke="black"/>'
    )
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>')
    for tick in _ticks(t_lo, t_hi):
        x = sx(tick)
        parts.append(
            f'<line x1="{x:.1f}" y1="{height - mb}" x2="{x:.1f}" y2="{height - mb + 5}" '
            f'stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{height - mb + 18}" text-anchor="middle">{tick:.3g}</text>'
        )
    for tick in _ticks(y_lo, y_hi):
        y = sy(tick)
        parts.append(f'<line x1="{ml - 5}" y1="{y:.1f}" x2="{ml}" y2="{y:.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end">{tick:.3g}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle">t [1/omega]</text>'
    )
    if y_label:
        parts.append(
            f'<text x="16" y="{(mt + height - mb) / 2:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 16 {(mt + height - mb) / 2:.1f})">{escape(y_label)}</text>'
        )
    for idx, (label, values) in enumerate(curves):
        color = _PALETTE[idx % len(_PALETTE)]
        y = np.asarray(values, dtype=float)
        # break polylines at NaN gaps
        segment: list[str] = []
        for xi, yi in zip(t, y):
            if math.isfinite(yi):
                segment.append(f"{sx(xi):.2f},{sy(yi):.2f}")
            elif segment:
                if len(segment) > 1:
                    parts.append(
                        f'<polyline points="{" ".join(segment)}" fill="none" '
                        f'stroke="{color}" stroke-width="1.5"/>'
                    )
                segment = []
        if len(segment) > 1:
            parts.append(
                f'<polyline points="{" ".join(segment)}" fill="none" '
                f'stroke="{color}" stroke-width="1.5"/>'
            )
        parts.append(
            f'<text x="{width - mr - 8}" y="{mt + 16 * (idx + 1)}" text-anchor="end" '
            f'fill="{color}">{escape(label)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
