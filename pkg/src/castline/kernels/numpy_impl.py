"""Pure-numpy kernel implementations.

Each function mirrors the numba twin operation for operation so both
backends return identical bits (cumsum/reduceat accumulate sequentially,
matching the scalar loops).
"""

from __future__ import annotations

import numpy as np

# mm travelled per (m/min * ns): 1000 mm/m / 6e10 ns/min
MM_PER_MMIN_NS = 1000.0 / 60e9


def cum_trapezoid_mm(t_ns: np.ndarray, v_m_min: np.ndarray, l0_mm: float) -> np.ndarray:
    """Cumulative cast length in mm by trapezoidal integration of speed.

    ``t_ns`` strictly ascending int64, ``v_m_min`` float64 casting speed.
    Returns float64 mm; rounding to whole mm is the caller's job so error
    accumulates once, not per step.
    """
    n = t_ns.shape[0]
    out = np.empty(n, dtype=np.float64)
    if n == 0:
        return out
    steps = (v_m_min[1:] + v_m_min[:-1]) * 0.5 * (t_ns[1:] - t_ns[:-1]) * MM_PER_MMIN_NS
    out[0] = l0_mm
    out[1:] = l0_mm + np.cumsum(steps)
    return out


def interp_grid(xs: np.ndarray, ys: np.ndarray, ts: np.ndarray,
                grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linear interpolation of values and provenance timestamps onto a grid.

    ``xs`` strictly ascending int64 sample positions, ``ys`` float64 values,
    ``ts`` int64 source timestamps. Grid cells outside [xs[0], xs[-1]] are
    masked out (no extrapolation). Returns (values f8, provenance f8, mask).
    """
    m = grid.shape[0]
    vals = np.zeros(m, dtype=np.float64)
    prov = np.zeros(m, dtype=np.float64)
    mask = np.zeros(m, dtype=np.bool_)
    if xs.shape[0] == 0:
        return vals, prov, mask
    inside = (grid >= xs[0]) & (grid <= xs[-1])
    if not inside.any():
        return vals, prov, mask
    g = grid[inside]
    j = np.searchsorted(xs, g, side="right") - 1
    j = np.minimum(j, xs.shape[0] - 1)
    exact = xs[j] == g
    v = np.empty(g.shape[0], dtype=np.float64)
    p = np.empty(g.shape[0], dtype=np.float64)
    v[exact] = ys[j[exact]]
    p[exact] = ts[j[exact]]
    lo = j[~exact]
    hi = lo + 1
    gg = g[~exact]
    w = (gg - xs[lo]) / (xs[hi] - xs[lo])
    v[~exact] = ys[lo] + (ys[hi] - ys[lo]) * w
    p[~exact] = ts[lo] + (ts[hi] - ts[lo]) * w
    vals[inside] = v
    prov[inside] = p
    mask[inside] = True
    return vals, prov, mask


def bucket_reduce(idx: np.ndarray, vals: np.ndarray, mask: np.ndarray,
                  resolution: int) -> tuple[np.ndarray, ...]:
    """Reduce masked values into epoch-aligned half-open buckets.

    Returns (bucket_starts i8, sums f8, counts i8, mins f8, maxs f8,
    firsts f8, lasts f8); buckets with no non-null value are omitted.
    """
    vi = idx[mask]
    vv = vals[mask]
    if vi.shape[0] == 0:
        empty_f = np.empty(0, dtype=np.float64)
        empty_i = np.empty(0, dtype=np.int64)
        return empty_i, empty_f, empty_i.copy(), empty_f.copy(), empty_f.copy(), empty_f.copy(), empty_f.copy()
    bucket = vi // resolution
    run_start = np.concatenate(([0], np.flatnonzero(np.diff(bucket)) + 1))
    run_end = np.concatenate((run_start[1:], [bucket.shape[0]]))
    starts = bucket[run_start] * resolution
    sums = np.add.reduceat(vv, run_start)
    counts = (run_end - run_start).astype(np.int64)
    mins = np.minimum.reduceat(vv, run_start)
    maxs = np.maximum.reduceat(vv, run_start)
    firsts = vv[run_start]
    lasts = vv[run_end - 1]
    return starts, sums, counts, mins, maxs, firsts, lasts
