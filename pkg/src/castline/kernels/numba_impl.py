"""Numba-compiled kernel implementations (see numpy_impl for the contracts).

Loops accumulate in the same order as the numpy twins so results match bit
for bit. fastmath stays off for that reason.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MM_PER_MMIN_NS = 1000.0 / 60e9


@njit(cache=True, nogil=True)
def cum_trapezoid_mm(t_ns, v_m_min, l0_mm):
    n = t_ns.shape[0]
    out = np.empty(n, dtype=np.float64)
    if n == 0:
        return out
    out[0] = l0_mm
    s = 0.0
    for i in range(1, n):
        s += (v_m_min[i] + v_m_min[i - 1]) * 0.5 * (t_ns[i] - t_ns[i - 1]) * MM_PER_MMIN_NS
        out[i] = l0_mm + s
    return out


@njit(cache=True, nogil=True)
def interp_grid(xs, ys, ts, grid):
    m = grid.shape[0]
    vals = np.zeros(m, dtype=np.float64)
    prov = np.zeros(m, dtype=np.float64)
    mask = np.zeros(m, dtype=np.bool_)
    n = xs.shape[0]
    if n == 0:
        return vals, prov, mask
    j = 0
    for k in range(m):
        g = grid[k]
        if g < xs[0] or g > xs[-1]:
            continue
        while j + 1 < n and xs[j + 1] <= g:
            j += 1
        if xs[j] == g:
            vals[k] = ys[j]
            prov[k] = ts[j]
        else:
            w = (g - xs[j]) / (xs[j + 1] - xs[j])
            vals[k] = ys[j] + (ys[j + 1] - ys[j]) * w
            prov[k] = ts[j] + (ts[j + 1] - ts[j]) * w
        mask[k] = True
    return vals, prov, mask


@njit(cache=True, nogil=True)
def bucket_reduce(idx, vals, mask, resolution):
    n = idx.shape[0]
    total = 0
    prev = np.int64(0)
    for i in range(n):
        if not mask[i]:
            continue
        b = idx[i] // resolution
        if total == 0 or b != prev:
            total += 1
            prev = b
    starts = np.empty(total, dtype=np.int64)
    sums = np.zeros(total, dtype=np.float64)
    counts = np.zeros(total, dtype=np.int64)
    mins = np.empty(total, dtype=np.float64)
    maxs = np.empty(total, dtype=np.float64)
    firsts = np.empty(total, dtype=np.float64)
    lasts = np.empty(total, dtype=np.float64)
    k = -1
    for i in range(n):
        if not mask[i]:
            continue
        b = idx[i] // resolution
        v = vals[i]
        if k < 0 or b * resolution != starts[k]:
            k += 1
            starts[k] = b * resolution
            sums[k] = v
            counts[k] = 1
            mins[k] = v
            maxs[k] = v
            firsts[k] = v
            lasts[k] = v
        else:
            sums[k] += v
            counts[k] += 1
            if v < mins[k]:
                mins[k] = v
            if v > maxs[k]:
                maxs[k] = v
            lasts[k] = v
    return starts, sums, counts, mins, maxs, firsts, lasts
