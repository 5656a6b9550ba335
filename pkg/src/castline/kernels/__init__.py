"""Numeric hot kernels with two interchangeable backends.

The numba backend JIT-compiles the inner loops; the numpy backend is a pure
vectorized twin using the same arithmetic (same operations in the same
order), so both produce identical bits. Selection:

    CASTLINE_KERNELS=numba   force numba (raises if unavailable)
    CASTLINE_KERNELS=numpy   force the pure-numpy fallback
    unset / auto             numba when importable, else numpy

``python benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

from castline.kernels import numpy_impl

_requested = os.environ.get("CASTLINE_KERNELS", "auto").strip().lower() or "auto"
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"CASTLINE_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

_impl = numpy_impl
BACKEND = "numpy"

if _requested in ("auto", "numba"):
    try:
        from castline.kernels import numba_impl

        _impl = numba_impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise

cum_trapezoid_mm = _impl.cum_trapezoid_mm
interp_grid = _impl.interp_grid
bucket_reduce = _impl.bucket_reduce

__all__ = ["BACKEND", "cum_trapezoid_mm", "interp_grid", "bucket_reduce"]
