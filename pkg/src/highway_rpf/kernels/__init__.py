"""Backend dispatch for the Q-network kernels.

The active backend is chosen once at import time from the environment
variable ``HIGHWAY_RPF_BACKEND`` (``numba``, the default, or ``numpy``).
Both implementations are importable directly for cross-checks and the
benchmark in ``benchmarks/kernel_bench.py``.
"""

from __future__ import annotations

import os
import warnings

from . import numpy_impl

_requested = os.environ.get("HIGHWAY_RPF_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"HIGHWAY_RPF_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numba":
    try:
        from . import numba_impl as _impl
    except ImportError:  # pragma: no cover - depends on install
        warnings.warn("numba unavailable, falling back to the numpy kernel backend")
        _impl = numpy_impl
else:
    _impl = numpy_impl

BACKEND = _impl.BACKEND
forward_batch = _impl.forward_batch
backward_batch = _impl.backward_batch
