"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``DRAMA_DISABLE_JIT=1`` before import to force the numpy path (also
used automatically when numba is not importable). Both paths share one
contract, so callers never need to know which is active.
"""

import os

from . import _numpy as numpy_impl

BACKEND = "numpy"
numba_impl = None

if os.environ.get("DRAMA_DISABLE_JIT", "0").lower() not in ("1", "true", "yes"):
    try:
        from . import _numba as numba_impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a hard dep in practice
        numba_impl = None

_impl = numba_impl if BACKEND == "numba" else numpy_impl

segment_softmax = _impl.segment_softmax
segment_softmax_backward = _impl.segment_softmax_backward
segment_sum = _impl.segment_sum
cost_to_target = _impl.cost_to_target
scatter_add_rows = _impl.scatter_add_rows

__all__ = [
    "BACKEND",
    "cost_to_target",
    "numba_impl",
    "numpy_impl",
    "scatter_add_rows",
    "segment_softmax",
    "segment_softmax_backward",
    "segment_sum",
]
