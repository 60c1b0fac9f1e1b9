"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``SIFDAL_PURE_NUMPY`` is set to a non-empty value other than ``0``.
The choice is made once, at import time; ``BACKEND`` records it.
"""

import os

from . import _numpy_impl

_want_numpy = os.environ.get("SIFDAL_PURE_NUMPY", "") not in ("", "0")

if _want_numpy:
    _impl = _numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import _numba_impl as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = _numpy_impl
        BACKEND = "numpy"

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward_input = _impl.conv3x3_backward_input
conv3x3_backward_weight = _impl.conv3x3_backward_weight
iou_matrix = _impl.iou_matrix
greedy_nms = _impl.greedy_nms

__all__ = [
    "BACKEND",
    "conv3x3_forward",
    "conv3x3_backward_input",
    "conv3x3_backward_weight",
    "iou_matrix",
    "greedy_nms",
]
