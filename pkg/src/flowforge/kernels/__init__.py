"""Backend selection for the hot kernels.

FLOWFORGE_BACKEND=numba|numpy picks the implementation; default is numba
when importable, numpy otherwise. Both backends expose the same functions
and agree to float32 round-off.
"""

import os

_requested = os.environ.get("FLOWFORGE_BACKEND", "auto").lower()

if _requested in ("auto", ""):
    try:
        from . import numba_impl as _impl
        backend_name = "numba"
    except ImportError:
        from . import numpy_impl as _impl
        backend_name = "numpy"
elif _requested == "numba":
    from . import numba_impl as _impl
    backend_name = "numba"
elif _requested == "numpy":
    from . import numpy_impl as _impl
    backend_name = "numpy"
else:
    raise ImportError(
        f"FLOWFORGE_BACKEND={_requested!r} not recognized; use 'numba' or 'numpy'")

conv2d_forward = _impl.conv2d_forward
conv2d_input_grad = _impl.conv2d_input_grad
conv2d_weight_grad = _impl.conv2d_weight_grad
warp_forward = _impl.warp_forward
warp_backward = _impl.warp_backward

__all__ = [
    "backend_name",
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "warp_forward",
    "warp_backward",
]
