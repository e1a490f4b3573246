"""flowforge: a desk-scale optical-flow learning toolkit.

Differentiable bilinear warping with analytic gradients, stacked
flow-refinement networks built on a minimal reverse-mode graph, a
small-displacement pathway with fusion, curriculum training schedules,
and a synthetic dataset generator with exact ground truth.
"""

from .core import (colorize_flow, downsample_avg, flow_magnitude, read_flo,
                   upsample_nn, write_flo)
from .kernels import backend_name
from .metrics import displacement_histogram, epe, fl_all
from .warp import bilinear_sample, brightness_error, warp_backward, warp_forward

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "bilinear_sample",
    "brightness_error",
    "colorize_flow",
    "displacement_histogram",
    "downsample_avg",
    "epe",
    "fl_all",
    "flow_magnitude",
    "read_flo",
    "upsample_nn",
    "warp_backward",
    "warp_forward",
    "write_flo",
    "__version__",
]
