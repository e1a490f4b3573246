"""Differentiable bilinear warping.

The forward pass resamples an image along a flow field with bilinear
interpolation; targets outside the valid region produce zeros. The
backward pass returns the analytic derivative with respect to both the
image and the flow. At integer sample coordinates the one-sided
(from-above) derivative is used: the ceil neighbor is floor+1 with reads
clamped to the last row/column, so the derivative at the max edge is 0.
"""

from typing import NamedTuple

import numpy as np

from . import kernels
from .core import as_flow, as_grid
from .errors import DimMismatch, OutOfRange


class WarpResult(NamedTuple):
    warped: np.ndarray       # (H, W, C), zero where the flow points outside
    inside_mask: np.ndarray  # (H, W, 1), 1 where x + w(x) is a valid coordinate


def bilinear_sample(image, x, y):
    """Interpolate image (H, W, C) at real coordinate (x, y); returns a C-vector.

    The coordinate must lie in the valid region [0, W-1] x [0, H-1].
    """
    img = as_grid(image)
    h, w = img.shape[:2]
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise OutOfRange(f"({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    tx = np.float32(x - x0)
    ty = np.float32(y - y0)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    return ((1 - tx) * (1 - ty) * img[y0, x0] + tx * (1 - ty) * img[y0, x1]
            + (1 - tx) * ty * img[y1, x0] + tx * ty * img[y1, x1])


def _check_pair(image, flow):
    img = as_grid(image)
    f = as_flow(flow)
    if img.shape[:2] != f.shape[:2]:
        raise DimMismatch(f"image {img.shape[:2]} vs flow {f.shape[:2]}")
    return img, f


def warp_forward(image, flow):
    """Warp image along flow: out(x) = image~(x + w(x)), zero outside."""
    img, f = _check_pair(image, flow)
    warped, mask = kernels.warp_forward(img, f)
    return WarpResult(warped, mask)


def warp_backward(image, flow, upstream):
    """Gradients of warp_forward w.r.t. (image, flow) for a given upstream grad.

    Both gradients are exactly zero at pixels whose sample target is
    outside the valid region.
    """
    img, f = _check_pair(image, flow)
    up = as_grid(upstream)
    if up.shape != img.shape:
        raise DimMismatch(f"upstream {up.shape} vs image {img.shape}")
    return kernels.warp_backward(img, f, up)


def brightness_error(i1, warped, squared=False):
    """Per-pixel channel-norm of (warped - i1) as an (H, W, 1) grid.

    squared=True returns the squared Euclidean distance, the variant fed to
    the fusion network; refinement inputs use the plain norm.
    """
    a = as_grid(i1)
    b = as_grid(warped)
    if a.shape != b.shape:
        raise DimMismatch(f"i1 {a.shape} vs warped {b.shape}")
    d = (b.astype(np.float64) - a.astype(np.float64))
    sq = np.sum(d * d, axis=2, keepdims=True)
    out = sq if squared else np.sqrt(sq)
    return out.astype(np.float32)
