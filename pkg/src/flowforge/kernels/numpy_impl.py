"""Pure-numpy implementations of the hot kernels.

Reference backend: vectorized, BLAS-backed, no JIT. Selected with
FLOWFORGE_BACKEND=numpy. Shapes follow the package-wide conventions:
images/features are channel-last float32, convolution weights are
(k, k, c_in, c_out).
"""

import numpy as np


def conv2d_forward(x, w, stride, pad):
    """Cross-correlate x (N,H,W,Ci) with w (k,k,Ci,Co); no bias."""
    n, h, wd, ci = x.shape
    k = w.shape[0]
    co = w.shape[3]
    if pad:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((n, ho, wo, co), np.float32)
    for dy in range(k):
        for dx in range(k):
            xv = xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]
            y += xv @ w[dy, dx]
    return y


def conv2d_input_grad(gy, w, stride, pad, in_h, in_w):
    """Gradient of conv2d_forward w.r.t. its input (also the transposed-conv forward)."""
    n, ho, wo, co = gy.shape
    k = w.shape[0]
    ci = w.shape[2]
    gxp = np.zeros((n, in_h + 2 * pad, in_w + 2 * pad, ci), np.float32)
    for dy in range(k):
        for dx in range(k):
            gxp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :] += gy @ w[dy, dx].T
    if pad:
        return np.ascontiguousarray(gxp[:, pad:pad + in_h, pad:pad + in_w, :])
    return gxp


def conv2d_weight_grad(x, gy, k, stride, pad):
    """Gradient of conv2d_forward w.r.t. the weight tensor."""
    n, h, wd, ci = x.shape
    co = gy.shape[3]
    ho, wo = gy.shape[1], gy.shape[2]
    if pad:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x
    gw = np.empty((k, k, ci, co), np.float32)
    for dy in range(k):
        for dx in range(k):
            xv = xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]
            gw[dy, dx] = np.tensordot(xv, gy, axes=([0, 1, 2], [0, 1, 2]))
    return gw


def _sample_coords(flow, h, wd):
    p = flow[..., 0] + np.arange(wd, dtype=np.float32)[None, :]
    q = flow[..., 1] + np.arange(h, dtype=np.float32)[:, None]
    inside = (p >= 0.0) & (p <= wd - 1.0) & (q >= 0.0) & (q <= h - 1.0)
    ps = np.where(inside, p, np.float32(0.0))
    qs = np.where(inside, q, np.float32(0.0))
    x0f = np.floor(ps)
    y0f = np.floor(qs)
    tx = ps - x0f
    ty = qs - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = np.minimum(x0 + 1, wd - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return inside, x0, x1, y0, y1, tx, ty


def warp_forward(image, flow):
    """Bilinear warp of image (H,W,C) along flow (H,W,2); zero outside."""
    h, wd, _ = image.shape
    inside, x0, x1, y0, y1, tx, ty = _sample_coords(flow, h, wd)
    w00 = (1.0 - tx) * (1.0 - ty)
    w10 = tx * (1.0 - ty)
    w01 = (1.0 - tx) * ty
    w11 = tx * ty
    out = (w00[..., None] * image[y0, x0]
           + w10[..., None] * image[y0, x1]
           + w01[..., None] * image[y1, x0]
           + w11[..., None] * image[y1, x1])
    out = np.where(inside[..., None], out, np.float32(0.0)).astype(np.float32)
    mask = inside.astype(np.float32)[..., None]
    return out, mask


def warp_backward(image, flow, upstream):
    """Analytic gradients of warp_forward w.r.t. image and flow."""
    h, wd, c = image.shape
    inside, x0, x1, y0, y1, tx, ty = _sample_coords(flow, h, wd)
    grad_image = np.zeros_like(image)
    grad_flow = np.zeros_like(flow)
    iy, ix = np.nonzero(inside)
    if iy.size == 0:
        return grad_image, grad_flow
    up = upstream[iy, ix]
    txv = tx[iy, ix][:, None]
    tyv = ty[iy, ix][:, None]
    y0v, y1v = y0[iy, ix], y1[iy, ix]
    x0v, x1v = x0[iy, ix], x1[iy, ix]
    np.add.at(grad_image, (y0v, x0v), (1.0 - txv) * (1.0 - tyv) * up)
    np.add.at(grad_image, (y0v, x1v), txv * (1.0 - tyv) * up)
    np.add.at(grad_image, (y1v, x0v), (1.0 - txv) * tyv * up)
    np.add.at(grad_image, (y1v, x1v), txv * tyv * up)
    i00 = image[y0v, x0v]
    i10 = image[y0v, x1v]
    i01 = image[y1v, x0v]
    i11 = image[y1v, x1v]
    du = (1.0 - tyv) * (i10 - i00) + tyv * (i11 - i01)
    dv = (1.0 - txv) * (i01 - i00) + txv * (i11 - i10)
    grad_flow[iy, ix, 0] = np.sum(up * du, axis=1)
    grad_flow[iy, ix, 1] = np.sum(up * dv, axis=1)
    return grad_image, grad_flow
