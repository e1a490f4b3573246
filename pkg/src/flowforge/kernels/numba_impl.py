"""Numba-compiled hot kernels.

Same contracts as numpy_impl; explicit loops under @njit. Single-threaded
on purpose: accumulation order is fixed (row-major over output pixels), so
results are bit-reproducible run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d_forward(x, w, stride, pad):
    n, h, wd, ci = x.shape
    k = w.shape[0]
    co = w.shape[3]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    wt = np.ascontiguousarray(w.transpose(0, 1, 3, 2))
    y = np.zeros((n, ho, wo, co), np.float32)
    for b in range(n):
        for oy in range(ho):
            iy0 = oy * stride - pad
            for ox in range(wo):
                ix0 = ox * stride - pad
                for dy in range(k):
                    iy = iy0 + dy
                    if iy < 0 or iy >= h:
                        continue
                    for dx in range(k):
                        ix = ix0 + dx
                        if ix < 0 or ix >= wd:
                            continue
                        for c in range(co):
                            s = np.float32(0.0)
                            for e in range(ci):
                                s += x[b, iy, ix, e] * wt[dy, dx, c, e]
                            y[b, oy, ox, c] += s
    return y


@njit(cache=True, fastmath=True)
def conv2d_input_grad(gy, w, stride, pad, in_h, in_w):
    n, ho, wo, co = gy.shape
    k = w.shape[0]
    ci = w.shape[2]
    gx = np.zeros((n, in_h, in_w, ci), np.float32)
    for b in range(n):
        for iy in range(in_h):
            for ix in range(in_w):
                for dy in range(k):
                    t = iy + pad - dy
                    if t < 0 or t % stride != 0:
                        continue
                    oy = t // stride
                    if oy >= ho:
                        continue
                    for dx in range(k):
                        r = ix + pad - dx
                        if r < 0 or r % stride != 0:
                            continue
                        ox = r // stride
                        if ox >= wo:
                            continue
                        for e in range(ci):
                            s = np.float32(0.0)
                            for c in range(co):
                                s += gy[b, oy, ox, c] * w[dy, dx, e, c]
                            gx[b, iy, ix, e] += s
    return gx


@njit(cache=True, fastmath=True)
def conv2d_weight_grad(x, gy, k, stride, pad):
    n, h, wd, ci = x.shape
    ho, wo, co = gy.shape[1], gy.shape[2], gy.shape[3]
    gw = np.zeros((k, k, ci, co), np.float32)
    for b in range(n):
        for oy in range(ho):
            iy0 = oy * stride - pad
            for ox in range(wo):
                ix0 = ox * stride - pad
                for dy in range(k):
                    iy = iy0 + dy
                    if iy < 0 or iy >= h:
                        continue
                    for dx in range(k):
                        ix = ix0 + dx
                        if ix < 0 or ix >= wd:
                            continue
                        for e in range(ci):
                            xv = x[b, iy, ix, e]
                            for c in range(co):
                                gw[dy, dx, e, c] += xv * gy[b, oy, ox, c]
    return gw


@njit(cache=True)
def warp_forward(image, flow):
    h, wd, c = image.shape
    out = np.zeros((h, wd, c), np.float32)
    mask = np.zeros((h, wd, 1), np.float32)
    for y in range(h):
        for x in range(wd):
            p = flow[y, x, 0] + np.float32(x)
            q = flow[y, x, 1] + np.float32(y)
            if p < 0.0 or p > wd - 1.0 or q < 0.0 or q > h - 1.0:
                continue
            x0 = int(np.floor(p))
            y0 = int(np.floor(q))
            tx = p - np.float32(x0)
            ty = q - np.float32(y0)
            x1 = min(x0 + 1, wd - 1)
            y1 = min(y0 + 1, h - 1)
            w00 = (1.0 - tx) * (1.0 - ty)
            w10 = tx * (1.0 - ty)
            w01 = (1.0 - tx) * ty
            w11 = tx * ty
            for e in range(c):
                out[y, x, e] = (w00 * image[y0, x0, e] + w10 * image[y0, x1, e]
                                + w01 * image[y1, x0, e] + w11 * image[y1, x1, e])
            mask[y, x, 0] = 1.0
    return out, mask


@njit(cache=True)
def warp_backward(image, flow, upstream):
    h, wd, c = image.shape
    grad_image = np.zeros((h, wd, c), np.float32)
    grad_flow = np.zeros((h, wd, 2), np.float32)
    for y in range(h):
        for x in range(wd):
            p = flow[y, x, 0] + np.float32(x)
            q = flow[y, x, 1] + np.float32(y)
            if p < 0.0 or p > wd - 1.0 or q < 0.0 or q > h - 1.0:
                continue
            x0 = int(np.floor(p))
            y0 = int(np.floor(q))
            tx = p - np.float32(x0)
            ty = q - np.float32(y0)
            x1 = min(x0 + 1, wd - 1)
            y1 = min(y0 + 1, h - 1)
            du = np.float32(0.0)
            dv = np.float32(0.0)
            for e in range(c):
                up = upstream[y, x, e]
                grad_image[y0, x0, e] += (1.0 - tx) * (1.0 - ty) * up
                grad_image[y0, x1, e] += tx * (1.0 - ty) * up
                grad_image[y1, x0, e] += (1.0 - tx) * ty * up
                grad_image[y1, x1, e] += tx * ty * up
                i00 = image[y0, x0, e]
                i10 = image[y0, x1, e]
                i01 = image[y1, x0, e]
                i11 = image[y1, x1, e]
                du += up * ((1.0 - ty) * (i10 - i00) + ty * (i11 - i01))
                dv += up * ((1.0 - tx) * (i01 - i00) + tx * (i11 - i10))
            grad_flow[y, x, 0] = du
            grad_flow[y, x, 1] = dv
    return grad_image, grad_flow
