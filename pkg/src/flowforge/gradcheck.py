"""Finite-difference verification of every differentiable operator.

Each check builds seeded random inputs, computes analytic gradients, and
compares them against central finite differences. Errors are reported as
max |analytic - fd| normalized by the larger of the two magnitudes. Warp
checks keep sample points at least 0.05 away from integer coordinates and
from the region boundary so the FD step (1e-2) never crosses a kink.

A check name passed as ``break_op`` flips the sign of that check's
analytic gradient, which must make the suite fail; this validates the
harness itself.
"""

from dataclasses import dataclass

import numpy as np

from . import arch, graph, kernels, stack, warp


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self):
        return self.max_rel_err < self.threshold


def rel_err(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def _safe_flow(rng, h, w):
    """Flow whose targets are in-range with fractional parts in [0.05, 0.95]."""
    ix = rng.integers(0, w - 1, size=(h, w))
    iy = rng.integers(0, h - 1, size=(h, w))
    fx = rng.uniform(0.05, 0.95, size=(h, w))
    fy = rng.uniform(0.05, 0.95, size=(h, w))
    px = ix + fx
    py = iy + fy
    u = px - np.arange(w)[None, :]
    v = py - np.arange(h)[:, None]
    return np.stack([u, v], axis=-1).astype(np.float32)


def check_warp(trials=200, seed=0, flip=False, fd_step=1e-2):
    """grad_flow and grad_image of the warp against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h = int(rng.integers(4, 9))
        w = int(rng.integers(4, 9))
        c = int(rng.integers(1, 4))
        image = rng.uniform(0, 1, (h, w, c)).astype(np.float32)
        flow = _safe_flow(rng, h, w)
        upstream = rng.uniform(-1, 1, (h, w, c)).astype(np.float32)
        g_img, g_flow = warp.warp_backward(image, flow, upstream)
        if flip:
            g_flow = -g_flow
        # flow gradient: each output pixel depends only on its own flow
        # vector, so one perturbed field gives the whole FD gradient
        fd_flow = np.zeros_like(flow)
        for comp in range(2):
            dp = flow.copy()
            dm = flow.copy()
            dp[:, :, comp] += fd_step
            dm[:, :, comp] -= fd_step
            jp, _ = kernels.warp_forward(image, dp)
            jm, _ = kernels.warp_forward(image, dm)
            fd_flow[:, :, comp] = ((jp - jm) / (2 * fd_step) * upstream).sum(axis=2)
        worst = max(worst, rel_err(g_flow, fd_flow))
        # image gradient: entries perturbed one at a time
        fd_img = np.zeros_like(image)
        for yy in range(h):
            for xx in range(w):
                for cc in range(c):
                    ip = image.copy()
                    im = image.copy()
                    ip[yy, xx, cc] += fd_step
                    im[yy, xx, cc] -= fd_step
                    jp, _ = kernels.warp_forward(ip, flow)
                    jm, _ = kernels.warp_forward(im, flow)
                    fd_img[yy, xx, cc] = ((jp - jm) / (2 * fd_step) * upstream).sum()
        worst = max(worst, rel_err(g_img, fd_img))
    return worst


def _fd_scalar(fn, arr, idx, step):
    orig = arr[idx]
    arr[idx] = orig + step
    lp = fn()
    arr[idx] = orig - step
    lm = fn()
    arr[idx] = orig
    return (lp - lm) / (2 * step)


def _weighted_sum(out, weights):
    return float(np.sum(out.astype(np.float64) * weights))


def _check_op_grads(build, tensors, seed_array, rng, n_probe=24, step=1e-2, flip=False):
    """Generic FD check: build() -> output Tensor from `tensors`."""
    out = build()
    out.backward(seed_array)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        if flip:
            analytic = -analytic
        flat = t.data.reshape(-1)
        probes = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        fd = np.zeros(len(probes))
        ana = np.zeros(len(probes))
        for j, pos in enumerate(probes):
            fd[j] = _fd_scalar(
                lambda: _weighted_sum(build().data, seed_array), flat, pos, step)
            ana[j] = analytic.reshape(-1)[pos]
        worst = max(worst, rel_err(ana, fd))
    return worst


def check_conv(trials=8, seed=1, flip=False):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        stride = int(rng.choice([1, 2]))
        k = int(rng.choice([3, 5]))
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = graph.Tensor(rng.uniform(-1, 1, (2, 6, 6, ci)), requires_grad=True)
        w = graph.Parameter(rng.uniform(-0.5, 0.5, (k, k, ci, co)).astype(np.float32), "w")
        b = graph.Parameter(rng.uniform(-0.2, 0.2, co).astype(np.float32), "b")
        out = graph.conv2d(x, w, b, stride=stride)
        seed_arr = rng.uniform(-1, 1, out.data.shape)
        worst = max(worst, _check_op_grads(
            lambda: graph.conv2d(x, w, b, stride=stride), (x, w, b), seed_arr, rng,
            flip=flip))
    return worst


def check_upconv(trials=8, seed=2, flip=False):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ci, co = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = graph.Tensor(rng.uniform(-1, 1, (2, 4, 5, ci)), requires_grad=True)
        w = graph.Parameter(rng.uniform(-0.5, 0.5, (4, 4, co, ci)).astype(np.float32), "w")
        b = graph.Parameter(rng.uniform(-0.2, 0.2, co).astype(np.float32), "b")
        out = graph.upconv2d(x, w, b)
        seed_arr = rng.uniform(-1, 1, out.data.shape)
        worst = max(worst, _check_op_grads(
            lambda: graph.upconv2d(x, w, b), (x, w, b), seed_arr, rng, flip=flip))
    return worst


def check_leaky_relu(trials=8, seed=3, flip=False):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        vals = rng.uniform(-1, 1, (1, 5, 5, 3))
        vals[np.abs(vals) < 0.05] += 0.1   # stay away from the kink
        x = graph.Tensor(vals, requires_grad=True)
        seed_arr = rng.uniform(-1, 1, vals.shape)
        worst = max(worst, _check_op_grads(
            lambda: graph.leaky_relu(x, 0.1), (x,), seed_arr, rng, flip=flip))
    return worst


def check_loss(exponent, trials=6, seed=4, flip=False):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        truth = rng.uniform(-2, 2, (2, 8, 8, 2)).astype(np.float32)
        preds = {
            "pr2": graph.Tensor(rng.uniform(-2, 2, (2, 4, 4, 2)), requires_grad=True),
            "pr3": graph.Tensor(rng.uniform(-2, 2, (2, 2, 2, 2)), requires_grad=True),
        }
        spec = graph.LossSpec({"pr2": 1.0, "pr3": 0.6}, exponent)
        loss = graph.multiscale_epe_loss(preds, truth, spec)
        loss.backward()
        for t in preds.values():
            analytic = t.grad.copy()
            if flip:
                analytic = -analytic
            flat = t.data.reshape(-1)
            probes = rng.choice(flat.size, size=16, replace=False)
            fd = np.zeros(len(probes))
            ana = np.zeros(len(probes))
            for j, pos in enumerate(probes):
                fd[j] = _fd_scalar(
                    lambda: float(graph.multiscale_epe_loss(preds, truth, spec).data),
                    flat, pos, 1e-3)
                ana[j] = analytic.reshape(-1)[pos]
            worst = max(worst, rel_err(ana, fd))
    return worst


def check_adjoint(trials=20, seed=5):
    """<conv(x), y> == <x, upconv(y)> with the same weight array."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = 2 * int(rng.integers(2, 5)), 2 * int(rng.integers(2, 5))
        x = rng.uniform(-1, 1, (2, h, w, ci)).astype(np.float32)
        wgt = rng.uniform(-1, 1, (4, 4, ci, co)).astype(np.float32)
        y = rng.uniform(-1, 1, (2, h // 2, w // 2, co)).astype(np.float32)
        cx = kernels.conv2d_forward(x, wgt, 2, 1)
        uy = kernels.conv2d_input_grad(y, wgt, 2, 1, h, w)
        lhs = float(np.sum(cx.astype(np.float64) * y))
        rhs = float(np.sum(x.astype(np.float64) * uy))
        denom = max(abs(lhs), abs(rhs), 1e-8)
        worst = max(worst, abs(lhs - rhs) / denom)
    return worst


def check_stack_end_to_end(seed=6, n_probe=20, flip=False):
    """FD through a tiny two-unit warping stack, loss to parameters."""
    rng = np.random.default_rng(seed)
    spec = stack.StackSpec(
        (arch.UnitSpec("S", 1 / 32, 6), arch.UnitSpec("S", 1 / 32, 12)),
        (True,))
    net = stack.StackNet(spec, seed=seed)
    i1 = rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)
    i2 = rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)
    truth = rng.uniform(-1.5, 1.5, (1, 16, 16, 2)).astype(np.float32)

    def loss_value():
        flows, all_preds = net.forward(i1, i2, warp_grad=True)
        losses = [graph.multiscale_epe_loss(
            p, truth, graph.LossSpec({n: 1.0 for n in p}, 1.0)) for p in all_preds]
        return graph.add_scalars(losses)

    loss = loss_value()
    loss.backward()
    names = sorted(net.params)
    worst = 0.0
    probes = rng.choice(len(names), size=min(n_probe, len(names)), replace=False)
    for ni in probes:
        p = net.params[names[ni]]
        if p.grad is None:
            continue
        flat = p.data.reshape(-1)
        pos = int(rng.integers(flat.size))
        ana = float(p.grad.reshape(-1)[pos])
        if flip:
            ana = -ana
        fd = _fd_scalar(lambda: float(loss_value().data), flat, pos, 1e-2)
        denom = max(abs(ana), abs(fd), 1e-4)
        worst = max(worst, abs(ana - fd) / denom)
    return worst


def run_all(trials=200, seed=0, break_op=None):
    """Full suite; returns CheckResult rows in a fixed order."""
    flip = lambda name: break_op == name
    results = [
        CheckResult("warp", check_warp(trials=trials, seed=seed, flip=flip("warp")), 1e-3),
        CheckResult("conv", check_conv(seed=seed + 1, flip=flip("conv")), 1e-3),
        CheckResult("upconv", check_upconv(seed=seed + 2, flip=flip("upconv")), 1e-3),
        CheckResult("leaky_relu",
                    check_leaky_relu(seed=seed + 3, flip=flip("leaky_relu")), 1e-3),
        CheckResult("loss_epe",
                    check_loss(1.0, seed=seed + 4, flip=flip("loss_epe")), 1e-3),
        CheckResult("loss_exp04",
                    check_loss(0.4, seed=seed + 5, flip=flip("loss_exp04")), 1e-3),
        CheckResult("adjoint", check_adjoint(seed=seed + 6), 1e-5),
        CheckResult("stack",
                    check_stack_end_to_end(seed=seed + 7, flip=flip("stack")), 1e-3),
    ]
    return results
