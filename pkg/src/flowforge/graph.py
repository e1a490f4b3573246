"""Minimal reverse-mode computation graph.

Supports exactly the operator set the flow networks need: convolution,
transposed convolution, leaky rectifier, channel concatenation,
nearest-neighbor upsampling, bottom/right cropping, bilinear warping,
brightness error, and the multiscale endpoint-error loss. Values are
float32 (N, H, W, C); reductions accumulate in float64.

Convolution weights are (k, k, c_in, c_out). Transposed-convolution
weights are (k, k, c_out, c_in): the forward pass is the exact adjoint of
a strided convolution with the same weight array.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BadDims, MissingScale, ShapeMismatch, Truncated, BadMagic


class Tensor:
    """Value node in the computation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this node, topologically ordered."""
        if seed is None:
            seed = np.ones_like(self.data)
        self.accumulate(np.asarray(seed, dtype=np.float32))
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


class Parameter(Tensor):
    """Named trainable tensor; names must be unique within a network."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name


def tensor(data):
    return Tensor(data)


def _expect(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


def conv2d(x, weight, bias, stride=1, pad=None):
    """Strided 2D cross-correlation with "same"-style padding (default k//2)."""
    k = weight.data.shape[0]
    if pad is None:
        pad = k // 2
    _expect(x.data.ndim == 4, f"conv input must be 4D, got {x.shape}")
    _expect(weight.data.shape[2] == x.data.shape[3],
            f"conv expects {weight.data.shape[2]} input channels, got {x.data.shape[3]}")
    n, h, w, _ = x.data.shape
    y = kernels.conv2d_forward(x.data, weight.data, stride, pad)
    y += bias.data
    out = Tensor(y, parents=(x, weight, bias))

    def _bw(gy):
        if x.requires_grad:
            x.accumulate(kernels.conv2d_input_grad(gy, weight.data, stride, pad, h, w))
        if weight.requires_grad:
            weight.accumulate(kernels.conv2d_weight_grad(x.data, gy, k, stride, pad))
        if bias.requires_grad:
            bias.accumulate(gy.sum(axis=(0, 1, 2), dtype=np.float64).astype(np.float32))

    out._backward_fn = _bw
    return out


def upconv2d(x, weight, bias, stride=2):
    """Transposed convolution: output spatial dims = input * stride.

    weight is (k, k, c_out, c_in); the op is the adjoint of conv2d with the
    same weight array, stride, and pad (k - stride) / 2.
    """
    k = weight.data.shape[0]
    if (k - stride) % 2:
        raise BadDims(f"kernel {k} and stride {stride} need even k - stride")
    pad = (k - stride) // 2
    _expect(x.data.ndim == 4, f"upconv input must be 4D, got {x.shape}")
    _expect(weight.data.shape[3] == x.data.shape[3],
            f"upconv expects {weight.data.shape[3]} input channels, got {x.data.shape[3]}")
    n, h, w, _ = x.data.shape
    oh, ow = h * stride, w * stride
    y = kernels.conv2d_input_grad(x.data, weight.data, stride, pad, oh, ow)
    y += bias.data
    out = Tensor(y, parents=(x, weight, bias))

    def _bw(gy):
        if x.requires_grad:
            x.accumulate(kernels.conv2d_forward(gy, weight.data, stride, pad))
        if weight.requires_grad:
            weight.accumulate(kernels.conv2d_weight_grad(gy, x.data, k, stride, pad))
        if bias.requires_grad:
            bias.accumulate(gy.sum(axis=(0, 1, 2), dtype=np.float64).astype(np.float32))

    out._backward_fn = _bw
    return out


def leaky_relu(x, slope=0.1):
    if not 0.0 <= slope < 1.0:
        raise BadDims(f"slope must be in [0, 1), got {slope}")
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, np.float32(slope) * x.data), parents=(x,))

    def _bw(gy):
        x.accumulate(np.where(pos, gy, np.float32(slope) * gy))

    out._backward_fn = _bw
    return out


def concat(inputs):
    """Concatenate along channels; gradients are split back in order."""
    inputs = tuple(inputs)
    _expect(len(inputs) >= 1, "concat needs at least one input")
    base = inputs[0].data.shape[:3]
    for t in inputs:
        _expect(t.data.shape[:3] == base,
                f"concat dims differ: {t.data.shape[:3]} vs {base}")
    if len(inputs) == 1:
        x = inputs[0]
        out = Tensor(x.data.copy(), parents=(x,))
        out._backward_fn = lambda gy: x.accumulate(gy)
        return out
    out = Tensor(np.concatenate([t.data for t in inputs], axis=3), parents=inputs)
    splits = np.cumsum([t.data.shape[3] for t in inputs])[:-1]

    def _bw(gy):
        for t, g in zip(inputs, np.split(gy, splits, axis=3)):
            t.accumulate(g)

    out._backward_fn = _bw
    return out


def upsample_nn_t(x, factor):
    """Nearest-neighbor upsampling as a graph op (backward: block sum)."""
    n, h, w, c = x.data.shape
    y = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    out = Tensor(y, parents=(x,))

    def _bw(gy):
        g = gy.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4))
        x.accumulate(g)

    out._backward_fn = _bw
    return out


def crop(x, height, width):
    """Keep the top-left (height, width) window; backward zero-pads."""
    n, h, w, c = x.data.shape
    _expect(height <= h and width <= w, f"cannot crop {h}x{w} to {height}x{width}")
    if height == h and width == w:
        out = Tensor(x.data, parents=(x,))
        out._backward_fn = lambda gy: x.accumulate(gy)
        return out
    out = Tensor(np.ascontiguousarray(x.data[:, :height, :width, :]), parents=(x,))

    def _bw(gy):
        g = np.zeros_like(x.data)
        g[:, :height, :width, :] = gy
        x.accumulate(g)

    out._backward_fn = _bw
    return out


def warp_op(image, flow, propagate_flow_grad=True):
    """Batched bilinear warp; flow gradient can be gated off."""
    _expect(image.data.ndim == 4 and flow.data.ndim == 4,
            "warp expects 4D image and flow")
    _expect(flow.data.shape[3] == 2, f"flow must have 2 channels, got {flow.data.shape[3]}")
    _expect(image.data.shape[:3] == flow.data.shape[:3],
            f"image {image.data.shape[:3]} vs flow {flow.data.shape[:3]}")
    n = image.data.shape[0]
    warped = np.empty_like(image.data)
    for i in range(n):
        warped[i], _ = kernels.warp_forward(image.data[i], flow.data[i])
    out = Tensor(warped, parents=(image, flow))

    def _bw(gy):
        gi = np.zeros_like(image.data) if image.requires_grad else None
        gf = np.zeros_like(flow.data) if (flow.requires_grad and propagate_flow_grad) else None
        if gi is None and gf is None:
            return
        for i in range(n):
            g_img, g_flow = kernels.warp_backward(
                image.data[i], flow.data[i], np.ascontiguousarray(gy[i]))
            if gi is not None:
                gi[i] = g_img
            if gf is not None:
                gf[i] = g_flow
        if gi is not None:
            image.accumulate(gi)
        if gf is not None:
            flow.accumulate(gf)

    out._backward_fn = _bw
    return out


def add_scalars(losses):
    """Sum scalar tensors into one node so a single backward sweep covers all."""
    losses = tuple(losses)
    _expect(len(losses) >= 1, "add_scalars needs at least one term")
    total = sum(float(t.data) for t in losses)
    out = Tensor(np.float64(total), parents=losses, dtype=np.float64)

    def _bw(gy):
        for t in losses:
            t.accumulate(gy)

    out._backward_fn = _bw
    return out


def channel_norm(x, squared=False):
    """Per-pixel Euclidean norm over channels, as a 1-channel tensor."""
    sq = np.sum(x.data * x.data, axis=3, keepdims=True)
    val = sq if squared else np.sqrt(sq)
    out = Tensor(val, parents=(x,))

    def _bw(gy):
        if squared:
            x.accumulate(2.0 * x.data * gy)
        else:
            safe = np.where(val > 0, val, np.float32(1.0))
            x.accumulate(x.data / safe * gy)

    out._backward_fn = _bw
    return out


def brightness_error_op(i1, warped, squared=False):
    """Channel-norm (or squared norm) of warped - i1, as a 1-channel tensor."""
    _expect(i1.data.shape == warped.data.shape,
            f"i1 {i1.data.shape} vs warped {warped.data.shape}")
    d = warped.data - i1.data
    sq = np.sum(d * d, axis=3, keepdims=True)
    val = sq if squared else np.sqrt(sq)
    out = Tensor(val, parents=(i1, warped))

    def _bw(gy):
        if squared:
            g = 2.0 * d * gy
        else:
            safe = np.where(val > 0, val, np.float32(1.0))
            g = d / safe * gy
        if warped.requires_grad:
            warped.accumulate(g)
        if i1.requires_grad:
            i1.accumulate(-g)

    out._backward_fn = _bw
    return out


@dataclass(frozen=True)
class LossSpec:
    """Weights per prediction name plus the error exponent.

    error_exponent 1.0 is plain endpoint error; 0.4 down-weights large
    errors to emphasize small-magnitude flow. epsilon regularizes the
    exponent's derivative at zero error.
    """
    scale_weights: dict
    error_exponent: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if not any(w > 0 for w in self.scale_weights.values()):
            raise BadDims("need at least one positive scale weight")
        if not 0.0 < self.error_exponent <= 1.0:
            raise BadDims(f"error_exponent must be in (0, 1], got {self.error_exponent}")
        if self.error_exponent < 1.0 and self.epsilon <= 0:
            raise BadDims("epsilon must be positive when error_exponent < 1")


def equal_weights(names, value=1.0):
    return LossSpec({n: value for n in names})


def _scale_target(truth, h, w):
    n, th, tw, _ = truth.shape
    if th % h or tw % w:
        raise ShapeMismatch(f"truth {th}x{tw} not divisible to {h}x{w}")
    fh, fw = th // h, tw // w
    view = truth.reshape(n, h, fh, w, fw, 2)
    return view.mean(axis=(2, 4), dtype=np.float64).astype(np.float32)


def multiscale_epe_loss(predictions, truth, spec):
    """Weighted multiscale endpoint-error loss.

    Each weighted prediction is compared against the ground-truth flow
    box-averaged to its resolution; per-pixel errors are raised to
    spec.error_exponent and averaged. Returns a scalar Tensor.
    """
    truth = np.ascontiguousarray(truth, dtype=np.float32)
    if truth.ndim == 3:
        truth = truth[None]
    _expect(truth.ndim == 4 and truth.shape[3] == 2, f"truth must be (N,H,W,2), got {truth.shape}")
    alpha = spec.error_exponent
    terms = []
    total = 0.0
    for name in sorted(spec.scale_weights):
        wgt = spec.scale_weights[name]
        if wgt <= 0:
            continue
        if name not in predictions:
            raise MissingScale(f"no prediction named {name!r}")
        pred = predictions[name]
        _expect(pred.data.shape[3] == 2, f"{name} must have 2 channels")
        _expect(pred.data.shape[0] == truth.shape[0],
                f"{name} batch {pred.data.shape[0]} vs truth {truth.shape[0]}")
        h, w = pred.data.shape[1:3]
        tgt = _scale_target(truth, h, w)
        d = (pred.data - tgt).astype(np.float64)
        e = np.hypot(d[..., 0], d[..., 1])
        npix = e.size
        total += wgt * float(np.sum(e ** alpha)) / npix
        terms.append((pred, d, e, wgt, npix))
    # scalar loss kept in float64 so finite-difference checks are not
    # limited by float32 cancellation
    out = Tensor(np.float64(total), parents=tuple(t[0] for t in terms),
                 dtype=np.float64)

    def _bw(gy):
        g0 = float(gy)
        for pred, d, e, wgt, npix in terms:
            scale = wgt * alpha * (e + spec.epsilon) ** (alpha - 1.0) / npix
            esafe = np.where(e > 0, e, 1.0)
            g = np.empty(pred.data.shape, np.float32)
            g[..., 0] = (g0 * scale * d[..., 0] / esafe).astype(np.float32)
            g[..., 1] = (g0 * scale * d[..., 1] / esafe).astype(np.float32)
            pred.accumulate(g)

    out._backward_fn = _bw
    return out


class Adam:
    """Deterministic Adam with bias correction and per-parameter step counts."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}

    def step(self, lr, names=None):
        """Update the named parameters (all by default) from their .grad."""
        for name in (self.params if names is None else names):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def init_conv_weight(rng, shape, fan_in, slope=0.1):
    """Fan-in scaled uniform init with leaky-rectifier gain."""
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


CHECKPOINT_MAGIC = b"FFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(params, header=""):
    """Serialize named float32 arrays to the flowforge checkpoint format."""
    items = []
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        items.append((name, np.ascontiguousarray(arr, dtype="<f4")))
    hdr = header.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<i", CHECKPOINT_VERSION),
             struct.pack("<i", len(hdr)), hdr, struct.pack("<i", len(items))]
    for name, arr in items:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<i", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<i", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}i", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(data):
    """Inverse of save_checkpoint: returns (header, dict name -> float32 array)."""
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic("not a flowforge checkpoint")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise Truncated("checkpoint ends early")
        out = data[pos:pos + n]
        pos += n
        return out

    version, = struct.unpack("<i", take(4))
    if version != CHECKPOINT_VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    hlen, = struct.unpack("<i", take(4))
    header = take(hlen).decode("utf-8")
    count, = struct.unpack("<i", take(4))
    params = {}
    for _ in range(count):
        nlen, = struct.unpack("<i", take(4))
        name = take(nlen).decode("utf-8")
        rank, = struct.unpack("<i", take(4))
        dims = struct.unpack(f"<{rank}i", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        params[name] = np.ascontiguousarray(arr)
    if pos != len(data):
        raise Truncated(f"{len(data) - pos} trailing bytes in checkpoint")
    return header, params
