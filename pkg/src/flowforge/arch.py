"""Network constructors.

Three unit kinds:

* ``S`` — the classic encoder-decoder flow unit: 7x7/2 then 5x5/2 head,
  3x3 stages to 1024 channels, decoder of upconvolutions with per-scale
  predictions pr6..pr2 fed straight from the skip concatenations.
* ``SD`` — the small-displacement variant: stride-1 3x3 conv0 head, paired
  convN/convN_1 stages, and extra 3x3 convolutions (rconv) between the
  upconvolutions.
* ``Fusion`` — full-resolution merge network: two stride-2 contractions,
  then expansion back to the input resolution with predictions pr2/pr1/pr0.

Channel counts scale by a multiplier (rounded half up, minimum 1);
prediction layers always output 2 channels. The concrete layer tables are
frozen in docs/architecture.md and audited by the test suite.

Within a decoder, lower-resolution sources (predictions and upconvolution
outputs) are aligned to the skip feature by nearest-neighbor upsampling
and bottom/right cropping, so odd intermediate resolutions are handled.
"""

from dataclasses import dataclass

import numpy as np

from . import graph
from .errors import BadSpec

LEAKY_SLOPE = 0.1


@dataclass(frozen=True)
class UnitSpec:
    kind: str                       # "S" | "SD" | "Fusion"
    channel_multiplier: float = 1.0
    input_channels: int = 6
    base_resolution: tuple = (384, 512)  # (H, W) used for table audits


@dataclass(frozen=True)
class LayerDef:
    name: str
    op: str        # "conv" | "upconv"
    kernel: int
    stride: int
    in_ch: int
    out_ch: int
    inputs: tuple  # source names; "input" is the network input
    activated: bool


def scaled_channels(count, multiplier):
    """Round half up, never below 1."""
    return max(1, int(np.floor(count * multiplier + 0.5)))


class Network:
    """An ordered layer graph with named parameters and pr* outputs."""

    def __init__(self, kind, spec, layers, prediction_names):
        self.kind = kind
        self.spec = spec
        self.layers = list(layers)
        self.prediction_names = tuple(prediction_names)
        self.final_prediction = self.prediction_names[-1]
        self.params = {}
        for lay in self.layers:
            if lay.op == "conv":
                wshape = (lay.kernel, lay.kernel, lay.in_ch, lay.out_ch)
            else:
                wshape = (lay.kernel, lay.kernel, lay.out_ch, lay.in_ch)
            self.params[f"{lay.name}.weight"] = graph.Parameter(
                np.zeros(wshape, np.float32), f"{lay.name}.weight")
            self.params[f"{lay.name}.bias"] = graph.Parameter(
                np.zeros(lay.out_ch, np.float32), f"{lay.name}.bias")

    def initialize(self, seed):
        """Seeded fan-in uniform init for weights; biases stay zero."""
        rng = np.random.default_rng(seed)
        for lay in self.layers:
            w = self.params[f"{lay.name}.weight"]
            if lay.op == "conv":
                fan_in = lay.kernel * lay.kernel * lay.in_ch
            else:
                fan_in = max(1, lay.kernel * lay.kernel * lay.in_ch // (lay.stride ** 2))
            w.data = graph.init_conv_weight(rng, w.data.shape, fan_in, LEAKY_SLOPE)
        return self

    def parameter_count(self):
        return sum(int(p.data.size) for p in self.params.values())

    def _gather(self, values, lay):
        # sources sit at most one pyramid level apart: upsample the coarser
        # ones by 2, then crop everything to the skip (smallest) resolution
        srcs = [values[s] for s in lay.inputs]
        mh = max(t.data.shape[1] for t in srcs)
        mw = max(t.data.shape[2] for t in srcs)
        aligned = []
        for t in srcs:
            while t.data.shape[1] * 2 <= mh or t.data.shape[2] * 2 <= mw:
                t = graph.upsample_nn_t(t, 2)
            aligned.append(t)
        th = min(t.data.shape[1] for t in aligned)
        tw = min(t.data.shape[2] for t in aligned)
        aligned = [graph.crop(t, th, tw)
                   if t.data.shape[1] > th or t.data.shape[2] > tw else t
                   for t in aligned]
        return graph.concat(aligned) if len(aligned) > 1 else aligned[0]

    def forward(self, x):
        """Run the unit on a (N, H, W, in_ch) tensor; returns {pr name: tensor}."""
        if x.data.shape[3] != self.spec.input_channels:
            raise BadSpec(
                f"{self.kind} unit expects {self.spec.input_channels} input "
                f"channels, got {x.data.shape[3]}")
        values = {"input": x}
        for lay in self.layers:
            inp = self._gather(values, lay)
            w = self.params[f"{lay.name}.weight"]
            b = self.params[f"{lay.name}.bias"]
            if lay.op == "conv":
                out = graph.conv2d(inp, w, b, stride=lay.stride)
            else:
                out = graph.upconv2d(inp, w, b, stride=lay.stride)
            if lay.activated:
                out = graph.leaky_relu(out, LEAKY_SLOPE)
            values[lay.name] = out
        return {name: values[name] for name in self.prediction_names}

    def layer_table(self, input_hw=None):
        """Static per-layer audit rows: (name, kernel, stride, in_ch, out_ch,
        in_res, out_res, inputs) with resolutions as (W, H) pairs."""
        if input_hw is None:
            input_hw = self.spec.base_resolution
        res = {"input": tuple(input_hw)}
        rows = []
        for lay in self.layers:
            mh = max(res[s][0] for s in lay.inputs)
            mw = max(res[s][1] for s in lay.inputs)
            adj = []
            for s in lay.inputs:
                h, w = res[s]
                while h * 2 <= mh or w * 2 <= mw:
                    h, w = h * 2, w * 2
                adj.append((h, w))
            ih = min(h for h, _ in adj)
            iw = min(w for _, w in adj)
            if lay.op == "conv":
                pad = lay.kernel // 2
                oh = (ih + 2 * pad - lay.kernel) // lay.stride + 1
                ow = (iw + 2 * pad - lay.kernel) // lay.stride + 1
            else:
                oh, ow = ih * lay.stride, iw * lay.stride
            res[lay.name] = (oh, ow)
            rows.append((lay.name, lay.kernel, lay.stride, lay.in_ch, lay.out_ch,
                         (iw, ih), (ow, oh), "+".join(lay.inputs)))
        return rows


def _make_layers(defs, in_channels):
    """Resolve per-layer input channel counts from the source map."""
    out_ch = {"input": in_channels}
    layers = []
    for name, op, kernel, stride, cout, inputs, act in defs:
        cin = sum(out_ch[s] for s in inputs)
        layers.append(LayerDef(name, op, kernel, stride, cin, cout, tuple(inputs), act))
        out_ch[name] = cout
    return layers


def _check_multiplier(spec):
    if not 0.0 < spec.channel_multiplier <= 1.0:
        raise BadSpec(f"channel multiplier must be in (0, 1], got {spec.channel_multiplier}")


def build_s_unit(spec):
    """Encoder-decoder flow unit; input channels 6 (bootstrap), or 12 / 8
    for refinement units with / without warping inputs."""
    _check_multiplier(spec)
    if spec.input_channels not in (6, 8, 12):
        raise BadSpec(f"S unit takes 6, 8 or 12 input channels, got {spec.input_channels}")
    m = spec.channel_multiplier
    c = {k: scaled_channels(v, m)
         for k, v in {"c1": 64, "c2": 128, "c3": 256, "c4": 512, "c5": 512,
                      "c6": 1024, "u5": 512, "u4": 256, "u3": 128, "u2": 64}.items()}
    defs = [
        ("conv1", "conv", 7, 2, c["c1"], ("input",), True),
        ("conv2", "conv", 5, 2, c["c2"], ("conv1",), True),
        ("conv3", "conv", 3, 2, c["c3"], ("conv2",), True),
        ("conv3_1", "conv", 3, 1, c["c3"], ("conv3",), True),
        ("conv4", "conv", 3, 2, c["c4"], ("conv3_1",), True),
        ("conv4_1", "conv", 3, 1, c["c4"], ("conv4",), True),
        ("conv5", "conv", 3, 2, c["c5"], ("conv4_1",), True),
        ("conv5_1", "conv", 3, 1, c["c5"], ("conv5",), True),
        ("conv6", "conv", 3, 2, c["c6"], ("conv5_1",), True),
        ("conv6_1", "conv", 3, 1, c["c6"], ("conv6",), True),
        ("pr6", "conv", 3, 1, 2, ("conv6_1",), False),
        ("upconv5", "upconv", 4, 2, c["u5"], ("conv6_1",), True),
        ("pr5", "conv", 3, 1, 2, ("upconv5", "pr6", "conv5_1"), False),
        ("upconv4", "upconv", 4, 2, c["u4"], ("upconv5", "pr6", "conv5_1"), True),
        ("pr4", "conv", 3, 1, 2, ("upconv4", "pr5", "conv4_1"), False),
        ("upconv3", "upconv", 4, 2, c["u3"], ("upconv4", "pr5", "conv4_1"), True),
        ("pr3", "conv", 3, 1, 2, ("upconv3", "pr4", "conv3_1"), False),
        ("upconv2", "upconv", 4, 2, c["u2"], ("upconv3", "pr4", "conv3_1"), True),
        ("pr2", "conv", 3, 1, 2, ("upconv2", "pr3", "conv2"), False),
    ]
    layers = _make_layers(defs, spec.input_channels)
    return Network("S", spec, layers, ("pr6", "pr5", "pr4", "pr3", "pr2"))


def build_sd_unit(spec):
    """Small-displacement unit: no first-layer stride, 3x3 kernels only,
    convolutions between the upconvolutions."""
    _check_multiplier(spec)
    if spec.input_channels != 6:
        raise BadSpec(f"SD unit takes 6 input channels, got {spec.input_channels}")
    m = spec.channel_multiplier
    s = lambda v: scaled_channels(v, m)
    defs = [
        ("conv0", "conv", 3, 1, s(64), ("input",), True),
        ("conv1", "conv", 3, 2, s(64), ("conv0",), True),
        ("conv1_1", "conv", 3, 1, s(128), ("conv1",), True),
        ("conv2", "conv", 3, 2, s(128), ("conv1_1",), True),
        ("conv2_1", "conv", 3, 1, s(128), ("conv2",), True),
        ("conv3", "conv", 3, 2, s(256), ("conv2_1",), True),
        ("conv3_1", "conv", 3, 1, s(256), ("conv3",), True),
        ("conv4", "conv", 3, 2, s(512), ("conv3_1",), True),
        ("conv4_1", "conv", 3, 1, s(512), ("conv4",), True),
        ("conv5", "conv", 3, 2, s(512), ("conv4_1",), True),
        ("conv5_1", "conv", 3, 1, s(512), ("conv5",), True),
        ("conv6", "conv", 3, 2, s(1024), ("conv5_1",), True),
        ("conv6_1", "conv", 3, 1, s(1024), ("conv6",), True),
        ("pr6", "conv", 3, 1, 2, ("conv6_1",), False),
        ("upconv5", "upconv", 4, 2, s(512), ("conv6_1",), True),
        ("rconv5", "conv", 3, 1, s(512), ("upconv5", "pr6", "conv5_1"), True),
        ("pr5", "conv", 3, 1, 2, ("rconv5",), False),
        ("upconv4", "upconv", 4, 2, s(256), ("rconv5",), True),
        ("rconv4", "conv", 3, 1, s(256), ("upconv4", "pr5", "conv4_1"), True),
        ("pr4", "conv", 3, 1, 2, ("rconv4",), False),
        ("upconv3", "upconv", 4, 2, s(128), ("rconv4",), True),
        ("rconv3", "conv", 3, 1, s(128), ("upconv3", "pr4", "conv3_1"), True),
        ("pr3", "conv", 3, 1, 2, ("rconv3",), False),
        ("upconv2", "upconv", 4, 2, s(64), ("rconv3",), True),
        ("rconv2", "conv", 3, 1, s(64), ("upconv2", "pr3", "conv2_1"), True),
        ("pr2", "conv", 3, 1, 2, ("rconv2",), False),
    ]
    layers = _make_layers(defs, spec.input_channels)
    return Network("SD", spec, layers, ("pr6", "pr5", "pr4", "pr3", "pr2"))


def build_fusion_unit(spec):
    """Full-resolution fusion network over the 11-channel merge input
    (image1 + two flows + two magnitudes + two squared brightness errors)."""
    _check_multiplier(spec)
    if spec.input_channels != 11:
        raise BadSpec(f"Fusion unit takes 11 input channels, got {spec.input_channels}")
    m = spec.channel_multiplier
    s = lambda v: scaled_channels(v, m)
    defs = [
        ("conv0", "conv", 3, 1, s(64), ("input",), True),
        ("conv1", "conv", 3, 2, s(64), ("conv0",), True),
        ("conv1_1", "conv", 3, 1, s(128), ("conv1",), True),
        ("conv2", "conv", 3, 2, s(128), ("conv1_1",), True),
        ("conv2_1", "conv", 3, 1, s(128), ("conv2",), True),
        ("pr2", "conv", 3, 1, 2, ("conv2_1",), False),
        ("upconv1", "upconv", 4, 2, s(32), ("conv2_1",), True),
        ("rconv1", "conv", 3, 1, s(32), ("upconv1", "pr2", "conv1_1"), True),
        ("pr1", "conv", 3, 1, 2, ("rconv1",), False),
        ("upconv0", "upconv", 4, 2, s(16), ("rconv1",), True),
        ("rconv0", "conv", 3, 1, s(16), ("upconv0", "pr1", "conv0"), True),
        ("pr0", "conv", 3, 1, 2, ("rconv0",), False),
    ]
    layers = _make_layers(defs, spec.input_channels)
    return Network("Fusion", spec, layers, ("pr2", "pr1", "pr0"))


def build_unit(spec):
    if spec.kind == "S":
        return build_s_unit(spec)
    if spec.kind == "SD":
        return build_sd_unit(spec)
    if spec.kind == "Fusion":
        return build_fusion_unit(spec)
    if spec.kind == "C":
        raise BadSpec(
            "correlation-layer units ('C') are not implemented; "
            "use 'S' or 'SD' units")
    raise BadSpec(f"unknown unit kind {spec.kind!r}")
