"""Stack assembly and training orchestration.

A stack is a bootstrap unit followed by refinement units. Each refinement
sees the two images, the previous full-resolution flow, and (when the link
has warping) the second image warped by that flow plus the brightness
error: 3+3+2+3+1 = 12 channels, or 3+3+2 = 8 without warping. Unit
predictions at quarter resolution are transported between units with
nearest-neighbor upsampling, values unchanged.

Training follows a staged curriculum: per-stage learning-rate schedule,
optional exact per-batch dataset mixture, per-unit freeze flags, delayed
unfreezing, and a gate on the warp operator's flow gradient. Runs are
deterministic given the seed.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from . import arch, graph
from .datagen import split_indices
from .errors import BadSpec, ConfigError, ShapeMismatch


@dataclass(frozen=True)
class StackSpec:
    """Bootstrap + refinement units with per-link warping flags and
    optional shared-weight group labels."""
    units: tuple                 # UnitSpec per unit
    warping: tuple = ()          # bool per refinement link (len = units - 1)
    shared: tuple = None         # group label or None per unit

    def __post_init__(self):
        if not self.units:
            raise BadSpec("stack needs at least one unit")
        if len(self.warping) != len(self.units) - 1:
            raise BadSpec(
                f"{len(self.units)} units need {len(self.units) - 1} warping "
                f"flags, got {len(self.warping)}")
        if self.shared is None:
            object.__setattr__(self, "shared", (None,) * len(self.units))
        if len(self.shared) != len(self.units):
            raise BadSpec("shared labels must align with units")
        if self.units[0].input_channels != 6:
            raise BadSpec(
                f"bootstrap unit takes 6 input channels, got {self.units[0].input_channels}")
        for k, unit in enumerate(self.units[1:]):
            need = 12 if self.warping[k] else 8
            if unit.input_channels != need:
                raise BadSpec(
                    f"refinement unit {k + 1} needs {need} input channels "
                    f"for warping={self.warping[k]}, got {unit.input_channels}")


@dataclass(frozen=True)
class FusedSpec:
    """Two stack branches merged by a fusion unit."""
    branch_a: StackSpec
    branch_b: StackSpec
    fusion: arch.UnitSpec


@dataclass(frozen=True)
class TrainPolicy:
    trainable: tuple
    intermediate_losses: tuple
    warp_grad: bool = True
    freeze_until: int = None  # None -> 2/3 of each stage

    def __post_init__(self):
        if not any(self.trainable):
            raise ConfigError("at least one unit must be trainable")
        if len(self.trainable) != len(self.intermediate_losses):
            raise ConfigError("policy flag tuples must align")

    @staticmethod
    def train_all(n, warp_grad=True):
        return TrainPolicy((True,) * n, (True,) * (n - 1) + (False,), warp_grad)

    @staticmethod
    def train_last_only(n, warp_grad=True):
        return TrainPolicy((False,) * (n - 1) + (True,),
                           (False,) * n, warp_grad)


class StackNet:
    """Instantiated stack: unit networks (possibly shared) plus a flat
    parameter registry with u{i}. prefixes."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.units = []
        self.owner_index = []      # canonical unit index owning each unit's params
        by_label = {}
        for i, (uspec, label) in enumerate(zip(spec.units, spec.shared)):
            if label is not None and label in by_label:
                owner, net = by_label[label]
                if spec.units[owner] != uspec:
                    raise BadSpec(f"shared units {owner} and {i} have different specs")
                self.units.append(net)
                self.owner_index.append(owner)
                continue
            net = arch.build_unit(uspec).initialize(
                np.random.SeedSequence([int(seed), i]))
            if label is not None:
                by_label[label] = (i, net)
            self.units.append(net)
            self.owner_index.append(i)
        self.params = {}
        for i, net in enumerate(self.units):
            if self.owner_index[i] != i:
                continue
            for name, p in net.params.items():
                self.params[f"u{i}.{name}"] = p

    def unit_param_names(self, k):
        owner = self.owner_index[k]
        return [f"u{owner}.{n}" for n in self.units[owner].params]

    def forward(self, i1, i2, warp_grad=True):
        """Run the whole stack; returns (full-res flow tensors per unit,
        prediction dicts per unit)."""
        if not isinstance(i1, graph.Tensor):
            i1 = graph.tensor(i1)
        if not isinstance(i2, graph.Tensor):
            i2 = graph.tensor(i2)
        flows = []
        all_preds = []
        x = graph.concat([i1, i2])
        for k, net in enumerate(self.units):
            if k > 0:
                x = assemble_refinement_input(
                    i1, i2, flows[-1], self.spec.warping[k - 1], warp_grad=warp_grad)
            preds = net.forward(x)
            flow = _to_full_resolution(preds[net.final_prediction], i1.data.shape[1:3])
            flows.append(flow)
            all_preds.append(preds)
        return flows, all_preds


def _to_full_resolution(flow_t, hw):
    h, w = hw
    fh, fw = flow_t.data.shape[1], flow_t.data.shape[2]
    if (fh, fw) == (h, w):
        return flow_t
    if h % fh or w % fw or h // fh != w // fw:
        raise ShapeMismatch(f"cannot upsample {fh}x{fw} flow to {h}x{w}")
    return graph.upsample_nn_t(flow_t, h // fh)


def assemble_refinement_input(i1, i2, prev_flow, warping_enabled, warp_grad=True):
    """Concatenate the refinement-unit input.

    With warping: (I1, I2, flow, warped I2, brightness error) = 12 channels.
    Without: (I1, I2, flow) = 8 channels.
    """
    for t in (i1, i2, prev_flow):
        if t.data.shape[:3] != i1.data.shape[:3]:
            raise ShapeMismatch("refinement inputs must share N, H, W")
    if not warping_enabled:
        return graph.concat([i1, i2, prev_flow])
    warped = graph.warp_op(i2, prev_flow, propagate_flow_grad=warp_grad)
    err = graph.brightness_error_op(i1, warped, squared=False)
    return graph.concat([i1, i2, prev_flow, warped, err])


def fuse_branches(fusion_net, img1, flow_a, flow_b, i2, warp_grad=True):
    """Build the 11-channel fusion input and run the fusion unit.

    Channels: image1 (3), the two flows (4), their magnitudes (2), and the
    squared brightness errors after warping I2 by each flow (2). The second
    image itself is never concatenated in.
    """
    hw = img1.data.shape[1:3]
    flow_a = _to_full_resolution(flow_a, hw)
    flow_b = _to_full_resolution(flow_b, hw)
    mag_a = graph.channel_norm(flow_a)
    mag_b = graph.channel_norm(flow_b)
    err_a = graph.brightness_error_op(
        img1, graph.warp_op(i2, flow_a, propagate_flow_grad=warp_grad), squared=True)
    err_b = graph.brightness_error_op(
        img1, graph.warp_op(i2, flow_b, propagate_flow_grad=warp_grad), squared=True)
    inputs = graph.concat([img1, flow_a, flow_b, mag_a, mag_b, err_a, err_b])
    preds = fusion_net.forward(inputs)
    return preds[fusion_net.final_prediction], preds


class FusedNet:
    """Two stack branches plus a fusion unit, trained/evaluated as one model."""

    def __init__(self, spec, seed=0):
        self.spec = spec
        child = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
        seeds = [int(s) for s in child.integers(0, 2 ** 31, size=3)]
        self.branch_a = StackNet(spec.branch_a, seed=seeds[0])
        self.branch_b = StackNet(spec.branch_b, seed=seeds[1])
        self.fusion = arch.build_unit(spec.fusion).initialize(
            np.random.SeedSequence([seeds[2], 303]))
        self.params = {}
        for prefix, part in (("a.", self.branch_a), ("b.", self.branch_b)):
            for name, p in part.params.items():
                self.params[prefix + name] = p
        for name, p in self.fusion.params.items():
            self.params[f"fuse.{name}"] = p

    @property
    def n_components(self):
        return len(self.branch_a.units) + len(self.branch_b.units) + 1

    def component_param_names(self, k):
        na = len(self.branch_a.units)
        nb = len(self.branch_b.units)
        if k < na:
            return ["a." + n for n in self.branch_a.unit_param_names(k)]
        if k < na + nb:
            return ["b." + n for n in self.branch_b.unit_param_names(k - na)]
        return [f"fuse.{n}" for n in self.fusion.params]

    def forward(self, i1, i2, warp_grad=True):
        if not isinstance(i1, graph.Tensor):
            i1 = graph.tensor(i1)
        if not isinstance(i2, graph.Tensor):
            i2 = graph.tensor(i2)
        flows_a, preds_a = self.branch_a.forward(i1, i2, warp_grad=warp_grad)
        flows_b, preds_b = self.branch_b.forward(i1, i2, warp_grad=warp_grad)
        final, fpreds = fuse_branches(
            self.fusion, i1, flows_a[-1], flows_b[-1], i2, warp_grad=warp_grad)
        return flows_a + flows_b + [final], preds_a + preds_b + [fpreds]


def _unit_loss(preds, truth, exponent, epsilon):
    spec = graph.LossSpec({name: 1.0 for name in preds}, exponent, epsilon)
    return graph.multiscale_epe_loss(preds, truth, spec)


def draw_mixture_indices(rng, mixture, pools, batch_size, stage_dataset):
    """Pick this batch's sample indices; exact per-dataset counts when mixed."""
    if mixture is None:
        return [(stage_dataset, rng.choice(pools[stage_dataset], size=batch_size))]
    return [(ds, rng.choice(pools[ds], size=count))
            for ds, count in sorted(mixture.items())]


@dataclass
class TrainResult:
    log_rows: list            # (iteration, lr, train_loss, val_epe)
    loss_history: list
    final_val_epe: float
    net: object = None


def evaluate_epe(net, data, batch_size=8, subpixel_only=False, warp_grad=False):
    """Mean endpoint error of the final flow over a dataset.

    subpixel_only restricts to pixels with 0 < |truth| < 1 px.
    """
    total = 0.0
    count = 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, min(start + batch_size, len(data)))
        flows, _ = net.forward(data.i1[sl], data.i2[sl], warp_grad=warp_grad)
        est = flows[-1].data.astype(np.float64)
        tru = data.flow[sl].astype(np.float64)
        err = np.hypot(est[..., 0] - tru[..., 0], est[..., 1] - tru[..., 1])
        if subpixel_only:
            mag = np.hypot(tru[..., 0], tru[..., 1])
            sel = (mag > 0) & (mag < 1.0)
        else:
            sel = np.ones(err.shape, bool)
        total += float(err[sel].sum())
        count += int(sel.sum())
    return total / max(1, count)


def train_stack(net, policy, curriculum, datasets, seed, val_data=None,
                loss_exponent=1.0, loss_epsilon=1e-8, val_interval=None,
                batch_size=None):
    """Train a StackNet or FusedNet under a curriculum.

    datasets maps dataset_id -> Dataset for every id the curriculum uses;
    validation EPE is logged every val_interval iterations on val_data.
    Fully deterministic given the seed.
    """
    n_components = net.n_components if isinstance(net, FusedNet) else len(net.units)
    if len(policy.trainable) != n_components:
        raise ConfigError(
            f"policy covers {len(policy.trainable)} units, stack has {n_components}")
    batch_size = batch_size or curriculum.batch_size
    for ds_id in curriculum.dataset_ids():
        if ds_id not in datasets:
            raise ConfigError(f"curriculum needs dataset {ds_id!r}")
        if len(datasets[ds_id]) == 0:
            raise ConfigError(f"dataset {ds_id!r} is empty")
    pools = {ds_id: np.array(split_indices(len(datasets[ds_id]))[0], np.int64)
             for ds_id in curriculum.dataset_ids()}
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 777]))
    adam = graph.Adam(net.params)
    component_names = (net.component_param_names if isinstance(net, FusedNet)
                       else net.unit_param_names)
    log_rows = []
    loss_history = []
    global_it = 0
    final_val = float("nan")
    for (stage_ds, sched), mixture in zip(curriculum.stages, curriculum.mixtures):
        freeze_until = (policy.freeze_until if policy.freeze_until is not None
                        else int(round(sched.total_iters * 2 / 3)))
        interval = val_interval or max(1, sched.total_iters // 10)
        window = []
        for it in range(sched.total_iters):
            lr = sched.lr_at(it)
            parts = draw_mixture_indices(rng, mixture, pools, batch_size, stage_ds)
            i1 = np.concatenate([datasets[ds].i1[idx] for ds, idx in parts])
            i2 = np.concatenate([datasets[ds].i2[idx] for ds, idx in parts])
            truth = np.concatenate([datasets[ds].flow[idx] for ds, idx in parts])
            flows, all_preds = net.forward(i1, i2, warp_grad=policy.warp_grad)
            losses = []
            for k, preds in enumerate(all_preds):
                last = k == len(all_preds) - 1
                if last or policy.intermediate_losses[k]:
                    losses.append(_unit_loss(preds, truth, loss_exponent, loss_epsilon))
            loss = graph.add_scalars(losses)
            adam.zero_grad()
            loss.backward()
            # earlier trainable units stay fixed until freeze_until so a
            # newly added unit settles first; the deepest trainable unit
            # always updates
            last_trainable = max(k for k in range(n_components) if policy.trainable[k])
            update = []
            for k in range(n_components):
                if not policy.trainable[k]:
                    continue
                if k != last_trainable and it < freeze_until:
                    continue
                update.extend(component_names(k))
            adam.step(lr, names=sorted(set(update)))
            value = float(loss.data)
            loss_history.append(value)
            window.append(value)
            if (it + 1) % interval == 0 or it == sched.total_iters - 1:
                if val_data is not None:
                    final_val = evaluate_epe(net, val_data, batch_size)
                log_rows.append((global_it, lr, float(np.mean(window)), final_val))
                window = []
            global_it += 1
    if val_data is not None and np.isnan(final_val):
        final_val = evaluate_epe(net, val_data, batch_size)
    return TrainResult(log_rows, loss_history, final_val, net)


_UNIT_TOKEN = re.compile(r"^([SDsd])(?:@([0-9.]+))?(?:~(\w+))?$")
_KIND = {"S": "S", "D": "SD"}


def _parse_branch(text):
    tokens = [t for t in text.split("+") if t]
    entries = []
    warps = []
    pending_warp = False
    for tok in tokens:
        if tok.upper() == "W":
            if not entries or pending_warp:
                raise BadSpec(f"misplaced warping marker in {text!r}")
            pending_warp = True
            continue
        if any(ch in "Cc" for ch in tok):
            raise BadSpec(
                "correlation-layer units ('C') are not implemented; "
                "use 'S' or 'SD' units")
        match = _UNIT_TOKEN.match(tok)
        if match is None:
            # allow letter groups like "SS@0.125"
            group = re.match(r"^([SDsd]+)(?:@([0-9.]+))?$", tok)
            if group is None:
                raise BadSpec(f"cannot parse unit token {tok!r}")
            for i, letter in enumerate(group.group(1)):
                if entries:
                    warps.append(pending_warp)
                    pending_warp = False
                entries.append([letter.upper(), group.group(2), None])
            continue
        if entries:
            warps.append(pending_warp)
            pending_warp = False
        entries.append([match.group(1).upper(), match.group(2), match.group(3)])
    if pending_warp:
        raise BadSpec(f"trailing warping marker in {text!r}")
    if not entries:
        raise BadSpec(f"no units in stack spec {text!r}")
    # units without their own @m inherit the last explicit multiplier
    default_m = next((m for _, m, _ in reversed(entries) if m is not None), None)
    units = []
    shared = []
    for i, (letter, m, label) in enumerate(entries):
        mult = float(m) if m is not None else (float(default_m) if default_m else 1.0)
        if i == 0:
            in_ch = 6
        else:
            in_ch = 12 if warps[i - 1] else 8
        units.append(arch.UnitSpec(kind=_KIND[letter], channel_multiplier=mult,
                                   input_channels=in_ch))
        shared.append(label)
    return StackSpec(tuple(units), tuple(warps), tuple(shared))


def parse_stack_spec(text):
    """Parse the stack mini-language.

    Unit letters: S (encoder-decoder unit), D (small-displacement unit),
    with optional @multiplier and ~label (shared weights). '+W+' marks a
    warping link; units without their own @m inherit the last explicit one
    (so "S+W+S@0.125" builds two 1/8-width units). "A|F|B" (or |F@m|) fuses
    the final flows of branches A and B with a fusion unit.
    """
    text = text.strip()
    if "|" in text:
        parts = text.split("|")
        if len(parts) != 3 or not parts[1].upper().startswith("F"):
            raise BadSpec(f"fused spec must look like A|F|B, got {text!r}")
        fm = 1.0
        if "@" in parts[1]:
            fm = float(parts[1].split("@")[1])
        return FusedSpec(_parse_branch(parts[0]), _parse_branch(parts[2]),
                         arch.UnitSpec(kind="Fusion", channel_multiplier=fm,
                                       input_channels=11))
    return _parse_branch(text)


def stack_spec_string(spec):
    """Inverse of parse_stack_spec (canonical form)."""
    if isinstance(spec, FusedSpec):
        fm = spec.fusion.channel_multiplier
        mid = "F" if fm == 1.0 else f"F@{fm:g}"
        return (f"{stack_spec_string(spec.branch_a)}|{mid}|"
                f"{stack_spec_string(spec.branch_b)}")
    letters = {"S": "S", "SD": "D"}
    tokens = []
    for unit, label in zip(spec.units, spec.shared):
        tok = letters[unit.kind]
        if unit.channel_multiplier != 1.0:
            tok += f"@{unit.channel_multiplier:g}"
        if label:
            tok += f"~{label}"
        tokens.append(tok)
    out = tokens[0]
    for i in range(1, len(tokens)):
        out += ("+W+" if spec.warping[i - 1] else "+") + tokens[i]
    return out


def build_net(spec, seed=0):
    return FusedNet(spec, seed) if isinstance(spec, FusedSpec) else StackNet(spec, seed)


def save_stack(net, path):
    spec = net.spec if isinstance(net, StackNet) else net.spec
    header = stack_spec_string(spec)
    blob = graph.save_checkpoint(net.params, header=header)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_stack(path):
    with open(path, "rb") as fh:
        header, arrays = graph.load_checkpoint(fh.read())
    spec = parse_stack_spec(header)
    net = build_net(spec, seed=0)
    if set(arrays) != set(net.params):
        raise ConfigError("checkpoint parameters do not match the stack spec")
    for name, arr in arrays.items():
        if net.params[name].data.shape != arr.shape:
            raise ConfigError(f"shape mismatch for {name}")
        net.params[name].data = arr.copy()
    return net
