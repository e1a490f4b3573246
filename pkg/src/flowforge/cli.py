"""Command-line interface.

Subcommands: datagen, train, eval, viz, gradcheck. Every command is
deterministic given its flags; a plain-text key=value config file can seed
any flag (explicit flags win). Exit codes: 0 success, 2 configuration
problems (bad flags, missing paths, invalid specs), 1 runtime failures.
"""

import argparse
import os
import sys

import numpy as np

from . import datagen, gradcheck, metrics, schedule, stack
from .core import colorize_flow, read_flo, write_ppm
from .errors import (BadParams, BadPlan, BadScale, BadSpec, ConfigError,
                     FlowForgeError)

_CONFIG_ERRORS = (ConfigError, BadSpec, BadPlan, BadScale, BadParams)


def _apply_config_file(args, parser):
    """Fill flags from a key=value file; explicitly passed flags win."""
    if not getattr(args, "config", None):
        return
    if not os.path.isfile(args.config):
        raise ConfigError(f"config file {args.config!r} not found")
    actions = {a.dest: a for a in parser._actions}
    with open(args.config) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{args.config}:{ln}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            value = value.strip()
            if key not in actions or key in ("config", "help"):
                raise ConfigError(f"{args.config}:{ln}: unknown key {key!r}")
            if getattr(args, key) != parser.get_default(key):
                continue  # explicit flag wins
            action = actions[key]
            if action.nargs == "append" or isinstance(action, argparse._AppendAction):
                getattr(args, key).append(value)
            elif action.type is not None:
                setattr(args, key, action.type(value))
            elif isinstance(action.const, bool) or isinstance(action.default, bool):
                setattr(args, key, value.lower() in ("1", "true", "yes"))
            else:
                setattr(args, key, value)


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"size must look like 64x48 (WxH), got {text!r}")


def _make_params(preset, seed, size):
    hw = _parse_size(size)
    if preset == "sdhom":
        return datagen.sdhom_params(seed=seed, image_size=hw)
    base = datagen.SceneParams(image_size=hw, seed=seed)
    simple, complex_ = datagen.curriculum_pair(base)
    if preset == "simple":
        return simple
    if preset == "complex":
        return complex_
    raise ConfigError(f"unknown preset {preset!r}; choose simple, complex or sdhom")


def cmd_datagen(args):
    params = _make_params(args.preset, args.seed, args.size)
    manifest = datagen.generate_dataset(params, args.count, args.out)
    print(f"manifest={manifest}")
    if args.count:
        data = datagen.load_dataset(manifest)
        hist = metrics.displacement_histogram(
            list(data.flow), [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0])
        for lo, hi, n in zip(hist.bin_edges, hist.bin_edges[1:], hist.counts):
            bar = "#" * int(60 * n / max(1, hist.counts.max()))
            print(f"mag[{lo:5.2f},{hi:5.2f})={n:<8d} {bar}")
    return 0


def _subset(data, indices):
    idx = np.asarray(indices, np.int64)
    return datagen.Dataset(data.i1[idx], data.i2[idx], data.flow[idx],
                           data.visibility[idx])


def _load_named_datasets(specs):
    datasets = {}
    for item in specs:
        name, _, path = item.rpartition("=")
        name = name or "data"
        if not os.path.exists(path):
            raise ConfigError(f"dataset path {path!r} not found")
        datasets[name] = datagen.load_dataset(path)
    if not datasets:
        raise ConfigError("at least one --data is required")
    return datasets


def cmd_train(args):
    spec = stack.parse_stack_spec(args.stack)
    datasets = _load_named_datasets(args.data)
    if args.plan:
        curriculum = schedule.curriculum(args.plan, args.scale, args.batch)
    else:
        sched = schedule.parse_schedule(args.schedule)
        ds_id = next(iter(datasets))
        curriculum = schedule.CurriculumSpec(((ds_id, sched),), (None,), args.batch)
    for ds_id in curriculum.dataset_ids():
        if ds_id not in datasets:
            raise ConfigError(
                f"plan needs dataset {ds_id!r}; pass --data {ds_id}=DIR")
    net = stack.build_net(spec, seed=args.seed)
    n = net.n_components if isinstance(net, stack.FusedNet) else len(net.units)
    frozen = {int(t) for t in args.freeze.split(",") if t != ""}
    bad = frozen - set(range(n))
    if bad:
        raise ConfigError(f"cannot freeze units {sorted(bad)}; stack has {n}")
    trainable = tuple(k not in frozen for k in range(n))
    policy = stack.TrainPolicy(
        trainable=trainable,
        intermediate_losses=tuple((not args.no_intermediate_losses) and k < n - 1
                                  for k in range(n)),
        warp_grad=not args.no_warp_grad,
        freeze_until=args.freeze_until)
    val_source = curriculum.stages[-1][0]
    if val_source not in datasets:
        val_source = sorted(curriculum.mixtures[-1])[-1]
    val_data = _subset(datasets[val_source],
                       datagen.split_indices(len(datasets[val_source]))[1])
    result = stack.train_stack(
        net, policy, curriculum, datasets, seed=args.seed, val_data=val_data,
        loss_exponent=args.loss_exponent, val_interval=args.val_interval,
        batch_size=args.batch)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "stack.ckpt")
    stack.save_stack(net, ckpt)
    log_path = os.path.join(args.out, "log.csv")
    with open(log_path, "w") as fh:
        fh.write("iter,lr,train_loss,val_epe\n")
        for it, lr, loss, val in result.log_rows:
            fh.write(f"{it},{lr:g},{loss:.6f},{val:.6f}\n")
    print(f"checkpoint={ckpt}")
    print(f"log={log_path}")
    print(f"val_epe={result.final_val_epe:.6f}")
    return 0


def cmd_eval(args):
    if not os.path.isfile(args.checkpoint):
        raise ConfigError(f"checkpoint {args.checkpoint!r} not found")
    if not os.path.exists(args.data):
        raise ConfigError(f"dataset {args.data!r} not found")
    net = stack.load_stack(args.checkpoint)
    data = datagen.load_dataset(args.data)
    val = _subset(data, datagen.split_indices(len(data))[1])
    epe_sum = 0.0
    fl_sum = 0.0
    count = 0
    for start in range(0, len(val), args.batch):
        sl = slice(start, min(start + args.batch, len(val)))
        flows, _ = net.forward(val.i1[sl], val.i2[sl], warp_grad=False)
        for est, tru in zip(flows[-1].data, val.flow[sl]):
            epe_sum += metrics.epe(est, tru)
            fl_sum += metrics.fl_all(est, tru)
            count += 1
    rows = [("epe", epe_sum / max(1, count)), ("fl_all", fl_sum / max(1, count)),
            ("samples", count)]
    for key, value in rows:
        print(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("metric,value\n")
            for key, value in rows:
                fh.write(f"{key},{value}\n")
    return 0


def cmd_viz(args):
    if not os.path.isfile(args.flow):
        raise ConfigError(f"flow file {args.flow!r} not found")
    with open(args.flow, "rb") as fh:
        flow = read_flo(fh.read())
    image = colorize_flow(flow, args.max_mag)
    if args.truth:
        if not os.path.isfile(args.truth):
            raise ConfigError(f"truth file {args.truth!r} not found")
        with open(args.truth, "rb") as fh:
            truth = read_flo(fh.read())
        gap = np.ones((image.shape[0], 2, 3), np.float32)
        image = np.concatenate([image, gap, colorize_flow(truth, args.max_mag)], axis=1)
    with open(args.out, "wb") as fh:
        fh.write(write_ppm(image))
    print(f"out={args.out}")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_all(trials=args.trials, seed=args.seed,
                                break_op=getattr(args, "break"))
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"op={r.name} max_rel_err={r.max_rel_err:.3e} "
              f"threshold={r.threshold:.0e} {status}")
    if failed:
        print(f"failed: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowforge",
        description="Desk-scale optical-flow learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.sub_parsers = {}

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--preset", default="sdhom", help="simple | complex | sdhom")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64x48", help="WxH in pixels")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train a stack on generated data")
    p.add_argument("--data", action="append", default=[],
                   help="dataset dir, or name=dir (repeatable)")
    p.add_argument("--stack", default="S@0.125+W+S@0.125",
                   help="stack spec, e.g. 'S+W+S@0.125' or 'D@0.125'")
    p.add_argument("--schedule", default="s_short:0.005", help="name:scale")
    p.add_argument("--plan", default=None,
                   help="curriculum plan: " + " | ".join(schedule.PLANS))
    p.add_argument("--scale", type=float, default=0.005,
                   help="schedule scale for --plan")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze", default="", help="comma list of unit indices")
    p.add_argument("--freeze-until", type=int, default=None)
    p.add_argument("--no-warp-grad", action="store_true")
    p.add_argument("--no-intermediate-losses", action="store_true")
    p.add_argument("--loss-exponent", type=float, default=1.0)
    p.add_argument("--val-interval", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--csv", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="colorize a .flo file to PPM")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-mag", type=float, default=None)
    p.add_argument("--truth", default=None, help="side-by-side ground truth")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference operator suite")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break", default=None,
                   help="test hook: flip the named op's analytic gradient")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    parser.sub_parsers = dict(sub.choices)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config_file(args, parser.sub_parsers[args.command])
        return args.fn(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FlowForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
