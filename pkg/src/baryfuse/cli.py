"""Command-line surface: train, fuse, align, evaluate, and map landscapes.

Exit codes: 0 success, 2 configuration/usage error, 3 solver or training
failure, 4 file format or I/O error. Flags override --config file entries,
which override defaults. Every command that takes --seed is deterministic
for a fixed seed on one machine.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

__all__ = ["main", "RunConfig"]


@dataclass
class RunConfig:
    """Resolved invocation: command, paths, and numeric knobs."""

    command: str
    inputs: list
    output: str = ""
    params: dict = field(default_factory=dict)
    seed: int = 0

    def check_inputs_exist(self):
        for p in self.inputs:
            if not os.path.exists(p):
                raise ValueError(f"input path does not exist: {p}")


def _parse_floats(text):
    return [float(v) for v in text.split(",") if v != ""]


def _parse_ints(text):
    return [int(v) for v in text.split(",") if v != ""]


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"cannot read config file {path}: {e}")
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _resolve(flag_value, cfg, key, default):
    if flag_value is not None:
        return flag_value
    if key in cfg:
        return cfg[key]
    return default


def _fusion_config(args, cfg):
    from .fusion import FusionConfig
    from .ot import SinkhornParams

    log_domain = _resolve(args.log_domain, cfg, "log_domain", "auto")
    if isinstance(log_domain, str):
        log_domain = {"auto": None, "on": True, "off": False}[log_domain]
    sp = SinkhornParams(
        epsilon=float(_resolve(args.eps, cfg, "epsilon", 0.005)),
        max_iter=int(_resolve(args.max_iter, cfg, "max_iter", 2000)),
        tol=float(_resolve(args.tol, cfg, "tol", 1e-9)),
        log_domain=log_domain,
    )
    lam = _resolve(args.lam, cfg, "lambda", None)
    widths = _resolve(getattr(args, "target_widths", None), cfg, "target_widths", None)
    init = _resolve(getattr(args, "init", None), cfg, "init", "copy")
    init_index = _resolve(getattr(args, "init_index", None), cfg, "init_index", None)
    policy = (init, init_index) if init == "copy" else ("random", init_index)
    import numpy as np

    return FusionConfig(
        sinkhorn=sp,
        outer_max=int(_resolve(args.outer_max, cfg, "outer_max", 10)),
        outer_tol=float(_resolve(args.outer_tol, cfg, "outer_tol", 1e-6)),
        lam=np.asarray(lam, dtype=np.float64) if lam is not None else None,
        target_widths=list(widths) if widths is not None else None,
        init_policy=policy,
        last_layer_policy=_resolve(
            getattr(args, "last_layer", None), cfg, "last_layer_policy", "identity"
        ),
        seed=int(_resolve(args.seed, cfg, "seed", 0)),
    )


def _write_trace(result, path):
    with open(path, "w") as f:
        f.write("site\touter\tobj_after_couplings\tobj_after_update\n")
        for label, trace in zip(result.sites, result.traces):
            for outer, b1, b2 in trace:
                f.write(f"{label}\t{outer}\t{float(b1)!r}\t{float(b2)!r}\n")


def cmd_fuse(args) -> int:
    from .fusion import ot_fusion_baseline, vanilla_average, wb_fuse_model
    from .mfir import load_model, save_couplings, save_model
    from .recurrent_fusion import GwbConfig, gwb_fuse_model

    cfg = _load_config(args.config)
    run = RunConfig("fuse", list(args.models), args.output, seed=int(_resolve(args.seed, cfg, "seed", 0)))
    run.check_inputs_exist()
    if len(args.models) < 2 and not args.allow_self:
        raise ValueError("fuse needs at least 2 models (or --allow-self)")
    models = [load_model(p) for p in args.models]
    fc = _fusion_config(args, cfg)

    if args.method == "avg":
        fused = vanilla_average(models, fc.lam)
        save_model(fused, args.output)
        print(args.output)
        return 0

    if args.method == "wb":
        result = wb_fuse_model(models, fc)
    elif args.method == "ot":
        result = ot_fusion_baseline(models, fc)
    else:
        aii = None if args.alpha_in_inner is None else args.alpha_in_inner == "true"
        gc = GwbConfig(
            base=fc,
            alpha_h=float(_resolve(args.alpha_h, cfg, "alpha_h", 5.0)),
            inner_max=int(_resolve(args.inner_max, cfg, "inner_max", 10)),
            alpha_in_inner=bool(_resolve(aii, cfg, "alpha_in_inner", True)),
        )
        result = gwb_fuse_model(models, gc)

    save_model(result.fused, args.output)
    root, ext = os.path.splitext(args.output)
    couplings_path = args.couplings or f"{root}.couplings{ext or '.mfir'}"
    trace_path = args.trace or f"{root}.trace.tsv"
    per_model = [[c.matrix for c in row] for row in result.couplings]
    save_couplings(result.sites, per_model, couplings_path)
    _write_trace(result, trace_path)
    print(args.output)
    print(couplings_path)
    print(trace_path)
    return 0


def cmd_align(args) -> int:
    from .fusion import align_model
    from .mfir import load_couplings, load_model, save_model
    from .recurrent_fusion import align_recurrent_model

    run = RunConfig("align", [args.model, args.couplings], args.output)
    run.check_inputs_exist()
    model = load_model(args.model)
    _, per_model = load_couplings(args.couplings)
    if not (0 <= args.index < len(per_model)):
        raise ValueError(
            f"--index {args.index} out of range; sidecar has {len(per_model)} models"
        )
    couplings = per_model[args.index]
    if model.arch_tag in ("rnn", "lstm"):
        aligned = align_recurrent_model(model, couplings)
    else:
        aligned = align_model(model, couplings)
    save_model(aligned, args.output)
    print(args.output)
    return 0


def cmd_eval(args) -> int:
    from .datasets import load_dataset
    from .mfir import load_model
    from .network import accuracy, forward

    run = RunConfig("eval", [args.model, args.data])
    run.check_inputs_exist()
    model = load_model(args.model)
    ds = load_dataset(args.data)
    if args.logits:
        logits = forward(model, ds.inputs)
        with open(args.logits, "w") as f:
            for row in logits:
                f.write(",".join(repr(float(v)) for v in row))
                f.write("\n")
    print(repr(accuracy(model, ds)))
    return 0


def cmd_plane(args) -> int:
    from .datasets import load_dataset
    from .landscape import flatten_model, grid_eval, grid_to_csv, make_plane
    from .mfir import load_model

    run = RunConfig("plane", [args.model1, args.model2, args.model2_aligned, args.data], args.output)
    run.check_inputs_exist()
    models = [load_model(p) for p in (args.model1, args.model2, args.model2_aligned)]
    ds = load_dataset(args.data)
    thetas = [flatten_model(m) for m in models]
    if len({t.size for t in thetas}) != 1:
        raise ValueError("plane anchors must have identical parameter counts")
    plane = make_plane(*thetas)
    bounds = tuple(_parse_floats(args.bounds)) if args.bounds else None
    if bounds is not None and len(bounds) != 4:
        raise ValueError("--bounds needs xmin,xmax,ymin,ymax")
    grid = grid_eval(plane, models[0], ds, rows=args.rows, cols=args.cols, bounds=bounds)
    grid_to_csv(grid, args.output)
    print(args.output)
    return 0


def cmd_barrier(args) -> int:
    from .datasets import load_dataset
    from .landscape import flatten_model, segment_barrier
    from .mfir import load_model

    run = RunConfig("barrier", [args.model1, args.model2, args.data])
    run.check_inputs_exist()
    a = load_model(args.model1)
    b = load_model(args.model2)
    ds = load_dataset(args.data)
    ta, tb = flatten_model(a), flatten_model(b)
    if ta.size != tb.size:
        raise ValueError("barrier endpoints must have identical parameter counts")
    print(repr(segment_barrier(ta, tb, a, ds, steps=args.steps)))
    return 0


def cmd_train(args) -> int:
    from .datasets import load_dataset
    from .mfir import save_model
    from .training import train

    run = RunConfig("train", [args.data], args.output, seed=args.seed)
    run.check_inputs_exist()
    ds = load_dataset(args.data)
    hidden = tuple(_parse_ints(args.hidden)) if args.hidden else None
    model = train(
        args.arch,
        ds,
        seed=args.seed,
        epochs=args.epochs,
        lr=args.lr,
        hidden=hidden,
        batch=args.batch,
        clip=args.clip,
    )
    save_model(model, args.output)
    print(args.output)
    return 0


def cmd_gen_data(args) -> int:
    from .datasets import save_dataset, sequence_parity, two_gaussians, two_moons

    if args.task == "two-gaussians":
        ds = two_gaussians(args.n, args.seed, split_tag=args.split)
    elif args.task == "two-moons":
        ds = two_moons(args.n, args.seed, noise=args.noise, split_tag=args.split)
    else:
        ds = sequence_parity(args.length, split_tag=args.split)
    save_dataset(ds, args.output)
    print(args.output)
    return 0


def cmd_validate(args) -> int:
    from .mfir import load_model

    run = RunConfig("validate", [args.model])
    run.check_inputs_exist()
    model = load_model(args.model)
    print(f"ok: {model.arch_tag}, input_dim {model.input_dim}, {len(model.layers)} layers")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="baryfuse",
        description="Barycentric model fusion and loss-landscape tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse two or more saved models")
    p.add_argument("models", nargs="+", help="input model manifests")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--method", choices=("wb", "gwb", "ot", "avg"), default="wb")
    p.add_argument("--eps", type=float, default=None, help="entropic regularization")
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--log-domain", choices=("auto", "on", "off"), default=None)
    p.add_argument("--outer-max", type=int, default=None)
    p.add_argument("--outer-tol", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=_parse_floats, default=None,
                   help="comma-separated barycenter weights")
    p.add_argument("--alpha-h", type=float, default=None)
    p.add_argument("--inner-max", type=int, default=None)
    p.add_argument("--alpha-in-inner", choices=("true", "false"), default=None)
    p.add_argument("--init", choices=("copy", "random"), default=None)
    p.add_argument("--init-index", type=int, default=None)
    p.add_argument("--target-widths", type=_parse_ints, default=None,
                   help="comma-separated widths, one per fusion site")
    p.add_argument("--last-layer", choices=("identity", "solve"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--couplings", default=None, help="sidecar output path")
    p.add_argument("--trace", default=None, help="trace TSV output path")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--allow-self", action="store_true",
                   help="permit a single input model (self fusion)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("align", help="move a model into the fused frame")
    p.add_argument("model")
    p.add_argument("--couplings", required=True)
    p.add_argument("--index", type=int, default=0, help="input-model index in the sidecar")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="print accuracy on a dataset")
    p.add_argument("model")
    p.add_argument("--data", required=True)
    p.add_argument("--logits", default=None, help="write per-row logits CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plane", help="error grid over the plane of three models")
    p.add_argument("model1")
    p.add_argument("model2")
    p.add_argument("model2_aligned")
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--rows", type=int, default=25)
    p.add_argument("--cols", type=int, default=25)
    p.add_argument("--bounds", default=None, help="xmin,xmax,ymin,ymax")
    p.set_defaults(func=cmd_plane)

    p = sub.add_parser("barrier", help="straight-path error barrier between two models")
    p.add_argument("model1")
    p.add_argument("model2")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=21)
    p.set_defaults(func=cmd_barrier)

    p = sub.add_parser("train", help="train a desk-scale model")
    p.add_argument("--arch", choices=("mlp", "resmlp", "rnn", "lstm"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", default=None, help="comma-separated widths")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--clip", type=float, default=5.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-data", help="write a bundled synthetic dataset")
    p.add_argument("--task", choices=("two-gaussians", "two-moons", "parity"),
                   required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n", type=int, default=200, help="points per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--length", type=int, default=8, help="parity sequence length")
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("validate", help="check a saved model file")
    p.add_argument("model")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .fusion import FusionError
    from .mfir import MfirError
    from .ot import SinkhornUnderflowError
    from .training import TrainingError

    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FusionError, SinkhornUnderflowError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (MfirError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
