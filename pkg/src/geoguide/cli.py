"""``geoguide`` command line: plan, encode-demo, grad-check, train, ablate, report."""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .alignment import AlignmentError, plan_alignment, resize_frames
from .decoder import GATING_MODES
from .encoder import MockGeometryEncoder, cross_frame_dependence
from .harness import (AblationGrid, ConfigError, RunConfig, SchemaError, aggregate, build_stamp,
                      find_traces, prepare_output, run_grid, train_run, write_report)
from .scene import SceneConfig, dump_scene, generate_scene

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

ALIASES = {"Pv": "P_v", "Pg": "P_g", "P-v": "P_v", "P-g": "P_g", "output": "out"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    # prefix matching would let --m stand for --modes
    def __init__(self, *args, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*args, **kw)

    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _key(flag):
    key = flag.lstrip("-")
    key = ALIASES.get(key, key)
    return ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))


def parse_overrides(tokens):
    """``--key value`` pairs -> dict; a bare ``--key`` is an error."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            flag, value = tok.split("=", 1)
        else:
            flag = tok
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"flag {tok} needs a value") from None
        out[_key(flag)] = _literal(value)
    return out


def _literal(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path, overrides):
    base = RunConfig.load(config_path).to_dict() if config_path else RunConfig().to_dict()
    unknown = set(overrides) - set(base)
    if unknown:
        raise UsageError(f"unknown flag --{sorted(unknown)[0]}")
    return RunConfig.from_dict({**base, **overrides}).validate()


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ------------------------------------------------------------ subcommands

def cmd_plan(args, extra):
    if extra:
        raise UsageError(f"unknown flag {extra[0]}")
    _emit(plan_alignment(args.H, args.W, args.Pv, args.Pg).to_dict())
    return EXIT_OK


def cmd_encode_demo(args, extra):
    if extra:
        raise UsageError(f"unknown flag {extra[0]}")
    plan = plan_alignment(args.H, args.W, args.Pv, args.Pg)
    scene = generate_scene(SceneConfig(N=args.N, H=args.H, W=args.W, num_objects=args.objects), args.seed)
    frames = resize_frames(scene.frames, plan.resized)
    depth = resize_frames(scene.depth, plan.resized)
    enc = MockGeometryEncoder(args.K, args.C_geo, args.Pg, args.seed)
    stack = enc.encode(frames, depth)
    summary = {"plan": plan.to_dict(), "K": stack.K, "grid": list(stack.grid), "channels": stack.channels,
               "layer_shape": list(stack.layers[0].shape),
               "cross_frame_dependence": [round(s, 6) for s in cross_frame_dependence(enc, frames)]
               if args.N > 1 else None}
    if args.dump:
        dump_scene(scene, args.dump)
        summary["scene_dump"] = str(args.dump)
    _emit(summary)
    return EXIT_OK


def cmd_grad_check(args, extra):
    from .toy import full_gradient_check

    if extra:
        raise UsageError(f"unknown flag {extra[0]}")
    report = full_gradient_check(seed=args.seed, epsilon=args.epsilon, tolerance=args.tolerance,
                                 gate_granularity=args.gate_granularity)
    for line in report.lines():
        print(line)
    print(f"max relative error: {report.max_rel_error:.3e} (tolerance {args.tolerance:g}, "
          f"{len(report.params)} parameter tensors)")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _progress(quiet):
    def show(rec):
        if rec["eval_acc"] is not None and not quiet:
            print(f"step {rec['step']:5d} loss {rec['loss']:.4f} eval_acc {rec['eval_acc']:.3f} "
                  f"gate {rec['gate_open_mean']:.4f}", file=sys.stderr, flush=True)
    return show


def cmd_train(args, extra):
    overrides = parse_overrides(extra)
    if args.out:
        overrides["out"] = args.out
    cfg = resolve_config(args.config, overrides)
    prepare_output(cfg.out)
    res = train_run(cfg, cfg.out, _progress(args.quiet))
    _emit({"out": cfg.out, "status": res.status, "final_eval_acc": res.final_eval,
           "final_gate_open_mean": res.final_gate_open, "failed_step": res.failed_step})
    return EXIT_OK if res.status == "ok" else EXIT_NUMERIC


def _csv_ints(text):
    return tuple(int(t) for t in str(text).split(",") if t != "")


def cmd_ablate(args, extra):
    overrides = parse_overrides(extra)
    if args.out:
        overrides["out"] = args.out
    cfg = resolve_config(args.config, overrides)
    seeds = _csv_ints(args.seed_list) if args.seed_list else tuple(range(args.seeds))
    modes = tuple(args.modes.split(",")) if args.modes else GATING_MODES
    grid = AblationGrid(cfg, depths=_csv_ints(args.depths) if args.depths else None, modes=modes, seeds=seeds)
    grid.cells(cfg.out)           # validates every cell before anything runs
    results = run_grid(grid, cfg.out, _progress(args.quiet))
    failed = [r.config.out for r in results if r.status != "ok"]
    report = aggregate(find_traces(cfg.out))
    write_report(report, cfg.out)
    _emit({"out": cfg.out, "runs": len(results), "failed": failed, "checks": report["checks"]})
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_report(args, extra):
    if extra:
        raise UsageError(f"unknown flag {extra[0]}")
    paths = []
    for p in args.traces:
        paths.extend(find_traces(p) if Path(p).is_dir() else [p])
    if not paths:
        raise UsageError("no trace.jsonl files found")
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError("traces", f"cannot read {p}")
    result = aggregate(paths, ref_depth=args.ref_depth, tolerance=args.tolerance)
    out = args.out or (args.traces[0] if Path(args.traces[0]).is_dir() else ".")
    csv_path, json_path = write_report(result, out)
    print(Path(csv_path).read_text(), end="")
    for c in result["checks"]:
        print(f"{c['status'].upper():7s} {c['check']}")
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser():
    p = Parser(prog="geoguide", description=__doc__)
    p.add_argument("--version", action="version", version=build_stamp())
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    s = sub.add_parser("plan", help="grid-alignment resize plan as JSON")
    s.add_argument("--H", type=int, required=True)
    s.add_argument("--W", type=int, required=True)
    s.add_argument("--Pv", "--P_v", dest="Pv", type=int, required=True)
    s.add_argument("--Pg", "--P_g", dest="Pg", type=int, required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("encode-demo", help="encode one synthetic scene and summarise the layer stack")
    s.add_argument("--H", type=int, default=64)
    s.add_argument("--W", type=int, default=64)
    s.add_argument("--N", type=int, default=2)
    s.add_argument("--objects", type=int, default=2)
    s.add_argument("--Pv", "--P_v", dest="Pv", type=int, default=8)
    s.add_argument("--Pg", "--P_g", dest="Pg", type=int, default=14)
    s.add_argument("--K", type=int, default=24)
    s.add_argument("--C_geo", "--C-geo", dest="C_geo", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dump", help="also write the raw scene dump to this file")
    s.set_defaults(func=cmd_encode_demo)

    s = sub.add_parser("grad-check", help="finite-difference check of the full toy model")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.add_argument("--gate-granularity", choices=("channel", "token"), default="channel")
    s.set_defaults(func=cmd_grad_check)

    for name, func, helptext in (("train", cmd_train, "train one configuration"),
                                 ("ablate", cmd_ablate, "run the depth x gating x seed grid")):
        s = sub.add_parser(name, help=helptext,
                           description="Any RunConfig key can be given as --key value and "
                                       "overrides the config file.")
        s.add_argument("--config", help="flat JSON RunConfig")
        s.add_argument("--out", help="output directory (must be empty or absent)")
        s.add_argument("--quiet", action="store_true")
        if name == "ablate":
            s.add_argument("--depths", help="comma-separated injection depths (default 0,3,6,9,L_dec)")
            s.add_argument("--modes", help="comma-separated gating modes (default none,sem,sem+glo)")
            s.add_argument("--seeds", type=int, default=3, help="number of seeds, 0..n-1")
            s.add_argument("--seed-list", help="explicit comma-separated seeds")
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="aggregate traces into results.csv / results.json")
    s.add_argument("traces", nargs="+", help="trace.jsonl files or directories to search")
    s.add_argument("--out", help="where to write the report (default: first directory given)")
    s.add_argument("--ref-depth", type=int, default=6)
    s.add_argument("--tolerance", type=float, default=0.02)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("choose a subcommand: plan, encode-demo, grad-check, train, ablate, report")
        return args.func(args, extra)
    except (UsageError, ConfigError, SchemaError, AlignmentError, FileExistsError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
