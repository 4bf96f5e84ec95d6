"""Command-line entry point: run, aggregate, plot, flops, prune.

Failures print one line ``error: <Type>: <message>`` to stderr and exit 1;
usage errors (including unknown subcommands) exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _parse_shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) <= 0:
        raise ValueError(f"input shape must look like CxHxW, got {text!r}")
    return dims


def cmd_run(args) -> int:
    from .. import config
    from .runner import run_experiment

    path = Path(args.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = config.load(path)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else Path("runs") / f"{path.stem}-s{cfg.seed}"
    record = run_experiment(cfg, out, cache_dir=args.cache)
    if record.status != "completed":
        raise RuntimeError(f"run failed ({record.error}); partial artifacts in {out}")
    s = record.summary
    acc = s.get("acc")
    print(f"completed {out}  ACC={acc:.4f}" + (f"  BWT={s['bwt']:.4f}" if "bwt" in s else "")
          + f"  params={record.cost['inference']['params']}  flops={record.cost['inference']['flops']}"
          + f"  ({record.duration_s:.1f}s)")
    return 0


def cmd_aggregate(args) -> int:
    from . import aggregate as agg

    group_by = tuple(f.strip() for f in args.group_by.split(",")) if args.group_by else None
    stats = agg.aggregate(args.dirs, group_by)
    if args.csv:
        Path(args.csv).write_text(agg.to_csv(stats))
    sys.stdout.write(agg.to_csv(stats) if args.format == "csv" else agg.to_text(stats))
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plot

    png, csv_path = emit_plot(args.kind, args.dirs, args.out)
    print(f"{png}\n{csv_path}")
    return 0


def cmd_flops(args) -> int:
    from ..model.archs import build_model
    from ..model.cost import cost_report
    from ..model.weights import load_model

    shape = _parse_shape(args.input_shape)
    if args.weights == "-":
        model = build_model(args.arch, args.num_classes, shape, args.width)
    else:
        model = load_model(args.weights)
        if model.arch != args.arch:
            raise ValueError(f"weights hold architecture {model.arch!r}, not {args.arch!r}")
    report = cost_report(model, shape)
    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        print(report.format_table())
    return 0


def cmd_prune(args) -> int:
    from ..model.cost import cost_report
    from ..model.weights import load_model, save_weights
    from ..pruning import prune_model

    if not 0.0 < args.ratio < 1.0:
        raise ValueError(f"--ratio must be in (0, 1), got {args.ratio}")
    if not 0.0 < args.cap <= 1.0:
        raise ValueError(f"--cap must be in (0, 1], got {args.cap}")
    model = load_model(args.weights)
    before = cost_report(model)
    pruned, mask = prune_model(model, args.ratio, args.cap, args.include_stem)
    after = cost_report(pruned)
    out = Path(args.out)
    save_weights(pruned, out, {"pruned_from": str(args.weights), "ratio": args.ratio})
    record = {"mask": mask.to_dict(), "cost": after.to_dict(), "unpruned_cost": before.to_dict()}
    mask_path = out.with_name(out.name + ".mask.json")
    mask_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(after.format_table())
    print(f"dropped {mask.channels_dropped}/{mask.requested} requested channels; "
          f"params {before.params} -> {after.params}; wrote {out} and {mask_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .plots import KINDS

    p = argparse.ArgumentParser(prog="cilbench", description="Class-incremental compression benchmark")
    sub = p.add_subparsers(dest="command", metavar="{run,aggregate,plot,flops,prune}")
    sub.required = True

    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("config")
    r.add_argument("--out", help="run directory (default runs/<config>-s<seed>)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--cache", help="directory for cached pretrained weights")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("aggregate", help="mean/std of ACC and BWT over run directories")
    a.add_argument("dirs", nargs="+")
    a.add_argument("--group-by", help="comma-separated fields, e.g. method,framework,dataset,tag")
    a.add_argument("--format", choices=("text", "csv"), default="text")
    a.add_argument("--csv", help="also write the CSV records to this path")
    a.set_defaults(fn=cmd_aggregate)

    pl = sub.add_parser("plot", help="plot files from run directories")
    pl.add_argument("dirs", nargs="+")
    pl.add_argument("--kind", required=True, choices=KINDS)
    pl.add_argument("--out", default="plots")
    pl.set_defaults(fn=cmd_plot)

    f = sub.add_parser("flops", help="parameter and FLOP report")
    f.add_argument("weights", help="weights container, or '-' for a freshly built model")
    f.add_argument("arch")
    f.add_argument("input_shape", help="CxHxW, e.g. 3x32x32")
    f.add_argument("--num-classes", type=int, default=100)
    f.add_argument("--width", type=float, default=1.0)
    f.add_argument("--json", action="store_true")
    f.set_defaults(fn=cmd_flops)

    pr = sub.add_parser("prune", help="prune a weights container by BN scale")
    pr.add_argument("weights")
    pr.add_argument("--ratio", type=float, required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--cap", type=float, default=0.9, help="per-layer cap")
    pr.add_argument("--include-stem", action="store_true")
    pr.set_defaults(fn=cmd_prune)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-parsable error
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
