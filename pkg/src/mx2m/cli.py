"""Command-line entry point: ``mx2m <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import yaml

from . import gradsuite
from .metrics import evaluate
from .model import CheckpointError, load_checkpoint
from .synthdata import (DatasetIOError, LayoutParams, ShiftParams, DEFAULT_SHIFT, make_benchmark,
                        read_dataset, write_dataset)
from .trainer import (TrainConfig, dump_config, generate_pseudo_labels, load_config, read_pseudo_labels,
                      run_ablation, train, write_pseudo_labels)


class CliError(Exception):
    pass


def _shift_from_args(args):
    base = DEFAULT_SHIFT
    skew = None if args.class_skew is None else tuple(float(x) for x in args.class_skew.split(","))
    return ShiftParams(
        brightness_delta=base.brightness_delta if args.brightness is None else args.brightness,
        hue_rotation=base.hue_rotation if args.hue is None else args.hue,
        point_noise_sigma=base.point_noise_sigma if args.noise is None else args.noise,
        point_dropout=base.point_dropout if args.dropout is None else args.dropout,
        class_prior_skew=base.class_prior_skew if skew is None else skew,
    )


def cmd_gen_data(args):
    layout = LayoutParams(n_points=args.n_points, n_classes=args.n_classes)
    shift = _shift_from_args(args)
    src, tgt, val = make_benchmark(args.seed, args.n_source, args.n_target, args.n_val, layout, shift)
    os.makedirs(args.out, exist_ok=True)
    written = []
    for name, ds in (("source.bin", src), ("target.bin", tgt), ("target_val.bin", val)):
        if len(ds) == 0:
            continue
        path = os.path.join(args.out, name)
        ds.extra = {"shift": asdict(shift)}
        write_dataset(path, ds)
        written.append(path)
    for p in written:
        print(p)


def _norm(ds, source_path):
    if source_path:
        src = read_dataset(source_path)
        return src.norm_mean, src.norm_std
    return ds.norm_mean, ds.norm_std


def cmd_train(args):
    config = load_config(args.config)
    for item in args.set or []:
        key, _, value = item.partition("=")
        data = config.to_dict()
        if key not in data:
            raise CliError(f"unknown config key {key!r}")
        data[key] = yaml.safe_load(value)
        config = TrainConfig.from_dict(data)
    src = read_dataset(args.source)
    tgt = read_dataset(args.target)
    if src.n_classes != tgt.n_classes:
        raise CliError(f"source has {src.n_classes} classes, target has {tgt.n_classes}")
    pls = read_pseudo_labels(args.pseudo_labels) if args.pseudo_labels else None
    if config.pl_mode and pls is None:
        raise CliError("pl_mode is on: pass --pseudo-labels")
    os.makedirs(args.out, exist_ok=True)
    dump_config(config, os.path.join(args.out, "config.yaml"))
    t0 = time.perf_counter()
    train(config, src, tgt, pseudo_labels=pls, out_dir=args.out)
    print(f"trained {config.iterations} iterations in {time.perf_counter() - t0:.1f}s -> "
          f"{os.path.join(args.out, 'checkpoint_final.bin')}")


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    if model.config.n_classes != ds.n_classes:
        raise CliError(f"checkpoint predicts {model.config.n_classes} classes but "
                       f"{args.dataset} has {ds.n_classes}")
    report = evaluate(model, ds, norm=_norm(ds, args.source))
    record = report.to_dict()
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
    print(report.summary())
    print(json.dumps(record, sort_keys=True))


def cmd_pseudo_label(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    if model.config.n_classes != ds.n_classes:
        raise CliError(f"checkpoint predicts {model.config.n_classes} classes, dataset has {ds.n_classes}")
    labels = generate_pseudo_labels(model, ds, threshold=args.threshold)
    write_pseudo_labels(args.out, labels)
    n = sum(len(l) for l in labels)
    kept = sum(int((l >= 0).sum()) for l in labels)
    print(f"{args.out}: {len(labels)} scenes, {kept}/{n} points labeled")


def cmd_ablate(args):
    with open(args.grid) as fh:
        spec = yaml.safe_load(fh) or {}
    unknown = set(spec) - {"base", "grid", "seeds", "source", "target", "eval", "pseudo_labels"}
    if unknown:
        raise CliError(f"unknown ablation keys: {sorted(unknown)}")
    base = TrainConfig.from_dict(spec.get("base", {}))
    grid = spec.get("grid", {})
    seeds = spec.get("seeds", [base.seed])
    here = os.path.dirname(os.path.abspath(args.grid))
    path = lambda p: p if os.path.isabs(p) else os.path.join(here, p)  # noqa: E731
    try:
        src, tgt = read_dataset(path(spec["source"])), read_dataset(path(spec["target"]))
    except KeyError as exc:
        raise CliError(f"ablation config needs {exc}") from None
    ev = read_dataset(path(spec.get("eval", spec["target"])))
    pls = read_pseudo_labels(path(spec["pseudo_labels"])) if spec.get("pseudo_labels") else None
    rows = run_ablation(base, grid, src, tgt, ev, seeds=seeds, pseudo_labels=pls)
    keys = sorted(grid)
    cols = keys + ["seed", "miou_2d", "miou_3d", "miou_avg"]
    print("  ".join(f"{c:>14s}" for c in cols))
    for row in rows:
        print("  ".join(f"{row[c]:14.2f}" if isinstance(row[c], float) else f"{str(row[c]):>14s}" for c in cols))
    if args.out:
        with open(args.out, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True, default=str) + "\n")


def cmd_grad_check(args):
    errors = gradsuite.run_suite(h=args.h)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:10s} max rel err {err:.2e}  {'ok' if err < gradsuite.TOLERANCE else 'FAIL'}")
    if worst >= gradsuite.TOLERANCE:
        raise CliError(f"gradient check failed: worst relative error {worst:.2e}")


def build_parser():
    p = argparse.ArgumentParser(prog="mx2m", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write source/target synthetic datasets")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-source", type=int, default=64)
    g.add_argument("--n-target", type=int, default=64)
    g.add_argument("--n-val", type=int, default=0, help="held-out target scenes (0: no file)")
    g.add_argument("--n-points", type=int, default=256)
    g.add_argument("--n-classes", type=int, default=4)
    g.add_argument("--brightness", type=float)
    g.add_argument("--hue", type=float, help="hue rotation in degrees")
    g.add_argument("--noise", type=float, help="point jitter sigma")
    g.add_argument("--dropout", type=float, help="point dropout probability")
    g.add_argument("--class-skew", help="comma-separated per-class keep weights")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("config")
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--pseudo-labels")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--source", help="source dataset whose normalization to use")
    e.add_argument("--json", help="also write the report record here")
    e.set_defaults(fn=cmd_eval)

    pl = sub.add_parser("pseudo-label", help="write target pseudo-labels")
    pl.add_argument("checkpoint")
    pl.add_argument("dataset")
    pl.add_argument("--threshold", type=float)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_pseudo_label)

    a = sub.add_parser("ablate", help="run a config grid over seeds")
    a.add_argument("grid", help="YAML with base, grid, seeds, source, target, eval")
    a.add_argument("--out", help="JSON-lines results file")
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference check of encoders and heads")
    c.add_argument("--h", type=float, default=1e-6)
    c.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (CliError, DatasetIOError, CheckpointError, ValueError) as exc:
        print(f"mx2m {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"mx2m {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
