"""Command line entry point: ``leafpatch {partition,train,eval,bench,synth}``.

Exit codes: 0 success, 1 runtime error, 2 usage or constraint error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import bench as benchmod
from .data import chronological_split, load_dataset, save_dataset, synth_generate
from .spatial_index import (
    assemble_patches,
    build_leaf_kdtree,
    export_partition,
    index_order_partition,
    leaves_per_patch_for,
    pad_assignments,
)
from .training import Checkpoint, TrainConfig, evaluate, format_config, load_config, parse_config, resolve_dataset, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value training config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--serial", action="store_true", help="single-threaded deterministic mode")
    common.add_argument("--out", default=".", help="output directory")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="leafpatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", parents=[common], help="build the leaf KD-tree layout and export it")
    p.add_argument("--dataset", required=True)
    p.add_argument("--capacity", type=int, default=2)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--leaves-per-patch", type=int)
    group.add_argument("--patches", type=int, help="target patch count R")
    p.add_argument("--padding", choices=("similarity", "distance", "zero"), default="similarity")
    p.add_argument("--no-tree", action="store_true", help="partition in original index order")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--dataset", help="PSTD1 dataset directory (default: synthetic data from the config)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="dataset directory (default: the data the checkpoint was trained on)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")

    b = sub.add_parser("bench", parents=[common], help="patched vs dense attention timing")
    b.add_argument("--sizes", type=int, nargs="+", default=[1024, 2048, 4096])
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--capacity", type=int, default=2)
    b.add_argument("--leaves-per-patch", type=int, default=64)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--precision", choices=("float32", "float64"), default="float32")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic PSTD1 dataset")
    s.add_argument("--n-points", type=int, default=64)
    s.add_argument("--days", type=int, default=30)
    s.add_argument("--slice-minutes", type=int, default=60)
    s.add_argument("--neighbors", type=int, default=4)
    s.add_argument("--diffusion", type=float, default=0.5)
    s.add_argument("--noise", type=float, default=1.0)
    return parser


def cmd_partition(args) -> int:
    ds = load_dataset(args.dataset)
    train_split = chronological_split(ds)[0]
    builder = index_order_partition if args.no_tree else build_leaf_kdtree
    try:
        tree = builder(ds.coords, args.capacity)
        if args.patches is not None:
            lpp = leaves_per_patch_for(ds.n_points, args.capacity, args.patches)
        else:
            lpp = args.leaves_per_patch or 1
        pads = pad_assignments(tree, train_split.values, leaves_per_patch=lpp, mode=args.padding)
        layout = assemble_patches(tree, pads, lpp)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report = export_partition(tree, layout, out_dir=args.out)
    print(f"R={layout.R} P={layout.P} M={layout.M} pads={layout.n_padded} leaves={tree.n_leaves} depth={tree.depth}")
    print(f"wrote {report.geojson_path} and {report.csv_path}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if args.serial:
        overrides["serial"] = True
    text = "\n".join(getattr(args, "set", []))
    try:
        base = load_config(args.config) if args.config else TrainConfig()
        return parse_config(text, base=base, **overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ckpt, log = train(cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt.save(os.path.join(args.out, "checkpoint.pstg"))
    log.to_csv(os.path.join(args.out, "trainlog.csv"))
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    best = ckpt.meta.get("epoch", 0)
    print(f"trained {len(log)} epochs; best checkpoint from epoch {best} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        ds = resolve_dataset(TrainConfig(**ckpt.meta["train"]))
    report = evaluate(ckpt, ds, args.split)
    print(report.format_table())
    os.makedirs(args.out, exist_ok=True)
    report.to_csv(os.path.join(args.out, f"metrics_{args.split}.csv"))
    return EXIT_OK


def cmd_bench(args) -> int:
    dtype = np.float32 if args.precision == "float32" else np.float64
    try:
        rows = benchmod.run_bench(args.sizes, args.d, args.capacity, args.leaves_per_patch,
                                  args.heads, args.repeats, dtype, args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "bench.csv")
    benchmod.write_rows(rows, path)
    for r in rows:
        print(f"{r.variant:8s} N={r.N:6d} R={r.R:5d} P={r.P:5d} fwd={r.forward_ms:9.2f}ms "
              f"bwd={r.backward_ms:9.2f}ms flops={r.flops_counted} {r.status}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth_generate(
        seed=args.seed or 0,
        n_points=args.n_points,
        days=args.days,
        slice_minutes=args.slice_minutes,
        k_neighbors=args.neighbors,
        diffusion=args.diffusion,
        noise=args.noise,
    )
    save_dataset(ds, args.out)
    print(f"wrote {ds.n_slices} x {ds.n_points} dataset to {args.out}")
    return EXIT_OK


COMMANDS = {
    "partition": cmd_partition,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
