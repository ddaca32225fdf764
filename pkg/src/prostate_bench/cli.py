"""``prostate-bench`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The run root comes from ``--run-root``, else ``$PROSTATE_BENCH_RUN_ROOT``,
else ``./bench_run``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .estimator import UNetSegmenter
from .model import ModelCheckpoint
from .overlay import write_overlays
from .protocol import (
    COMBINED,
    SOURCES,
    TABLE_ORDER,
    RunRoot,
    TooFewCasesError,
    build_matrix,
    evaluate_model,
    load_case_data,
    make_split,
    train_model,
)
from .synthetic import DEFAULT_SHAPE, generate_benchmark
from .volume_io import (
    DATASET_IDS,
    NoCasesError,
    VolumeParseError,
    build_manifest,
    load_case,
)

RUN_ROOT_ENV = "PROSTATE_BENCH_RUN_ROOT"
DEFAULT_RUN_ROOT = "bench_run"

log = logging.getLogger("prostate_bench")


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


def _run_root(args) -> RunRoot:
    return RunRoot(args.run_root or os.environ.get(RUN_ROOT_ENV) or DEFAULT_RUN_ROOT)


def _datasets(arg: str) -> list[str]:
    return list(TABLE_ORDER) if arg == "all" else [arg]


# -- verbs -------------------------------------------------------------------

def cmd_synth(args) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 3:
        raise UsageError(f"--shape needs three comma-separated ints, got {args.shape!r}")
    dirs = generate_benchmark(args.root, args.n_cases, args.seed, shape)
    for d, path in dirs.items():
        print(f"{d}: {args.n_cases} cases -> {path}")
    return 0


def cmd_ingest(args) -> int:
    rr = _run_root(args)
    root = Path(args.root)
    if not root.is_dir():
        print(f"error: cannot read dataset root {root}", file=sys.stderr)
        return 1
    manifest = build_manifest(root, args.dataset, mask_root=args.mask_root, layout=args.layout)
    path = manifest.save(rr.manifest(args.dataset))
    print(f"{args.dataset}: {len(manifest)} cases found, {len(manifest.excluded)} excluded -> {path}")
    for item in manifest.excluded:
        print(f"  excluded: {item}")
    return 0


def _ensure_split(rr: RunRoot, dataset: str, seed: int | None, force: bool = False) -> None:
    path = rr.split(dataset)
    if path.is_file() and not force:
        return
    if not rr.manifest(dataset).is_file():
        raise FileNotFoundError(f"no manifest for {dataset}; run 'ingest' first")
    if seed is None:
        raise UsageError(f"no split for {dataset}; run 'split' or pass --seed")
    split = make_split(rr.load_manifest(dataset), seed)
    split.save(path)
    print(f"{dataset}: train {len(split.train_cases)}, val {len(split.val_cases)}, "
          f"test {len(split.test_cases)} -> {path}")


def cmd_split(args) -> int:
    rr = _run_root(args)
    for d in _datasets(args.dataset):
        if args.dataset == "all" and not rr.manifest(d).is_file():
            continue
        _ensure_split(rr, d, args.seed, force=True)
    return 0


def _parse_overrides(pairs) -> list[tuple[str, str]]:
    out = []
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out


def resolve_config(args) -> TrainConfig:
    """Config file, then flag overrides; validated before any work starts."""
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    items = _parse_overrides(args.set)
    for flag, key in (("seed", "seed"), ("epochs1", "epochs_stage1"), ("epochs2", "epochs_stage2"),
                      ("batch_size", "batch_size"), ("resolution", "resolution"), ("lr", "base_lr")):
        value = getattr(args, flag, None)
        if value is not None:
            items.append((key, value))
    return TrainConfig.from_items(items, base=cfg).validate()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    rr = _run_root(args)
    if args.source == COMBINED:
        datasets = [d for d in TABLE_ORDER if rr.manifest(d).is_file()]
        if not datasets:
            raise FileNotFoundError(f"no manifests under {rr.root}; run 'ingest' first")
    else:
        datasets = [args.source]
    for d in datasets:
        _ensure_split(rr, d, args.seed)
    train, val = rr.training_data(args.source, cfg)
    print(f"training {args.source}: {len(train)} train slices, {len(val)} val slices, config {cfg.hash()}")
    ckpt = train_model(train, val, cfg, run_dir=rr.run(args.source), source=args.source)
    best = ckpt.metrics.get("best_val_dsc")
    print(f"run directory: {rr.run(args.source)}")
    print(f"best val DSC: {'n/a' if best is None else f'{best:.4f}'} (epoch {ckpt.epoch})")
    return 0


def _load_estimator(rr: RunRoot, source: str) -> UNetSegmenter:
    path = rr.checkpoint(source)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint for {source} at {path}; run 'train' first")
    return UNetSegmenter.from_checkpoint(ModelCheckpoint.load(path))


def cmd_evaluate(args) -> int:
    rr = _run_root(args)
    est = _load_estimator(rr, args.source)
    cfg = est._cfg()
    datasets = rr.datasets() if args.dataset == "all" else [args.dataset]
    for d in datasets:
        scores = evaluate_model(est, rr.load_cases(d, "test", cfg))
        lines = ["case_id,dsc"] + [f"{cid},{v:.6f}" for cid, v in scores]
        out = rr.run(args.source) / f"eval_{d}.csv"
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        for cid, v in scores:
            print(f"{args.source} -> {d} {cid}: {v:.4f}")
        print(f"{args.source} -> {d} mean DSC: {np.mean([v for _, v in scores]):.4f}")
    return 0


def cmd_matrix(args) -> int:
    rr = _run_root(args)
    matrix = build_matrix(rr.root)
    out = matrix.write(rr.matrix_dir)
    print(matrix.to_text(), end="")
    print(f"written to {out}")
    if matrix.holes:
        print(f"warning: {len(matrix.holes)} missing cells", file=sys.stderr)
        return 1 if args.strict else 0
    return 0


def cmd_overlay(args) -> int:
    rr = _run_root(args)
    est = _load_estimator(rr, args.source)
    cfg = est._cfg()
    manifest = rr.load_manifest(args.dataset)
    if args.case not in manifest.case_ids:
        print(f"error: unknown case {args.case!r} in {args.dataset}", file=sys.stderr)
        return 1
    vol, gt = load_case(manifest, args.case, cfg.decathlon_channel)
    cfg = TrainConfig.from_items([("drop_empty_slices", False)], base=cfg)
    case = load_case_data(manifest, args.case, cfg, rr.cache)
    pred = est.predict_mask(case.samples, gt.spacing)
    out_dir = Path(args.out) if args.out else rr.root / "overlays" / args.source
    for p in write_overlays(vol, pred, gt, out_dir, args.slices):
        print(p)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-root", help=f"run directory (default ${RUN_ROOT_ENV} or ./{DEFAULT_RUN_ROOT})")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="prostate-bench", description="Prostate MR segmentation benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic four-family benchmark")
    p.add_argument("--root", required=True)
    p.add_argument("--n-cases", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--shape", default=",".join(map(str, DEFAULT_SHAPE)), help="depth,height,width")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="scan a dataset root and write its manifest")
    p.add_argument("--dataset", required=True, choices=DATASET_IDS)
    p.add_argument("--root", required=True)
    p.add_argument("--mask-root")
    p.add_argument("--layout", choices=DATASET_IDS, help="directory layout when it differs from --dataset")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="seeded case-level train/val/test split")
    p.add_argument("--dataset", default="all", choices=DATASET_IDS + ("all",))
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="two-stage training of one source")
    p.add_argument("--source", required=True, choices=SOURCES)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs1", type=int)
    p.add_argument("--epochs2", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="per-case test DSC of one checkpoint")
    p.add_argument("--source", required=True, choices=SOURCES)
    p.add_argument("--dataset", default="all", choices=DATASET_IDS + ("all",))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", parents=[common], help="cross-dataset DSC matrix")
    p.add_argument("--strict", action="store_true", help="exit 1 when any cell is missing")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("overlay", parents=[common], help="contour overlays for one case")
    p.add_argument("--source", required=True, choices=SOURCES)
    p.add_argument("--dataset", required=True, choices=DATASET_IDS)
    p.add_argument("--case", required=True)
    p.add_argument("--slices", type=int, nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NoCasesError, TooFewCasesError, VolumeParseError, FileNotFoundError, KeyError,
            ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
