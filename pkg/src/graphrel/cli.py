"""Command-line entry point: ``graphrel <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 ingestion error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import harness
from .checkpoint import load_model
from .config import ModelConfig, parse_bool
from .data import featurize, generate_synthetic, parse_tudataset, serialize_edges, stratified_folds
from .exceptions import ConfigurationError, DivergenceError, IngestionError, ParameterError

EXIT_USAGE, EXIT_INGEST, EXIT_DIVERGE = 2, 3, 4

# flag name -> ModelConfig field
OVERRIDES = {
    "backbone": "backbone", "relating_up": "relating_up", "alpha": "alpha", "beta": "beta",
    "temperature": "temperature", "batch_size": "batch_size", "seed": "seed", "lr": "lr",
    "max_epochs": "max_epochs", "patience": "patience", "hidden": "hidden", "layers": "layers",
    "heads": "heads", "relation_layers": "relation_layers", "dropout": "dropout", "readout": "readout",
    "use_distill": "use_distill", "use_hint": "use_hint",
}


class UsageError(Exception):
    pass


def _bool_flag(text):
    try:
        return parse_bool(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _common(parser: argparse.ArgumentParser, dataset_required: bool = True) -> None:
    src = parser.add_argument_group("data")
    src.add_argument("--dataset", help="TUDataset name under --data-root")
    src.add_argument("--data-root", default=os.environ.get("TUDATASET_ROOT", "data"))
    src.add_argument("--synthetic", type=int, metavar="N", help="use N synthetic cycle/path graphs instead")
    src.add_argument("--label-noise", type=float, default=0.0, help="label flip rate for --synthetic")
    src.add_argument("--featurization", help="override the node featurisation policy")
    model = parser.add_argument_group("model")
    model.add_argument("--config", help="key = value config file")
    model.add_argument("--backbone", choices=["gcn", "gin", "sage"])
    model.add_argument("--relating-up", type=_bool_flag, nargs="?", const=True, metavar="BOOL")
    model.add_argument("--use-distill", type=_bool_flag, metavar="BOOL")
    model.add_argument("--use-hint", type=_bool_flag, metavar="BOOL")
    for name, typ in (("alpha", float), ("beta", float), ("temperature", float), ("lr", float),
                      ("dropout", float), ("batch-size", int), ("seed", int), ("max-epochs", int),
                      ("patience", int), ("hidden", int), ("layers", int), ("heads", int),
                      ("relation-layers", int)):
        model.add_argument(f"--{name}", type=typ)
    model.add_argument("--readout", choices=["sum", "mean", "max"])
    run = parser.add_argument_group("run")
    run.add_argument("--folds", type=int, default=10)
    run.add_argument("--fold-seed", type=int, help="seed of the fold plan (default: --seed)")
    run.add_argument("--no-stratify", action="store_true")
    run.add_argument("--folds-parallel", type=int, default=1, metavar="N")
    run.add_argument("--out", default="runs")
    run.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphrel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="10-fold cross-validation of one configuration")
    _common(p)
    p.add_argument("--save-checkpoints", action="store_true", help="write model_fold<k>.ckpt per fold")

    p = sub.add_parser("sweep", help="alpha x beta x T grid on a shared fold plan")
    _common(p)
    p.add_argument("--sweep-folds", type=int, help="evaluate only the first N folds of the plan")
    p.add_argument("--select-by", choices=["mean", "val_mean"], default="mean")

    p = sub.add_parser("ablate", help="A1/A2/A3/Full loss ablations")
    _common(p)
    p.add_argument("--seeds", default="0", help="comma-separated model seeds")

    p = sub.add_parser("bench", help="train/inference timing, backbone vs relating-up")
    _common(p)
    p.add_argument("--epochs", type=int, default=5, help="timed repeats (median is reported)")

    p = sub.add_parser("export-embeddings", help="write graph embeddings from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=False)
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")

    p = sub.add_parser("parse-check", help="parse a dataset and print its statistics")
    _common(p)
    return parser


def load_dataset(args):
    if args.synthetic:
        ds = generate_synthetic(args.synthetic, args.seed if args.seed is not None else 0, args.label_noise)
        return featurize(ds, args.featurization) if args.featurization else ds
    if not args.dataset:
        raise UsageError("one of --dataset or --synthetic is required")
    return parse_tudataset(args.data_root, args.dataset, args.featurization)


def resolve_config(args) -> ModelConfig:
    config = ModelConfig.from_file(args.config) if args.config else ModelConfig()
    overrides = {field: getattr(args, flag) for flag, field in OVERRIDES.items()
                 if getattr(args, flag, None) is not None}
    return config.with_overrides(overrides).validate()


def plan_folds(args, dataset, config):
    seed = args.fold_seed if args.fold_seed is not None else config.seed
    return stratified_folds(dataset, args.folds, seed, stratify=not args.no_stratify)


def cmd_train(args):
    dataset, config = load_dataset(args), resolve_config(args)
    folds = plan_folds(args, dataset, config)
    os.makedirs(args.out, exist_ok=True)
    summary = harness.run_cv(dataset, config, folds, args.folds_parallel,
                             args.out if args.save_checkpoints else None)
    harness.write_summary(summary, args.out)
    for f in summary.folds:
        print(f"fold {f.fold_index}: best_epoch={f.best_epoch} val={f.val_accuracy:.4f} test={f.test_accuracy:.4f}")
    print(f"{dataset.name} {summary.format()}")
    return summary


def cmd_sweep(args):
    dataset, config = load_dataset(args), resolve_config(args)
    folds = plan_folds(args, dataset, config)
    if args.sweep_folds:
        folds = folds[:args.sweep_folds]
    rows = harness.sweep(dataset, config, folds, args.folds_parallel)
    os.makedirs(args.out, exist_ok=True)
    harness.write_grid(rows, os.path.join(args.out, "grid.csv"))
    best = harness.best_row(rows, args.select_by)
    print(f"best alpha={best.alpha:g} beta={best.beta:g} temperature={best.temperature:g} "
          f"{harness.format_mean_std(best.mean, best.std)}")
    return rows, best


def cmd_ablate(args):
    dataset, config = load_dataset(args), resolve_config(args)
    folds = plan_folds(args, dataset, config)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"invalid --seeds {args.seeds!r}", field="seeds") from None
    rows = harness.ablate(dataset, config, folds, seeds, args.folds_parallel)
    os.makedirs(args.out, exist_ok=True)
    harness.write_ablation(rows, os.path.join(args.out, "ablation.csv"))
    for r in rows:
        print(f"{r.variant:5s} {harness.format_mean_std(r.mean, r.std)}")
    return rows


def cmd_bench(args):
    dataset, config = load_dataset(args), resolve_config(args)
    report = harness.bench(dataset, config, args.epochs)
    os.makedirs(args.out, exist_ok=True)
    harness.write_bench(report, os.path.join(args.out, "bench.csv"))
    for row in report.rows():
        print(f"{row['phase']}: backbone={row['backbone_s']:.4f}s relating_up={row['relating_up_s']:.4f}s "
              f"ratio={row['ratio']:.3f}")
    return report


def cmd_export_embeddings(args):
    if not args.checkpoint or not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, config, meta = load_model(args.checkpoint)
    if args.featurization is None and "featurization" in meta:
        args.featurization = meta["featurization"]
    dataset = load_dataset(args)
    ids = None
    if args.split != "all":
        fold_seed = args.fold_seed if args.fold_seed is not None else meta.get("fold_seed", config.seed)
        plan = stratified_folds(dataset, args.folds, fold_seed, stratify=not args.no_stratify)
        ids = getattr(plan[meta.get("fold_index", 0)], f"{args.split}_ids")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "embeddings.csv")
    n = harness.export_embeddings(model, dataset, path, ids, config.batch_size)
    print(f"wrote {n} rows to {path}")
    return path


def cmd_parse_check(args):
    dataset = load_dataset(args)
    nodes = [g.num_nodes for g in dataset.graphs]
    edges = [len(g.edges) // 2 for g in dataset.graphs]
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    print(f"{dataset.name}: graphs={len(dataset)} classes={dataset.num_classes} "
          f"class_counts={counts.tolist()} mean_nodes={np.mean(nodes):.2f} mean_edges={np.mean(edges):.2f} "
          f"feature_dim={dataset.feature_dim} featurization={dataset.featurization}")
    if args.dataset and not args.synthetic:
        a_path = os.path.join(args.data_root, args.dataset, f"{args.dataset}_A.txt")
        with open(a_path, encoding="utf-8") as fh:
            pairs = sorted(tuple(int(t) for t in ln.split(",")) for ln in fh if ln.strip())
        original = [f"{u}, {v}" for u, v in pairs]
        print(f"edge round-trip: {'ok' if serialize_edges(dataset) == original else 'differs'}")
    return dataset


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "ablate": cmd_ablate, "bench": cmd_bench,
            "export-embeddings": cmd_export_embeddings, "parse-check": cmd_parse_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, ParameterError) as exc:
        field = getattr(exc, "field", None)
        print(f"usage error{f' [{field}]' if field else ''}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except DivergenceError as exc:
        print(f"numerical divergence in {exc.component}: {exc}", file=sys.stderr)
        return EXIT_DIVERGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
