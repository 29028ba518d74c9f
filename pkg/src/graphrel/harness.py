"""Cross-validation driver and experiment commands behind the CLI."""

from __future__ import annotations

import csv
import gc
import itertools
import logging
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import save_model
from .config import ABLATIONS, ALPHA_GRID, BETA_GRID, TEMPERATURE_GRID, ModelConfig
from .data import Dataset, FoldPlan, stratified_folds
from .training import (Adam, FoldReport, build_model, graph_embeddings, infer, lr_schedule,
                       run_epoch, train_fold)

logger = logging.getLogger(__name__)

SUMMARY_FIELDS = ["fold", "best_epoch", "val_acc", "test_acc", "train_s_per_epoch", "infer_s"]
GRID_FIELDS = ["alpha", "beta", "temperature", "mean", "std", "val_mean"]
ABLATION_FIELDS = ["variant", "use_distill", "use_hint", "mean", "std", "seed_means"]


@dataclass
class RunSummary:
    dataset: str
    config: ModelConfig
    folds: list

    @property
    def test_accuracies(self) -> list:
        return [f.test_accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def std_accuracy(self) -> float:
        # population std over fold test accuracies
        return float(np.std(self.test_accuracies))

    @property
    def mean_val_accuracy(self) -> float:
        return float(np.mean([f.val_accuracy for f in self.folds]))

    def format(self) -> str:
        return format_mean_std(self.mean_accuracy, self.std_accuracy)


def format_mean_std(mean: float, std: float) -> str:
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def _run_one(args):
    fold, dataset, config, checkpoint_dir = args
    if checkpoint_dir is None:
        return train_fold(fold, dataset, config)
    report, model = train_fold(fold, dataset, config, return_model=True)
    save_model(os.path.join(checkpoint_dir, f"model_fold{fold.fold_index}.ckpt"), model, config,
               {"dataset": dataset.name, "fold_index": fold.fold_index, "fold_seed": fold.seed,
                "featurization": dataset.featurization})
    return report


def run_cv(dataset: Dataset, config: ModelConfig, folds: Sequence[FoldPlan],
           parallel: int = 1, checkpoint_dir: Optional[str] = None) -> RunSummary:
    """Train and score every fold; folds are independent and may run in worker processes."""
    jobs = [(fold, dataset, config, checkpoint_dir) for fold in folds]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = []
        for job in jobs:
            reports.append(_run_one(job))
            r = reports[-1]
            logger.info("fold %d: best_epoch=%d val=%.4f test=%.4f", r.fold_index, r.best_epoch,
                        r.val_accuracy, r.test_accuracy)
    return RunSummary(dataset.name, config, reports)


# -- CSV round-trips ------------------------------------------------------------


def _open_append(path, fields):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    fh = open(path, "a", newline="", encoding="utf-8")
    writer = csv.DictWriter(fh, fieldnames=fields)
    if new:
        writer.writeheader()
    return fh, writer


def write_summary(summary: RunSummary, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    fh, writer = _open_append(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS)
    with fh:
        for f in summary.folds:
            writer.writerow({"fold": f.fold_index, "best_epoch": f.best_epoch, "val_acc": repr(f.val_accuracy),
                             "test_acc": repr(f.test_accuracy), "train_s_per_epoch": repr(f.wall_time_train_per_epoch),
                             "infer_s": repr(f.wall_time_infer)})
    with open(os.path.join(out_dir, "summary.txt"), "a", encoding="utf-8") as fh:
        fh.write(f"{summary.dataset} {summary.format()}\n")
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary.config.to_text())


def read_fold_reports(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [FoldReport(int(r["fold"]), int(r["best_epoch"]), float(r["val_acc"]), float(r["test_acc"]),
                           float(r["train_s_per_epoch"]), float(r["infer_s"]))
                for r in csv.DictReader(fh)]


def read_summary(out_dir, dataset: str = "") -> RunSummary:
    config = ModelConfig.from_file(os.path.join(out_dir, "config.txt"))
    return RunSummary(dataset, config, read_fold_reports(os.path.join(out_dir, "summary.csv")))


# -- sweep ---------------------------------------------------------------------


@dataclass
class GridRow:
    alpha: float
    beta: float
    temperature: float
    mean: float
    std: float
    val_mean: float


def sweep(dataset: Dataset, config: ModelConfig, folds: Sequence[FoldPlan], parallel: int = 1,
          alphas=ALPHA_GRID, betas=BETA_GRID, temperatures=TEMPERATURE_GRID):
    """Cross-validate every (alpha, beta, T) combination on one shared fold plan."""
    rows = []
    for alpha, beta, temp in itertools.product(alphas, betas, temperatures):
        cfg = config.replace(alpha=alpha, beta=beta, temperature=temp, relating_up=True)
        cfg.validate(sweep=True)
        s = run_cv(dataset, cfg, folds, parallel)
        rows.append(GridRow(alpha, beta, temp, s.mean_accuracy, s.std_accuracy, s.mean_val_accuracy))
        logger.info("alpha=%g beta=%g T=%g -> %s", alpha, beta, temp, s.format())
    return rows


def best_row(rows: Sequence[GridRow], select_by: str = "mean") -> GridRow:
    """First row with the maximal ``select_by`` column."""
    return max(rows, key=lambda r: getattr(r, select_by))


def write_grid(rows: Sequence[GridRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(getattr(r, k)) for k in GRID_FIELDS})


def read_grid(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [GridRow(*(float(r[k]) for k in GRID_FIELDS)) for r in csv.DictReader(fh)]


# -- ablation -------------------------------------------------------------------


@dataclass
class AblationRow:
    variant: str
    use_distill: bool
    use_hint: bool
    mean: float
    std: float
    seed_means: list
    config: ModelConfig = None


def ablation_configs(config: ModelConfig) -> dict:
    return {name: config.replace(relating_up=True, **flags) for name, flags in ABLATIONS.items()}


def ablate(dataset: Dataset, config: ModelConfig, folds: Sequence[FoldPlan], seeds: Sequence[int],
           parallel: int = 1) -> list:
    """Run A1, A2, A3 and Full with identical folds for each model seed."""
    rows = []
    for name, cfg in ablation_configs(config).items():
        seed_means, accs = [], []
        for seed in seeds:
            s = run_cv(dataset, cfg.replace(seed=seed), folds, parallel)
            seed_means.append(s.mean_accuracy)
            accs.extend(s.test_accuracies)
        rows.append(AblationRow(name, cfg.use_distill, cfg.use_hint, float(np.mean(seed_means)),
                                float(np.std(accs)), seed_means, cfg))
        logger.info("%s: %s", name, format_mean_std(rows[-1].mean, rows[-1].std))
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow({"variant": r.variant, "use_distill": str(r.use_distill).lower(),
                             "use_hint": str(r.use_hint).lower(), "mean": repr(r.mean), "std": repr(r.std),
                             "seed_means": ";".join(repr(m) for m in r.seed_means)})


# -- timing ----------------------------------------------------------------------


@dataclass
class BenchReport:
    epochs: int
    train_s_backbone: float = float("nan")
    train_s_relating_up: float = float("nan")
    infer_s_backbone: float = float("nan")
    infer_s_relating_up: float = float("nan")

    @property
    def train_ratio(self) -> float:
        return self.train_s_relating_up / self.train_s_backbone

    @property
    def infer_ratio(self) -> float:
        return self.infer_s_relating_up / self.infer_s_backbone

    def rows(self) -> list:
        if self.epochs == 0:
            return []
        return [
            {"phase": "train_epoch", "backbone_s": self.train_s_backbone,
             "relating_up_s": self.train_s_relating_up, "ratio": self.train_ratio},
            {"phase": "inference", "backbone_s": self.infer_s_backbone,
             "relating_up_s": self.infer_s_relating_up, "ratio": self.infer_ratio},
        ]


def bench(dataset: Dataset, config: ModelConfig, repeats: int = 5, infer_passes: int = 3) -> BenchReport:
    """Median wall time of a training epoch and of full-dataset inference, per arm.

    Measurements of the two arms are interleaved, with the order flipped
    every repeat, so slow drift of the machine affects both equally. The
    garbage collector is paused while timing, as timeit does.
    """
    if repeats <= 0:
        return BenchReport(0)
    graphs = dataset.graphs
    arms = {}
    for name, ru in (("backbone", False), ("relating_up", True)):
        cfg = config.replace(relating_up=ru)
        model = build_model(cfg, dataset.feature_dim, dataset.num_classes, np.random.default_rng(cfg.seed))
        arms[name] = (cfg, model, Adam(model.parameters(), lr=lr_schedule(0, cfg.lr)),
                      np.random.default_rng([cfg.seed, 7]))
    train_t = {k: [] for k in arms}
    infer_t = {k: [] for k in arms}
    for name, (cfg, model, opt, rng) in arms.items():  # warm-up
        run_epoch(model, graphs, cfg, opt, rng)
        infer(graphs, model, cfg.batch_size)
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for i in range(repeats):
            order = list(arms) if i % 2 == 0 else list(arms)[::-1]
            for name in order:
                cfg, model, opt, rng = arms[name]
                t0 = time.perf_counter()
                run_epoch(model, graphs, cfg, opt, rng)
                train_t[name].append(time.perf_counter() - t0)
            for name in order:
                cfg, model, _, _ = arms[name]
                t0 = time.perf_counter()
                for _ in range(infer_passes):
                    infer(graphs, model, cfg.batch_size)
                infer_t[name].append((time.perf_counter() - t0) / infer_passes)
            gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()
    return BenchReport(repeats, statistics.median(train_t["backbone"]), statistics.median(train_t["relating_up"]),
                       statistics.median(infer_t["backbone"]), statistics.median(infer_t["relating_up"]))


def write_bench(report: BenchReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["phase", "backbone_s", "relating_up_s", "ratio"])
        writer.writeheader()
        for row in report.rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- embeddings --------------------------------------------------------------------


def export_embeddings(model, dataset: Dataset, path, ids: Optional[Sequence[int]] = None,
                      batch_size: int = 128) -> int:
    """Write ``graph_id,label,e0..`` rows (1-based graph ids) from the inference path."""
    ids = list(range(len(dataset))) if ids is None else list(ids)
    emb = graph_embeddings(dataset.subset(ids), model.encoder, batch_size)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["graph_id", "label"] + [f"e{j}" for j in range(emb.shape[1])])
        for i, row in zip(ids, emb):
            writer.writerow([i + 1, dataset.graphs[i].label] + [repr(float(v)) for v in row])
    return len(ids)
