"""Feedback training: losses, optimiser, schedule, early stopping and the fit loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .backbones import GraphEncoderParams, encode_graphs, init_graph_encoder
from .config import LossWeights, ModelConfig
from .data import Dataset, FoldPlan, Graph, batch_graphs
from .exceptions import ContractError, DimensionError, DivergenceError
from .params import checksum, named_tensors, restore, snapshot, trainable
from .relation import (ClassifierParams, RelationEncoderParams, classify, init_classifier,
                       init_relation_encoder, relation_encode)

logger = logging.getLogger(__name__)


# -- losses -------------------------------------------------------------------


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels]


def classification_loss(logits: T.Tensor, labels) -> T.Tensor:
    """Batch-mean cross-entropy, via log-softmax."""
    onehot = _one_hot(labels, logits.shape[1])
    if onehot.shape[0] != logits.shape[0]:
        raise ContractError(f"{len(onehot)} labels for {logits.shape[0]} rows")
    logp = T.log_softmax_rows(logits)
    return T.total(T.mul(logp, T.Tensor(onehot))) * (-1.0 / logits.shape[0])


def distill_loss(logits_g: T.Tensor, logits_r: T.Tensor, temperature: float,
                 t_squared: bool = False) -> T.Tensor:
    """Batch mean of KL(softmax(g/T) || softmax(r/T)); both sides receive gradients."""
    if logits_g.shape != logits_r.shape:
        raise DimensionError(f"distill_loss: shapes {logits_g.shape} and {logits_r.shape} differ")
    log_p = T.log_softmax_rows(logits_g, temperature)
    log_q = T.log_softmax_rows(logits_r, temperature)
    p = T.exp(log_p)
    kl = T.total(T.mul(p, log_p - log_q)) * (1.0 / logits_g.shape[0])
    return kl * (temperature ** 2) if t_squared else kl


def hint_loss(e: T.Tensor, r: T.Tensor) -> T.Tensor:
    """Batch mean of squared Euclidean distance between matching rows."""
    if e.shape != r.shape:
        raise DimensionError(f"hint_loss: shapes {e.shape} and {r.shape} differ")
    d = r - e
    return T.total(T.mul(d, d)) * (1.0 / e.shape[0])


def total_loss(class_g, class_r, distill, hint, w: LossWeights) -> T.Tensor:
    """alpha (CE_g + CE_r) + (1 - alpha) KL + beta hint, with disabled terms dropped.

    Parts may be tensors, floats, or ``None`` for a disabled term.
    """
    def as_t(x):
        return x if isinstance(x, T.Tensor) else T.Tensor(float(x))

    loss = (as_t(class_g) + as_t(class_r)) * w.alpha
    if w.use_distill and distill is not None:
        loss = loss + as_t(distill) * (1.0 - w.alpha)
    if w.use_hint and hint is not None:
        loss = loss + as_t(hint) * w.beta
    return loss


# -- optimisation -------------------------------------------------------------


def lr_schedule(epoch: int, initial_lr: float, step: int = 50, gamma: float = 0.5) -> float:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return initial_lr * gamma ** (epoch // step)


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, params: Sequence[T.Tensor], lr: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        T.zero_grad(self.params)


def adam_update(opt: Adam, params=None, grads=None) -> None:
    if params is not None and list(params) != opt.params:
        raise ContractError("parameters differ from those the optimiser was built with")
    opt.step(grads)


class EarlyStopping:
    """Tracks the first epoch with the best validation accuracy."""

    def __init__(self, patience: int = 100, max_epochs: int = 300):
        self.patience = patience
        self.max_epochs = max_epochs
        self.best_val_accuracy = -np.inf
        self.best_epoch = -1
        self.best_params_snapshot = None

    def update(self, epoch: int, val_accuracy: float, model=None) -> bool:
        """Record one epoch; return True when training should stop."""
        if val_accuracy > self.best_val_accuracy:
            self.best_val_accuracy = val_accuracy
            self.best_epoch = epoch
            if model is not None:
                self.best_params_snapshot = snapshot(model)
        return epoch - self.best_epoch >= self.patience or epoch + 1 >= self.max_epochs


# -- model ---------------------------------------------------------------------


@dataclass
class FeedbackModel:
    """Graph encoder and its head, plus the training-only relation branch."""

    encoder: GraphEncoderParams
    head_graph: ClassifierParams
    relation: Optional[RelationEncoderParams] = None
    head_relation: Optional[ClassifierParams] = None

    @property
    def num_classes(self) -> int:
        return self.head_graph.num_classes

    def parameters(self) -> list:
        return trainable(self)

    def inference_part(self):
        return (self.encoder, self.head_graph)


def build_model(config: ModelConfig, d_in: int, num_classes: int,
                rng: Optional[np.random.Generator] = None) -> FeedbackModel:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    encoder = init_graph_encoder(config.backbone, d_in, config.hidden, config.layers, rng,
                                 config.readout, config.dropout, config.learn_eps)
    head_graph = init_classifier(config.hidden, num_classes, rng)
    if not config.relating_up:
        return FeedbackModel(encoder, head_graph)
    relation = init_relation_encoder(config.hidden, config.heads, config.relation_layers, rng,
                                     config.relation_dropout)
    return FeedbackModel(encoder, head_graph, relation, init_classifier(config.hidden, num_classes, rng))


@dataclass
class StepMetrics:
    loss: float
    class_g: float
    class_r: float = float("nan")
    distill: float = float("nan")
    hint: float = float("nan")
    accuracy: float = float("nan")


def _value(t):
    return float("nan") if t is None else float(t.data)


def forward_losses(batch, model: FeedbackModel, w: LossWeights, rng=None, training: bool = True,
                   detach_relation: bool = False):
    """Build all loss terms for one batch on the active tape.

    Returns ``(loss, parts, logits_g)``; ``parts`` maps term name to tensor.
    """
    e = encode_graphs(batch, model.encoder, training, rng)
    logits_g = classify(e, model.head_graph)
    class_g = classification_loss(logits_g, batch.labels)
    if model.relation is None:
        return class_g, {"class_g": class_g}, logits_g
    e_in = T.detach(e) if detach_relation else e
    r = relation_encode(e_in, model.relation, training, rng)
    logits_r = classify(r, model.head_relation)
    class_r = classification_loss(logits_r, batch.labels)
    distill = distill_loss(logits_g, logits_r, w.temperature, w.distill_t2) if w.use_distill else None
    hint = hint_loss(e, T.detach(r) if w.hint_stop_grad else r) if w.use_hint else None
    loss = total_loss(class_g, class_r, distill, hint, w)
    return loss, {"class_g": class_g, "class_r": class_r, "distill": distill, "hint": hint}, logits_g


def train_step(batch, model: FeedbackModel, w: LossWeights, opt: Adam, rng=None,
               detach_relation: bool = False) -> StepMetrics:
    """One forward, one backward, one joint Adam update."""
    with T.Tape() as tape:
        loss, parts, logits_g = forward_losses(batch, model, w, rng, True, detach_relation)
    for name, part in [("total", loss), *parts.items()]:
        if part is not None and not np.isfinite(part.data).all():
            raise DivergenceError(f"non-finite {name} loss", component=name)
    T.backward(loss, tape)
    opt.step()
    pred = logits_g.data.argmax(axis=1)
    return StepMetrics(float(loss.data), _value(parts.get("class_g")), _value(parts.get("class_r")),
                       _value(parts.get("distill")), _value(parts.get("hint")),
                       float((pred == batch.labels).mean()))


# -- inference -------------------------------------------------------------------


def _batches(graphs: Sequence[Graph], batch_size: int):
    for start in range(0, len(graphs), batch_size):
        yield batch_graphs(graphs[start:start + batch_size])


def graph_logits(graphs: Sequence[Graph], encoder: GraphEncoderParams, head: ClassifierParams,
                 batch_size: int = 128) -> np.ndarray:
    if not len(graphs):
        return np.zeros((0, head.num_classes))
    d = graphs[0].node_features.shape[1]
    if d != encoder.d_in:
        raise ContractError(f"graphs have feature_dim {d}, model expects {encoder.d_in}")
    out = [classify(encode_graphs(b, encoder, training=False), head).data for b in _batches(graphs, batch_size)]
    return np.concatenate(out, axis=0)


def graph_embeddings(graphs: Sequence[Graph], encoder: GraphEncoderParams, batch_size: int = 128) -> np.ndarray:
    if not len(graphs):
        return np.zeros((0, encoder.d_out))
    return np.concatenate([encode_graphs(b, encoder, training=False).data
                           for b in _batches(graphs, batch_size)], axis=0)


def infer(graphs: Sequence[Graph], model, batch_size: int = 128) -> np.ndarray:
    """Predicted labels from the graph encoder and graph head only."""
    encoder, head = model.inference_part() if isinstance(model, FeedbackModel) else model
    return graph_logits(graphs, encoder, head, batch_size).argmax(axis=1)


def accuracy(graphs: Sequence[Graph], model, batch_size: int = 128) -> float:
    if not len(graphs):
        return float("nan")
    labels = np.array([g.label for g in graphs])
    return float((infer(graphs, model, batch_size) == labels).mean())


# -- fit loop -------------------------------------------------------------------


@dataclass
class FitResult:
    best_epoch: int
    epochs_run: int
    val_accuracy_curve: list
    train_loss_curve: list
    train_seconds_per_epoch: float
    evaluated_checksum: str


def run_epoch(model: FeedbackModel, graphs: Sequence[Graph], config: ModelConfig, opt: Adam,
              rng: np.random.Generator) -> list:
    order = rng.permutation(len(graphs))
    metrics = []
    for start in range(0, len(order), config.batch_size):
        batch = batch_graphs([graphs[i] for i in order[start:start + config.batch_size]])
        metrics.append(train_step(batch, model, config.loss_weights, opt, rng, config.detach_relation))
    return metrics


def fit_model(model: FeedbackModel, train_graphs: Sequence[Graph], config: ModelConfig,
              val_graphs: Optional[Sequence[Graph]] = None,
              rng: Optional[np.random.Generator] = None) -> FitResult:
    """Train with the step schedule; with validation graphs, restore the best epoch."""
    rng = rng if rng is not None else np.random.default_rng([config.seed, 1])
    opt = Adam(model.parameters(), lr=config.lr)
    stopper = EarlyStopping(config.patience, config.max_epochs)
    val_curve, loss_curve = [], []
    seconds = 0.0
    epoch = -1
    for epoch in range(config.max_epochs):
        opt.lr = lr_schedule(epoch, config.lr, config.lr_step, config.lr_gamma)
        t0 = time.perf_counter()
        metrics = run_epoch(model, train_graphs, config, opt, rng)
        seconds += time.perf_counter() - t0
        loss_curve.append(float(np.mean([m.loss for m in metrics])))
        if val_graphs is None:
            continue
        val_acc = accuracy(val_graphs, model, config.batch_size)
        val_curve.append(val_acc)
        logger.debug("epoch %d loss %.4f val %.4f", epoch, loss_curve[-1], val_acc)
        if stopper.update(epoch, val_acc, model):
            break
    epochs_run = epoch + 1
    best_epoch = epochs_run - 1
    if val_graphs is not None and stopper.best_params_snapshot is not None:
        restore(model, stopper.best_params_snapshot)
        best_epoch = stopper.best_epoch
    return FitResult(best_epoch, epochs_run, val_curve, loss_curve,
                     seconds / max(epochs_run, 1), checksum(model))


@dataclass
class FoldReport:
    fold_index: int
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    wall_time_train_per_epoch: float
    wall_time_infer: float
    val_accuracy_curve: list = field(default_factory=list)
    evaluated_checksum: str = ""


def train_fold(fold: FoldPlan, dataset: Dataset, config: ModelConfig,
               return_model: bool = False):
    """Fit on the fold's train split, select on validation, score the test split."""
    rng = np.random.default_rng([config.seed, fold.fold_index])
    model = build_model(config, dataset.feature_dim, dataset.num_classes, rng)
    train = dataset.subset(fold.train_ids)
    val = dataset.subset(fold.val_ids)
    test = dataset.subset(fold.test_ids)
    result = fit_model(model, train, config, val, rng)
    if checksum(model) != result.evaluated_checksum:
        raise ContractError("model changed between selection and evaluation")
    t0 = time.perf_counter()
    test_acc = accuracy(test, model, config.batch_size)
    infer_s = time.perf_counter() - t0
    best_val = result.val_accuracy_curve[result.best_epoch] if result.val_accuracy_curve else float("nan")
    report = FoldReport(fold.fold_index, result.best_epoch, best_val, test_acc,
                        result.train_seconds_per_epoch, infer_s, result.val_accuracy_curve,
                        result.evaluated_checksum)
    return (report, model) if return_model else report
