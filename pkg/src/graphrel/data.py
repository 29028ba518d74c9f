"""Graph containers, TUDataset ingestion, batching and fold planning."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigurationError, ContractError, FormatError, IngestionError, ParameterError
from .tensor import Tensor

logger = logging.getLogger(__name__)

FEATURIZATIONS = ("node-label-one-hot", "node-attributes", "degree-one-hot", "uniform-constant")


@dataclass(eq=False)
class Graph:
    """One undirected graph; ``edges`` holds both directions as 0-based pairs."""

    num_nodes: int
    edges: np.ndarray
    node_features: np.ndarray
    label: int
    node_labels: Optional[np.ndarray] = None
    node_attributes: Optional[np.ndarray] = None
    num_raw_edges: Optional[int] = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        if self.node_features.shape[0] != self.num_nodes:
            raise ContractError(
                f"node_features has {self.node_features.shape[0]} rows for {self.num_nodes} nodes")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise ContractError("edge endpoint outside the node range")

    @property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.num_nodes)

    def with_features(self, features) -> "Graph":
        return replace(self, node_features=np.asarray(features, dtype=np.float64))


@dataclass
class Dataset:
    name: str
    graphs: list
    num_classes: int
    featurization: str

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].node_features.shape[1] if self.graphs else 0

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def __len__(self):
        return len(self.graphs)

    def subset(self, ids) -> list:
        return [self.graphs[i] for i in ids]


class GraphBatch:
    """Disjoint union of graphs; node ``i`` belongs to ``graph_indicator[i]``."""

    def __init__(self, node_features, edges, graph_indicator, labels):
        self.node_features = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.graph_indicator = np.asarray(graph_indicator, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)

    @property
    def batch_size(self) -> int:
        return len(self.labels)

    @property
    def num_nodes(self) -> int:
        return len(self.graph_indicator)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Binary adjacency ``A[v, u] = 1`` for each stored edge ``u -> v``."""
        n = self.num_nodes
        a = sp.csr_matrix((np.ones(len(self.edges)), (self.edges[:, 1], self.edges[:, 0])), shape=(n, n))
        a.sum_duplicates()
        a.data[:] = 1.0
        return a

    @cached_property
    def gcn_operator(self) -> sp.csr_matrix:
        a_hat = (self.adjacency + sp.identity(self.num_nodes, format="csr")).tocsr()
        a_hat.sum_duplicates()
        d = np.asarray(a_hat.sum(axis=1)).ravel()
        inv = 1.0 / np.sqrt(d)
        return sp.csr_matrix(sp.diags(inv) @ a_hat @ sp.diags(inv))

    @cached_property
    def mean_operator(self) -> sp.csr_matrix:
        deg = np.asarray(self.adjacency.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        return sp.csr_matrix(sp.diags(inv) @ self.adjacency)

    def node_counts(self) -> np.ndarray:
        return np.bincount(self.graph_indicator, minlength=self.batch_size)

    def unbatch_features(self) -> list:
        bounds = np.concatenate([[0], np.cumsum(self.node_counts())])
        x = self.node_features.data
        return [x[bounds[i]:bounds[i + 1]] for i in range(self.batch_size)]


def batch_graphs(graphs: Sequence[Graph]) -> GraphBatch:
    if len(graphs) == 0:
        raise ContractError("cannot batch an empty list of graphs")
    dims = {g.node_features.shape[1] for g in graphs}
    if len(dims) != 1:
        raise ContractError(f"graphs disagree on feature_dim: {sorted(dims)}")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    edges = np.concatenate([g.edges + offsets[i] for i, g in enumerate(graphs)], axis=0)
    indicator = np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs])
    x = np.concatenate([g.node_features for g in graphs], axis=0)
    return GraphBatch(x, edges, indicator, [g.label for g in graphs])


# -- TUDataset ingestion ----------------------------------------------------


def _read_lines(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc.strerror or exc}") from exc
    while lines and not lines[-1].strip():
        lines.pop()
    return lines


def _parse_int(token, path, lineno):
    try:
        return int(token.strip())
    except ValueError:
        raise FormatError(f"expected an integer, got {token.strip()!r}", path, lineno) from None


def _read_int_column(path):
    return np.array([_parse_int(ln, path, i + 1) for i, ln in enumerate(_read_lines(path))], dtype=np.int64)


def default_featurization(name: str, has_node_labels: bool, has_attributes: bool) -> str:
    upper = name.upper()
    if upper.startswith("REDDIT"):
        return "uniform-constant"
    if upper.startswith("IMDB"):
        return "degree-one-hot"
    if has_node_labels:
        return "node-label-one-hot"
    if has_attributes:
        return "node-attributes"
    return "degree-one-hot"


def parse_tudataset(root_dir, name: str, featurization: Optional[str] = None) -> Dataset:
    """Read ``<root_dir>/<name>/<name>_*.txt`` into a featurised :class:`Dataset`."""
    base = os.path.join(os.fspath(root_dir), name)

    def path_of(suffix):
        return os.path.join(base, f"{name}_{suffix}.txt")

    for suffix in ("A", "graph_indicator", "graph_labels"):
        if not os.path.isfile(path_of(suffix)):
            raise IngestionError(f"missing required file {path_of(suffix)}")

    indicator = _read_int_column(path_of("graph_indicator"))
    raw_labels = _read_int_column(path_of("graph_labels"))
    num_graphs = len(raw_labels)
    num_nodes_total = len(indicator)
    if num_nodes_total and (indicator.min() < 1 or indicator.max() > num_graphs):
        raise FormatError("graph id outside the range of graph_labels", path_of("graph_indicator"))
    if np.any(np.diff(indicator) < 0):
        raise FormatError("graph_indicator is not sorted", path_of("graph_indicator"))
    gid = indicator - 1

    a_path = path_of("A")
    pairs = []
    for lineno, line in enumerate(_read_lines(a_path), start=1):
        if not line.strip():
            continue
        toks = line.split(",")
        if len(toks) != 2:
            raise FormatError(f"expected 'u, v', got {line!r}", a_path, lineno)
        u, v = (_parse_int(t, a_path, lineno) for t in toks)
        if not (1 <= u <= num_nodes_total and 1 <= v <= num_nodes_total):
            raise FormatError(f"node id out of range in edge ({u}, {v})", a_path, lineno)
        if gid[u - 1] != gid[v - 1]:
            raise FormatError(f"edge ({u}, {v}) crosses graphs {gid[u - 1] + 1} and {gid[v - 1] + 1}",
                              a_path, lineno)
        pairs.append((u - 1, v - 1))
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    node_labels = None
    if os.path.isfile(path_of("node_labels")):
        node_labels = _read_int_column(path_of("node_labels"))
        if len(node_labels) != num_nodes_total:
            raise FormatError("node_labels length differs from graph_indicator", path_of("node_labels"))
    attributes = None
    if os.path.isfile(path_of("node_attributes")):
        attr_path = path_of("node_attributes")
        rows = []
        for lineno, line in enumerate(_read_lines(attr_path), start=1):
            try:
                rows.append([float(t) for t in line.split(",")])
            except ValueError:
                raise FormatError(f"expected comma-separated reals, got {line!r}", attr_path, lineno) from None
        attributes = np.array(rows, dtype=np.float64)
        if len(attributes) != num_nodes_total:
            raise FormatError("node_attributes length differs from graph_indicator", attr_path)

    classes = np.unique(raw_labels)
    dense_labels = np.searchsorted(classes, raw_labels)

    starts = np.searchsorted(gid, np.arange(num_graphs), side="left")
    stops = np.searchsorted(gid, np.arange(num_graphs), side="right")
    edge_graph = gid[edges[:, 0]] if len(edges) else np.zeros(0, dtype=np.int64)
    order = np.argsort(edge_graph, kind="stable")
    edges, edge_graph = edges[order], edge_graph[order]
    e_bounds = np.searchsorted(edge_graph, np.arange(num_graphs + 1), side="left")

    graphs = []
    for g in range(num_graphs):
        lo, hi = starts[g], stops[g]
        local = edges[e_bounds[g]:e_bounds[g + 1]] - lo
        raw = np.unique(local, axis=0) if len(local) else local
        both = np.concatenate([raw, raw[:, ::-1]], axis=0) if len(raw) else raw
        both = np.unique(both, axis=0) if len(both) else both
        n = int(hi - lo)
        graphs.append(Graph(
            num_nodes=n,
            edges=both,
            node_features=np.zeros((n, 0)),
            label=int(dense_labels[g]),
            node_labels=None if node_labels is None else node_labels[lo:hi],
            node_attributes=None if attributes is None else attributes[lo:hi],
            num_raw_edges=len(raw),
        ))

    raw_ds = Dataset(name, graphs, len(classes), "none")
    policy = featurization or default_featurization(name, node_labels is not None, attributes is not None)
    return featurize(raw_ds, policy)


def serialize_edges(dataset: Dataset) -> list:
    """Stored edges as sorted 1-based ``"u, v"`` lines over global node ids."""
    out, offset = [], 0
    for g in dataset.graphs:
        out.extend((int(u) + offset + 1, int(v) + offset + 1) for u, v in g.edges)
        offset += g.num_nodes
    return [f"{u}, {v}" for u, v in sorted(out)]


def featurize(raw: Dataset, policy: str) -> Dataset:
    if policy not in FEATURIZATIONS:
        raise ConfigurationError(f"unknown featurization {policy!r}", field="featurization")
    graphs = raw.graphs
    if policy == "node-label-one-hot":
        if any(g.node_labels is None for g in graphs):
            raise ConfigurationError(f"{raw.name} has no node labels for one-hot features",
                                     field="featurization")
        vocab = np.unique(np.concatenate([g.node_labels for g in graphs]))
        feats = [np.eye(len(vocab))[np.searchsorted(vocab, g.node_labels)] for g in graphs]
    elif policy == "node-attributes":
        if any(g.node_attributes is None for g in graphs):
            raise ConfigurationError(f"{raw.name} has no node attributes", field="featurization")
        feats = [g.node_attributes for g in graphs]
    elif policy == "degree-one-hot":
        max_deg = max((int(g.degrees.max()) for g in graphs if g.num_nodes), default=0)
        feats = [np.eye(max_deg + 1)[g.degrees] for g in graphs]
    else:
        feats = [np.ones((g.num_nodes, 1)) for g in graphs]
    return Dataset(raw.name, [g.with_features(f) for g, f in zip(graphs, feats)], raw.num_classes, policy)


# -- synthetic corpus -------------------------------------------------------


def _cycle(n):
    u = np.arange(n)
    e = np.stack([u, (u + 1) % n], axis=1)
    return np.concatenate([e, e[:, ::-1]])


def _path(n):
    u = np.arange(n - 1)
    e = np.stack([u, u + 1], axis=1)
    return np.concatenate([e, e[:, ::-1]])


def generate_synthetic(num_graphs: int, seed: int, label_noise: float = 0.0) -> Dataset:
    """Cycles (label 0) versus paths (label 1) with 6..12 nodes and degree one-hot features.

    ``label_noise`` flips each label independently with that probability.
    """
    if num_graphs < 2 or num_graphs % 2:
        raise ParameterError(f"num_graphs must be an even number >= 2, got {num_graphs}")
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(num_graphs):
        is_path = i % 2 == 1
        n = int(rng.integers(6, 13))
        edges = _path(n) if is_path else _cycle(n)
        graphs.append(Graph(n, edges, np.zeros((n, 0)), int(is_path), num_raw_edges=len(edges) // 2))
    if label_noise > 0:
        flips = rng.random(num_graphs) < label_noise
        for g, flip in zip(graphs, flips):
            if flip:
                g.label = 1 - g.label
    raw = Dataset(f"synthetic-{num_graphs}", graphs, 2, "none")
    # fixed width so every synthetic corpus shares feature_dim 3
    feats = [np.eye(3)[g.degrees] for g in graphs]
    return Dataset(raw.name, [g.with_features(f) for g, f in zip(graphs, feats)], 2, "degree-one-hot")


# -- cross-validation plans -------------------------------------------------


@dataclass
class FoldPlan:
    fold_index: int
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int = 0

    def as_dict(self) -> dict:
        return {"fold_index": self.fold_index, "seed": self.seed, "train_ids": list(self.train_ids),
                "val_ids": list(self.val_ids), "test_ids": list(self.test_ids)}


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``counts``."""
    if counts.sum() == 0:
        return np.zeros_like(counts)
    quota = counts * total / counts.sum()
    alloc = np.floor(quota).astype(np.int64)
    rest = total - alloc.sum()
    order = np.argsort(-(quota - alloc), kind="stable")
    alloc[order[:rest]] += 1
    return np.minimum(alloc, counts)


def stratified_folds(dataset, k: int = 10, seed: int = 0, stratify: bool = True,
                     val_fraction: Optional[float] = None) -> list:
    """Plan ``k`` folds with disjoint test sets covering the dataset.

    The validation set of each fold is a second stratified draw from the
    non-test part, sized like one test fold (the 8:1:1 layout for ``k=10``).
    ``dataset`` may be a :class:`Dataset` or a sequence of labels.
    """
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    labels = dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=np.int64)
    n = len(labels)
    if n < k:
        raise ParameterError(f"cannot split {n} graphs into {k} folds")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    if stratify and counts.min() < k:
        logger.warning("a class has fewer than %d members; falling back to unstratified folds", k)
        stratify = False

    fold_of = np.empty(n, dtype=np.int64)
    if stratify:
        cursor = 0
        for c in classes:
            members = rng.permutation(np.flatnonzero(labels == c))
            # continue the round-robin across classes so fold sizes stay balanced
            fold_of[members] = (cursor + np.arange(len(members))) % k
            cursor = (cursor + len(members)) % k
    else:
        fold_of[rng.permutation(n)] = np.arange(n) % k

    val_fraction = 1.0 / k if val_fraction is None else val_fraction
    plans = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        rest = np.flatnonzero(fold_of != f)
        fold_rng = np.random.default_rng([seed, f])
        n_val = int(round(val_fraction * n))
        if stratify:
            rest_counts = np.array([(labels[rest] == c).sum() for c in classes])
            take = _largest_remainder(rest_counts, n_val)
            val = np.concatenate([fold_rng.permutation(rest[labels[rest] == c])[:t]
                                  for c, t in zip(classes, take)])
        else:
            val = fold_rng.permutation(rest)[:n_val]
        val_set = set(val.tolist())
        train = [int(i) for i in rest if i not in val_set]
        if not train:
            raise ParameterError(f"fold {f} has no training graphs (k={k}, {len(val)} validation graphs); "
                                 "use k >= 3 or a smaller val_fraction")
        plans.append(FoldPlan(f, train, sorted(int(i) for i in val), [int(i) for i in test], seed))
    return plans
