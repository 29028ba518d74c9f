"""Input validation for estimator entry points."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import Dataset, Graph
from .exceptions import ContractError


def check_graphs(X, y=None, n_features: Optional[int] = None):
    """Return ``(graphs, labels)`` from a Dataset or a sequence of Graphs.

    Labels default to each graph's own ``label`` when ``y`` is None.
    """
    graphs = list(X.graphs) if isinstance(X, Dataset) else list(X)
    if not graphs:
        raise ContractError("expected at least one graph")
    bad = [type(g).__name__ for g in graphs if not isinstance(g, Graph)]
    if bad:
        raise ContractError(f"expected Graph instances, got {bad[0]}")
    dims = {g.node_features.shape[1] for g in graphs}
    if len(dims) != 1:
        raise ContractError(f"graphs disagree on feature_dim: {sorted(dims)}")
    (dim,) = dims
    if n_features is not None and dim != n_features:
        raise ContractError(f"graphs have {dim} features, estimator was fitted with {n_features}")
    if y is None:
        labels = np.array([g.label for g in graphs], dtype=np.int64)
    else:
        labels = np.asarray(y)
        if labels.ndim != 1 or len(labels) != len(graphs):
            raise ContractError(f"y has shape {labels.shape} for {len(graphs)} graphs")
    return graphs, labels
