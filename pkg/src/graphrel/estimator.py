"""scikit-learn compatible front end.

>>> clf = RelatingUpClassifier(backbone="gin", max_epochs=50)
>>> clf.fit(train_graphs, X_val=val_graphs).score(test_graphs, test_labels)

``X`` is a sequence of :class:`~graphrel.data.Graph` (or a Dataset); when
``y`` is omitted each graph's own label is used.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig
from .training import build_model, fit_model, graph_embeddings, graph_logits
from .validation import check_graphs


class RelatingUpClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """GNN graph classifier trained with a batch-level relation encoder.

    With ``relating_up=False`` this is a plain backbone trained on
    cross-entropy. Either way, prediction uses only the graph encoder and
    its head. ``transform`` returns graph embeddings.
    """

    def __init__(self, backbone="gin", layers=5, hidden=128, readout="sum", dropout=0.5,
                 learn_eps=False, relating_up=True, relation_layers=1, heads=4,
                 relation_dropout=0.0, alpha=0.3, beta=1e-5, temperature=3.0,
                 use_distill=True, use_hint=True, distill_t2=False, hint_stop_grad=False,
                 detach_relation=False, batch_size=128, lr=0.01, lr_step=50, lr_gamma=0.5,
                 max_epochs=300, patience=100, random_state=0):
        self.backbone = backbone
        self.layers = layers
        self.hidden = hidden
        self.readout = readout
        self.dropout = dropout
        self.learn_eps = learn_eps
        self.relating_up = relating_up
        self.relation_layers = relation_layers
        self.heads = heads
        self.relation_dropout = relation_dropout
        self.alpha = alpha
        self.beta = beta
        self.temperature = temperature
        self.use_distill = use_distill
        self.use_hint = use_hint
        self.distill_t2 = distill_t2
        self.hint_stop_grad = hint_stop_grad
        self.detach_relation = detach_relation
        self.batch_size = batch_size
        self.lr = lr
        self.lr_step = lr_step
        self.lr_gamma = lr_gamma
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: ModelConfig) -> "RelatingUpClassifier":
        values = config.to_dict()
        values["random_state"] = values.pop("seed")
        return cls(**values)

    def to_config(self) -> ModelConfig:
        params = self.get_params()
        params["seed"] = params.pop("random_state")
        return ModelConfig(**params)

    def _encode_labels(self, graphs, labels):
        codes = np.searchsorted(self.classes_, labels)
        if np.any(self.classes_[np.minimum(codes, len(self.classes_) - 1)] != labels):
            raise ValueError("y contains labels not seen during fit")
        return [dataclasses.replace(g, label=int(c)) for g, c in zip(graphs, codes)]

    def fit(self, X, y=None, X_val=None, y_val=None):
        """Train; with validation graphs, early-stop and keep the best epoch."""
        config = self.to_config()
        graphs, labels = check_graphs(X, y)
        self.classes_ = np.unique(labels)
        self.n_features_in_ = graphs[0].node_features.shape[1]
        train = self._encode_labels(graphs, labels)
        val = None
        if X_val is not None:
            val_graphs, val_labels = check_graphs(X_val, y_val, self.n_features_in_)
            val = self._encode_labels(val_graphs, val_labels)
        rng = np.random.default_rng(config.seed)
        self.model_ = build_model(config, self.n_features_in_, len(self.classes_), rng)
        result = fit_model(self.model_, train, config, val, rng)
        self.best_epoch_ = result.best_epoch
        self.n_epochs_ = result.epochs_run
        self.val_accuracy_curve_ = result.val_accuracy_curve
        self.loss_curve_ = result.train_loss_curve
        self.train_seconds_per_epoch_ = result.train_seconds_per_epoch
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        graphs, _ = check_graphs(X, n_features=self.n_features_in_)
        return graph_logits(graphs, self.model_.encoder, self.model_.head_graph, self.batch_size)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        graphs, _ = check_graphs(X, n_features=self.n_features_in_)
        return graph_embeddings(graphs, self.model_.encoder, self.batch_size)
