"""Message-passing graph encoders (GCN, GIN, GraphSAGE) and readouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import GraphBatch
from .exceptions import ConfigurationError, DimensionError
from .params import glorot, zeros

BACKBONES = ("gcn", "gin", "sage")
READOUTS = ("sum", "mean", "max")


@dataclass
class GnnLayerParams:
    """Weights of one message-passing layer.

    ``weights`` keys by kind: gcn ``w``; gin ``w1, b1, w2`` (+ ``eps``);
    sage ``w_self, w_neigh``. ``bias`` is the output bias for every kind.
    """

    kind: str
    d_in: int
    d_out: int
    weights: dict
    bias: T.Tensor
    eps: Optional[T.Tensor] = None
    learn_eps: bool = False


@dataclass
class GraphEncoderParams:
    layers: list
    readout: str = "sum"
    dropout_rate: float = 0.5

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out


def init_layer(kind: str, d_in: int, d_out: int, rng: np.random.Generator,
               learn_eps: bool = False) -> GnnLayerParams:
    if kind == "gcn":
        weights = {"w": glorot(d_in, d_out, rng)}
    elif kind == "gin":
        weights = {"w1": glorot(d_in, d_out, rng), "b1": zeros(d_out), "w2": glorot(d_out, d_out, rng)}
    elif kind == "sage":
        weights = {"w_self": glorot(d_in, d_out, rng), "w_neigh": glorot(d_in, d_out, rng)}
    else:
        raise ConfigurationError(f"unknown backbone {kind!r}", field="backbone")
    eps = T.Tensor(np.zeros(1), requires_grad=learn_eps) if kind == "gin" else None
    return GnnLayerParams(kind, d_in, d_out, weights, zeros(d_out), eps, learn_eps)


def init_graph_encoder(kind: str, d_in: int, hidden: int = 128, num_layers: int = 5,
                       rng: Optional[np.random.Generator] = None, readout: str = "sum",
                       dropout_rate: float = 0.5, learn_eps: bool = False) -> GraphEncoderParams:
    if readout not in READOUTS:
        raise ConfigurationError(f"unknown readout {readout!r}", field="readout")
    rng = rng if rng is not None else np.random.default_rng(0)
    dims = [d_in] + [hidden] * num_layers
    layers = [init_layer(kind, dims[i], dims[i + 1], rng, learn_eps) for i in range(num_layers)]
    return GraphEncoderParams(layers, readout, dropout_rate)


def _check_input(h: T.Tensor, batch: GraphBatch, params: GnnLayerParams):
    if h.ndim != 2 or h.shape[0] != batch.num_nodes or h.shape[1] != params.d_in:
        raise DimensionError(
            f"{params.kind} layer expects [{batch.num_nodes}x{params.d_in}] node features, got {h.shape}")


def gcn_layer(h: T.Tensor, batch: GraphBatch, params: GnnLayerParams) -> T.Tensor:
    """ReLU(D^-1/2 (A + I) D^-1/2 H W + b)."""
    _check_input(h, batch, params)
    hw = h @ params.weights["w"]
    return T.relu(T.sparse_matmul(batch.gcn_operator, hw) + params.bias)


def gin_layer(h: T.Tensor, batch: GraphBatch, params: GnnLayerParams) -> T.Tensor:
    """MLP((1 + eps) h_v + sum of neighbour rows); no activation on the MLP output."""
    _check_input(h, batch, params)
    agg = T.sparse_matmul(batch.adjacency, h)
    if params.learn_eps:
        own = h + T.mul(h, params.eps)
    elif params.eps is not None and params.eps.data[0] != 0.0:
        own = h * (1.0 + float(params.eps.data[0]))
    else:
        own = h
    z = own + agg
    w = params.weights
    hidden = T.relu(z @ w["w1"] + w["b1"])
    return hidden @ w["w2"] + params.bias


def sage_layer(h: T.Tensor, batch: GraphBatch, params: GnnLayerParams) -> T.Tensor:
    """ReLU(W_self h_v + W_neigh mean(neighbours) + b); empty neighbourhoods contribute zero."""
    _check_input(h, batch, params)
    neigh = T.sparse_matmul(batch.mean_operator, h)
    w = params.weights
    return T.relu(h @ w["w_self"] + neigh @ w["w_neigh"] + params.bias)


_LAYER_FNS = {"gcn": gcn_layer, "gin": gin_layer, "sage": sage_layer}


def apply_layer(h: T.Tensor, batch: GraphBatch, params: GnnLayerParams) -> T.Tensor:
    out = _LAYER_FNS[params.kind](h, batch, params)
    # gin leaves its MLP output linear; the stack applies the activation
    return T.relu(out) if params.kind == "gin" else out


def readout(node_h: T.Tensor, batch: GraphBatch, mode: str = "sum") -> T.Tensor:
    if node_h.shape[0] != batch.num_nodes:
        raise DimensionError(f"readout expects {batch.num_nodes} node rows, got {node_h.shape[0]}")
    if mode == "sum":
        return T.segment_sum(node_h, batch.graph_indicator, batch.batch_size)
    if mode == "mean":
        counts = np.maximum(batch.node_counts(), 1)
        return T.scale_rows(T.segment_sum(node_h, batch.graph_indicator, batch.batch_size), 1.0 / counts)
    if mode == "max":
        return T.segment_max(node_h, batch.graph_indicator, batch.batch_size)
    raise ConfigurationError(f"unknown readout {mode!r}", field="readout")


def encode_graphs(batch: GraphBatch, params: GraphEncoderParams, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Graph embeddings ``[batch_size x d_out]``, one row per graph in batch order."""
    h = batch.node_features
    if h.shape[1] != params.d_in:
        raise DimensionError(f"batch feature dim {h.shape[1]} != encoder input dim {params.d_in}")
    for layer in params.layers:
        h = apply_layer(h, batch, layer)
        h = T.dropout(h, params.dropout_rate, rng, training)
    return readout(h, batch, params.readout)
