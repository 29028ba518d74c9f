"""Batch-level self-attention over graph embeddings, plus linear heads.

Rows of the input are graphs in the current mini-batch; attention mixes
information across them, so the output row for one graph depends on the
other graphs it was batched with. No positional signal is used, which
keeps the encoder equivariant to row permutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, DimensionError
from .params import glorot, ones, zeros


@dataclass
class RelationLayerParams:
    w_q: list
    w_k: list
    w_v: list
    w_o: T.Tensor
    ffn_w1: T.Tensor
    ffn_b1: T.Tensor
    ffn_w2: T.Tensor
    ffn_b2: T.Tensor
    ln1_gain: T.Tensor
    ln1_bias: T.Tensor
    ln2_gain: T.Tensor
    ln2_bias: T.Tensor

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def d_g(self) -> int:
        return self.w_o.shape[1]


@dataclass
class RelationEncoderParams:
    layers: list
    dropout_rate: float = 0.0
    ln_eps: float = 1e-5


@dataclass
class ClassifierParams:
    weight: T.Tensor
    bias: T.Tensor

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]


def init_relation_layer(d_g: int, heads: int, rng: np.random.Generator) -> RelationLayerParams:
    if heads < 1 or d_g % heads:
        raise ConfigurationError(f"heads={heads} must divide d_g={d_g}", field="heads")
    d_k = d_g // heads
    return RelationLayerParams(
        w_q=[glorot(d_g, d_k, rng) for _ in range(heads)],
        w_k=[glorot(d_g, d_k, rng) for _ in range(heads)],
        w_v=[glorot(d_g, d_k, rng) for _ in range(heads)],
        w_o=glorot(heads * d_k, d_g, rng),
        ffn_w1=glorot(d_g, 2 * d_g, rng),
        ffn_b1=zeros(2 * d_g),
        ffn_w2=glorot(2 * d_g, d_g, rng),
        ffn_b2=zeros(d_g),
        ln1_gain=ones(d_g), ln1_bias=zeros(d_g),
        ln2_gain=ones(d_g), ln2_bias=zeros(d_g),
    )


def init_relation_encoder(d_g: int, heads: int = 4, num_layers: int = 1,
                          rng: Optional[np.random.Generator] = None,
                          dropout_rate: float = 0.0) -> RelationEncoderParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    return RelationEncoderParams([init_relation_layer(d_g, heads, rng) for _ in range(num_layers)],
                                 dropout_rate)


def init_classifier(d_g: int, num_classes: int, rng: np.random.Generator) -> ClassifierParams:
    return ClassifierParams(glorot(d_g, num_classes, rng), zeros(num_classes))


def attention(q: T.Tensor, k: T.Tensor, v: T.Tensor) -> T.Tensor:
    """softmax(q k^T / sqrt(d_k)) v."""
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not align")
    logits = (q @ k.T) * (1.0 / np.sqrt(q.shape[1]))
    return T.softmax_rows(logits, 1.0) @ v


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic weight matrix used by :func:`attention` (plain arrays)."""
    z = q @ k.T / np.sqrt(q.shape[1])
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def multi_head_self_attention(e: T.Tensor, params: RelationLayerParams) -> T.Tensor:
    if e.ndim != 2 or e.shape[1] != params.w_q[0].shape[0]:
        raise DimensionError(f"MSA expects [B x {params.w_q[0].shape[0]}] input, got {e.shape}")
    heads = [attention(e @ wq, e @ wk, e @ wv)
             for wq, wk, wv in zip(params.w_q, params.w_k, params.w_v)]
    return T.concat_cols(heads) @ params.w_o


def relation_layer(e: T.Tensor, params: RelationLayerParams, ln_eps: float = 1e-5,
                   dropout_rate: float = 0.0, rng=None, training: bool = False) -> T.Tensor:
    """Post-norm transformer block: LN(e + MSA(e)) then LN(x + FFN(x))."""
    msa = T.dropout(multi_head_self_attention(e, params), dropout_rate, rng, training)
    x1 = T.layer_norm(e + msa, params.ln1_gain, params.ln1_bias, ln_eps)
    hidden = T.relu(x1 @ params.ffn_w1 + params.ffn_b1)
    ffn = T.dropout(hidden @ params.ffn_w2 + params.ffn_b2, dropout_rate, rng, training)
    return T.layer_norm(x1 + ffn, params.ln2_gain, params.ln2_bias, ln_eps)


def relation_encode(e: T.Tensor, params: RelationEncoderParams, training: bool = False,
                    rng=None) -> T.Tensor:
    if e.shape[0] < 1:
        raise DimensionError("relation_encode needs at least one graph")
    out = e
    for layer in params.layers:
        out = relation_layer(out, layer, params.ln_eps, params.dropout_rate, rng, training)
    return out


def classify(x: T.Tensor, head: ClassifierParams) -> T.Tensor:
    """Affine logits; the loss applies softmax."""
    if x.ndim != 2 or x.shape[1] != head.weight.shape[0]:
        raise DimensionError(f"classifier expects [B x {head.weight.shape[0]}], got {x.shape}")
    return x @ head.weight + head.bias
