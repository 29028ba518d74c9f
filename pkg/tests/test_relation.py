import numpy as np
import pytest

from graphrel import tensor as T
from graphrel.exceptions import ConfigurationError, DimensionError
from graphrel.params import named_tensors
from graphrel.relation import (attention, attention_weights, classify, init_classifier,
                               init_relation_encoder, init_relation_layer, multi_head_self_attention,
                               relation_encode)

from conftest import gradcheck


def np_softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_relation_layer(e, p):
    """Plain-numpy transformer block used as an oracle."""
    heads = []
    for wq, wk, wv in zip(p.w_q, p.w_k, p.w_v):
        q, k, v = e @ wq.data, e @ wk.data, e @ wv.data
        heads.append(np_softmax(q @ k.T / np.sqrt(q.shape[1])) @ v)
    msa = np.concatenate(heads, axis=1) @ p.w_o.data
    x1 = np_layer_norm(e + msa, p.ln1_gain.data, p.ln1_bias.data)
    ffn = np.maximum(x1 @ p.ffn_w1.data + p.ffn_b1.data, 0) @ p.ffn_w2.data + p.ffn_b2.data
    return np_layer_norm(x1 + ffn, p.ln2_gain.data, p.ln2_bias.data)


class TestAttention:
    def test_matches_formula(self, rng):
        q, k, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        out = attention(T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
        np.testing.assert_allclose(out, np_softmax(q @ k.T / np.sqrt(3)) @ v, rtol=1e-12)
        w = attention_weights(q, k)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            attention(T.Tensor(np.ones((3, 2))), T.Tensor(np.ones((3, 4))), T.Tensor(np.ones((3, 2))))

    def test_msa_per_head_oracle(self, rng):
        p = init_relation_layer(8, 2, rng)
        e = rng.normal(size=(6, 8))
        heads = [np_softmax((e @ wq.data) @ (e @ wk.data).T / 2.0) @ (e @ wv.data)
                 for wq, wk, wv in zip(p.w_q, p.w_k, p.w_v)]
        expected = np.concatenate(heads, 1) @ p.w_o.data
        np.testing.assert_allclose(multi_head_self_attention(T.Tensor(e), p).data, expected, rtol=1e-10)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigurationError, match="divide"):
            init_relation_layer(10, 4, rng)


class TestRelationEncoder:
    def test_block_oracle(self, rng):
        enc = init_relation_encoder(8, heads=2, num_layers=2, rng=rng)
        for layer in enc.layers:
            layer.ffn_b1.data[:] = rng.normal(size=16)
            layer.ln1_gain.data[:] = rng.uniform(0.5, 1.5, 8)
        e = rng.normal(size=(5, 8))
        expected = e
        for layer in enc.layers:
            expected = np_relation_layer(expected, layer)
        np.testing.assert_allclose(relation_encode(T.Tensor(e), enc).data, expected, rtol=1e-9, atol=1e-12)

    def test_zero_weights_pass_layer_norm_of_input(self, rng):
        enc = init_relation_encoder(8, heads=4, rng=rng)
        for name, t in named_tensors(enc):
            if "gain" not in name:
                t.data[:] = 0.0
        e = rng.normal(size=(4, 8))
        expected = np_layer_norm(np_layer_norm(e, 1, 0), 1, 0)
        np.testing.assert_allclose(relation_encode(T.Tensor(e), enc).data, expected, rtol=1e-10)

    def test_row_permutation_equivariance(self, rng):
        enc = init_relation_encoder(8, heads=2, num_layers=2, rng=rng)
        e = rng.normal(size=(7, 8))
        perm = rng.permutation(7)
        a = relation_encode(T.Tensor(e), enc).data
        b = relation_encode(T.Tensor(e[perm]), enc).data
        assert np.max(np.abs(a[perm] - b)) < 1e-9

    def test_rows_depend_on_other_graphs(self, rng):
        enc = init_relation_encoder(8, heads=2, rng=rng)
        e = rng.normal(size=(4, 8))
        e2 = e.copy()
        e2[3] += 1.0
        a = relation_encode(T.Tensor(e), enc).data
        b = relation_encode(T.Tensor(e2), enc).data
        assert np.max(np.abs(a[0] - b[0])) > 1e-6

    def test_single_graph_batch(self, rng):
        enc = init_relation_encoder(8, heads=2, rng=rng)
        assert relation_encode(T.Tensor(rng.normal(size=(1, 8))), enc).shape == (1, 8)

    def test_wrong_width(self, rng):
        enc = init_relation_encoder(8, heads=2, rng=rng)
        with pytest.raises(DimensionError):
            relation_encode(T.Tensor(np.ones((3, 6))), enc)

    def test_gradients(self, rng):
        enc = init_relation_encoder(8, heads=2, rng=rng)
        e = T.Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 8)))
        params = [e] + [t for _, t in named_tensors(enc)]
        assert gradcheck(lambda: T.total(T.mul(relation_encode(e, enc), w)), params) < 1e-4


class TestClassifier:
    def test_affine(self, rng):
        head = init_classifier(8, 3, rng)
        head.bias.data[:] = [1.0, 2.0, 3.0]
        x = rng.normal(size=(2, 8))
        np.testing.assert_allclose(classify(T.Tensor(x), head).data, x @ head.weight.data + [1, 2, 3])
        assert head.num_classes == 3
        with pytest.raises(DimensionError):
            classify(T.Tensor(np.ones((2, 7))), head)
