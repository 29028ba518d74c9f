import math

import numpy as np
import pytest

from graphrel import tensor as T
from graphrel.config import LossWeights, ModelConfig
from graphrel.data import batch_graphs, generate_synthetic, stratified_folds
from graphrel.exceptions import ConfigurationError, ContractError, DimensionError, DivergenceError
from graphrel.params import checksum, named_tensors, restore, snapshot, trainable
from graphrel.training import (Adam, EarlyStopping, build_model, classification_loss, distill_loss,
                               fit_model, forward_losses, graph_logits, hint_loss, infer, lr_schedule,
                               total_loss, train_fold, train_step)

from conftest import gradcheck, micro_batch_model


def np_log_softmax(z):
    z = z - z.max(1, keepdims=True)
    return z - np.log(np.exp(z).sum(1, keepdims=True))


class TestLosses:
    def test_distill_point_value(self):
        g = T.Tensor(np.log([[0.9, 0.1]]))
        r = T.Tensor(np.log([[0.5, 0.5]]))
        # 0.9 ln 1.8 + 0.1 ln 0.2
        assert abs(float(distill_loss(g, r, 1.0).data) - 0.3681) <= 1e-4

    def test_uniform_cross_entropy_is_ln2(self):
        assert abs(float(classification_loss(T.Tensor(np.zeros((3, 2))), [0, 1, 1]).data) - math.log(2)) <= 1e-10

    def test_total_loss_arithmetic(self):
        w = LossWeights(alpha=0.3, beta=1e-5)
        assert abs(float(total_loss(1.2, 1.0, 0.4, 50.0, w).data) - 0.9405) <= 1e-12

    def test_total_loss_disabled_terms(self):
        w = LossWeights(alpha=0.3, use_distill=False, use_hint=False)
        assert abs(float(total_loss(1.2, 1.0, 0.4, 50.0, w).data) - 0.66) <= 1e-12

    def test_cross_entropy_oracle(self, rng):
        z = rng.normal(size=(5, 3))
        y = np.array([0, 2, 1, 1, 0])
        expected = -np.mean(np_log_softmax(z)[np.arange(5), y])
        assert abs(float(classification_loss(T.Tensor(z), y).data) - expected) < 1e-12

    def test_cross_entropy_bad_labels(self):
        with pytest.raises(ContractError):
            classification_loss(T.Tensor(np.zeros((2, 2))), [0, 2])

    def test_distill_oracle_and_t_squared(self, rng):
        g, r = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        lp, lq = np_log_softmax(g / 3), np_log_softmax(r / 3)
        expected = np.mean((np.exp(lp) * (lp - lq)).sum(1))
        assert abs(float(distill_loss(T.Tensor(g), T.Tensor(r), 3.0).data) - expected) < 1e-12
        t2 = float(distill_loss(T.Tensor(g), T.Tensor(r), 3.0, t_squared=True).data)
        assert abs(t2 - 9 * expected) < 1e-11

    def test_distill_nonnegative_and_zero_on_equal(self, rng):
        for _ in range(20):
            g, r = rng.normal(size=(3, 4)) * 5, rng.normal(size=(3, 4)) * 5
            assert float(distill_loss(T.Tensor(g), T.Tensor(r), 2.0).data) >= -1e-15
        assert abs(float(distill_loss(T.Tensor(g), T.Tensor(g), 2.0).data)) < 1e-15

    def test_distill_shape_mismatch(self):
        with pytest.raises(DimensionError):
            distill_loss(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((2, 3))), 1.0)

    def test_hint_oracle(self, rng):
        e, r = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        expected = np.mean(((e - r) ** 2).sum(1))
        assert abs(float(hint_loss(T.Tensor(e), T.Tensor(r)).data) - expected) < 1e-12

    def test_total_loss_is_linear_in_each_part(self):
        w = LossWeights(alpha=0.2, beta=0.01)
        base = float(total_loss(1, 1, 1, 1, w).data)
        assert abs(float(total_loss(2, 1, 1, 1, w).data) - base - 0.2) < 1e-12
        assert abs(float(total_loss(1, 1, 2, 1, w).data) - base - 0.8) < 1e-12
        assert abs(float(total_loss(1, 1, 1, 2, w).data) - base - 0.01) < 1e-12

    def test_loss_weight_validation(self):
        for bad in (dict(alpha=0.0), dict(alpha=1.5), dict(beta=-1.0), dict(temperature=0.0)):
            with pytest.raises(ConfigurationError):
                LossWeights(**bad)


class TestFeedbackGradients:
    @pytest.mark.parametrize("backbone", ["gcn", "gin", "sage"])
    @pytest.mark.parametrize("beta", [1e-5, 0.5])
    def test_full_loss_gradcheck(self, backbone, beta):
        config, batch, model = micro_batch_model(0, backbone)
        w = config.replace(beta=beta).loss_weights
        err = gradcheck(lambda: forward_losses(batch, model, w, training=False)[0], model.parameters())
        assert err < 1e-3

    def test_a1_with_detached_relation_reduces_to_backbone(self):
        config, batch, model = micro_batch_model(1)
        w = config.replace(use_distill=False, use_hint=False).loss_weights
        with T.Tape() as tape:
            loss, _, _ = forward_losses(batch, model, w, training=False, detach_relation=True)
        T.backward(loss, tape)
        a1 = [t.grad.copy() for t in trainable(model.encoder)]
        T.zero_grad(model.parameters())
        with T.Tape() as tape:
            ce = classification_loss(forward_losses(batch, model, w, training=False)[2], batch.labels)
        T.backward(ce, tape)
        for g1, g0 in zip(a1, [t.grad for t in trainable(model.encoder)]):
            np.testing.assert_allclose(g1, w.alpha * g0, rtol=1e-10, atol=1e-15)

    def test_plain_backbone_has_only_graph_loss(self):
        config, batch, _ = micro_batch_model(2)
        model = build_model(config.replace(relating_up=False), 3, 2)
        assert model.relation is None
        loss, parts, _ = forward_losses(batch, model, config.loss_weights, training=False)
        assert set(parts) == {"class_g"}
        assert loss is parts["class_g"]


class TestOptimiser:
    def test_adam_first_step_is_lr_sign(self):
        p = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0, 1e-3])
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], atol=1e-6)
        assert p.grad is None

    def test_adam_zero_lr_and_missing_grad(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        q = T.Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(3)
        Adam([p, q], lr=0.0).step()
        np.testing.assert_array_equal(p.data, 1.0)
        np.testing.assert_array_equal(q.data, 1.0)

    def test_adam_matches_reference(self, rng):
        p = T.Tensor(rng.normal(size=4), requires_grad=True)
        x = p.data.copy()
        m = v = np.zeros(4)
        opt = Adam([p], lr=0.05)
        for t in range(1, 6):
            g = rng.normal(size=4)
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)

    def test_lr_schedule(self):
        assert lr_schedule(0, 0.01) == 0.01
        assert lr_schedule(49, 0.01) == 0.01
        assert lr_schedule(50, 0.01) == 0.005
        assert lr_schedule(149, 0.01) == 0.0025
        with pytest.raises(ContractError):
            lr_schedule(-1, 0.01)


class TestEarlyStopping:
    def test_first_best_tie_break(self):
        s = EarlyStopping(patience=3, max_epochs=100)
        for epoch, acc in enumerate([0.5, 0.7, 0.7, 0.6]):
            assert not s.update(epoch, acc)
        assert s.best_epoch == 1
        assert s.update(4, 0.7)  # three epochs without strict improvement

    def test_max_epochs(self):
        s = EarlyStopping(patience=100, max_epochs=3)
        assert [s.update(e, e / 10) for e in range(3)] == [False, False, True]

    def test_snapshot_restore_checksum(self, rng):
        _, _, model = micro_batch_model(0)
        before = checksum(model)
        state = snapshot(model)
        for t in model.parameters():
            t.data += 1.0
        assert checksum(model) != before
        restore(model, state)
        assert checksum(model) == before


class TestTrainLoop:
    @pytest.fixture(scope="class")
    @staticmethod
    def synthetic():
        return generate_synthetic(80, seed=0)

    def test_train_step_reduces_loss_and_fits(self, synthetic):
        config = ModelConfig(hidden=16, layers=2, heads=2, dropout=0.0, batch_size=80, seed=0)
        model = build_model(config, 3, 2)
        opt = Adam(model.parameters(), lr=0.01)
        batch = batch_graphs(synthetic.graphs)
        rng = np.random.default_rng(0)
        first = train_step(batch, model, config.loss_weights, opt, rng)
        for _ in range(60):
            last = train_step(batch, model, config.loss_weights, opt, rng)
        assert last.loss < first.loss
        assert np.mean(infer(synthetic.graphs, model) == synthetic.labels) >= 0.95

    def test_divergence_raises(self, synthetic):
        config = ModelConfig(hidden=8, layers=1, heads=2, dropout=0.0)
        model = build_model(config, 3, 2)
        model.head_graph.weight.data[0, 0] = np.nan
        with pytest.raises(DivergenceError) as info:
            train_step(batch_graphs(synthetic.graphs[:4]), model, config.loss_weights,
                       Adam(model.parameters()), np.random.default_rng(0))
        assert info.value.component in ("total", "class_g")

    def test_fit_restores_best_epoch(self, synthetic):
        config = ModelConfig(hidden=8, layers=2, heads=2, max_epochs=8, patience=100, batch_size=32)
        model = build_model(config, 3, 2)
        res = fit_model(model, synthetic.graphs[:60], config, synthetic.graphs[60:])
        assert res.epochs_run == 8 and len(res.val_accuracy_curve) == 8
        assert res.best_epoch == int(np.argmax(res.val_accuracy_curve))
        assert res.evaluated_checksum == checksum(model)

    def test_train_fold_deterministic(self, synthetic):
        config = ModelConfig(hidden=8, layers=2, heads=2, max_epochs=4, batch_size=32)
        fold = stratified_folds(synthetic, 5, 0)[1]
        a, b = train_fold(fold, synthetic, config), train_fold(fold, synthetic, config)
        assert a.evaluated_checksum == b.evaluated_checksum
        assert (a.best_epoch, a.val_accuracy, a.test_accuracy) == (b.best_epoch, b.val_accuracy, b.test_accuracy)


class TestInference:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained():
        ds = generate_synthetic(60, seed=5)
        config = ModelConfig(hidden=16, layers=2, heads=2, max_epochs=3, batch_size=16)
        model = build_model(config, 3, 2)
        fit_model(model, ds.graphs, config)
        return ds, model

    def test_batch_size_independence(self, trained):
        ds, model = trained
        ref = infer(ds.graphs, model, 128)
        for bs in (1, 7, 32):
            np.testing.assert_array_equal(infer(ds.graphs, model, bs), ref)

    def test_logits_independent_of_batch_composition(self, trained):
        ds, model = trained
        a = graph_logits(ds.graphs, model.encoder, model.head_graph, 60)
        b = graph_logits(ds.graphs, model.encoder, model.head_graph, 1)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_relation_branch_removal(self, trained):
        ds, model = trained
        before = graph_logits(ds.graphs, model.encoder, model.head_graph)
        saved = snapshot(model)
        for t in [t for _, t in named_tensors(model.relation)] + [t for _, t in named_tensors(model.head_relation)]:
            t.data[:] = 0.0
        after = graph_logits(ds.graphs, model.encoder, model.head_graph)
        restore(model, saved)
        assert np.array_equal(before, after)
        np.testing.assert_array_equal(infer(ds.graphs, model), infer(ds.graphs, model.inference_part()))

    def test_feature_dim_mismatch(self, trained):
        _, model = trained
        bad = [g.with_features(np.ones((g.num_nodes, 5))) for g in generate_synthetic(4, 0).graphs]
        with pytest.raises(ContractError, match="feature_dim"):
            infer(bad, model)
