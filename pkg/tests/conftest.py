import os
from pathlib import Path

import numpy as np
import pytest

from graphrel import tensor as T

REPO = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("TUDATASET_ROOT", REPO / "data"))


def has_dataset(name):
    return (DATA_ROOT / name / f"{name}_A.txt").is_file()


def numeric_grad(f, tensor, h=1e-5):
    """Central differences of the scalar ``f()`` with respect to ``tensor.data``."""
    out = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return out


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build_loss, params, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build_loss()`` must rebuild the scalar loss from scratch (tensors
    read through the shared ``params``).
    """
    T.zero_grad(params)
    with T.Tape() as tape:
        loss = build_loss()
    T.backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def value():
        return float(build_loss().data)

    errors = [rel_error(a, numeric_grad(value, p, h)) for a, p in zip(analytic, params)]
    T.zero_grad(params)
    return max(errors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_tu(root, name, edges, indicator, labels, node_labels=None, attributes=None):
    d = Path(root) / name
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}_A.txt").write_text("".join(f"{u}, {v}\n" for u, v in edges))
    (d / f"{name}_graph_indicator.txt").write_text("".join(f"{g}\n" for g in indicator))
    (d / f"{name}_graph_labels.txt").write_text("".join(f"{y}\n" for y in labels))
    if node_labels is not None:
        (d / f"{name}_node_labels.txt").write_text("".join(f"{x}\n" for x in node_labels))
    if attributes is not None:
        (d / f"{name}_node_attributes.txt").write_text(
            "".join(", ".join(str(v) for v in row) + "\n" for row in attributes))
    return d


@pytest.fixture
def tiny_tu(tmp_path):
    """Triangle (graph 1) plus a single edge (graph 2), edges listed one way."""
    write_tu(tmp_path, "TINY", [(1, 2), (2, 3), (3, 1), (4, 5)], [1, 1, 1, 2, 2], [1, -1],
             node_labels=[0, 1, 0, 2, 2])
    return tmp_path


def micro_batch_model(seed=0, backbone="gin"):
    """3-graph batch and a full feedback model with d_g=8, h=2."""
    from graphrel.config import ModelConfig
    from graphrel.data import batch_graphs, generate_synthetic
    from graphrel.training import build_model

    config = ModelConfig(backbone=backbone, hidden=8, layers=2, heads=2, dropout=0.0, seed=seed)
    ds = generate_synthetic(4, seed)
    # scaled inputs keep sum-aggregated embeddings O(1) so the attention
    # softmax is not saturated and its q/k gradients are measurable
    batch = batch_graphs([g.with_features(0.1 * g.node_features) for g in ds.graphs[:3]])
    model = build_model(config, ds.feature_dim, 2, np.random.default_rng(seed))
    # small signed biases keep relu pre-activations off exact zero
    bias_rng = np.random.default_rng(seed + 1)
    for t in model.parameters():
        if t.ndim == 1:
            t.data[:] = bias_rng.uniform(-0.05, 0.05, t.shape)
    return config, batch, model


ACCEPTANCE_LINES = {}


def report_criterion(number, passed, detail):
    """Record the one-line verdict printed at the end of the session."""
    verdict = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES[number] = f"criterion {number}: {verdict}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
