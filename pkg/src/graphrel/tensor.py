"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Nothing is recorded outside a tape,
which makes inference free of bookkeeping::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = total(relu(x @ w))
    backward(loss, tape)
    w.grad  # d(loss)/dw

Gradients accumulate across ``backward`` calls until :func:`zero_grad`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import ContractError, DimensionError, DomainError, ParameterError

_node_ids = itertools.count()
_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "is_leaf", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.is_leaf = True
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a constant is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in forward order, so the list is topologically
    sorted by construction. Use as a context manager to make it active.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.is_leaf = False
    out.tape = None
    tape = current_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.records.append(Record(kind, tuple(inputs), out, backward_fn))
        out.tape = tape
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss.tape
    if tape is None or not loss.requires_grad:
        raise ContractError("loss was not produced on a tape with trainable inputs")
    pending = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(rec.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
            elif inp.node_id in pending:
                pending[inp.node_id] = pending[inp.node_id] + gi
            else:
                pending[inp.node_id] = gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _shape_error(name, a, b):
    return DimensionError(f"{name}: incompatible shapes {tuple(a)} and {tuple(b)}")


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def grad(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _emit("matmul", A @ B, (a, b), grad)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def sparse_matmul(s: sp.spmatrix, a: Tensor) -> Tensor:
    """Multiply a constant sparse matrix into a dense tensor."""
    if a.ndim != 2 or s.shape[1] != a.shape[0]:
        raise _shape_error("sparse_matmul", s.shape, a.shape)
    s = sp.csr_matrix(s)
    return _emit("sparse_matmul", np.asarray(s @ a.data), (a,),
                 lambda g: (np.asarray(s.T @ g),))


# -- elementwise ----------------------------------------------------------


def _check_broadcast(name, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return
    # trailing row vector (d,) or a single scalar-like (1,) broadcast onto a
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] in (a.shape[-1], 1):
        return
    if b.ndim == 0:
        return
    raise _shape_error(name, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    reduced = g.reshape(-1, g.shape[-1]).sum(axis=0)
    if shape == (1,) and reduced.shape != (1,):
        return np.array([reduced.sum()])
    return reduced.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def grad(g):
        return (g if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", a.data + b.data, (a, b), grad)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def grad(g):
        return (g if a.requires_grad else None,
                -_unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("sub", a.data - b.data, (a, b), grad)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def grad(g):
        return (g * B if a.requires_grad else None,
                _unbroadcast(g * A, b.shape) if b.requires_grad else None)

    return _emit("mul", A * B, (a, b), grad)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def scale_rows(a: Tensor, w: np.ndarray) -> Tensor:
    """Multiply row i of ``a`` by the constant ``w[i]``."""
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    if a.ndim != 2 or w.shape[0] != a.shape[0]:
        raise _shape_error("scale_rows", a.shape, w.shape)
    return _emit("scale_rows", a.data * w, (a,), lambda g: (g * w,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _emit("relu", out, (a,), lambda g: (g * (out > 0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    A = a.data
    return _emit("log", np.log(A), (a,), lambda g: (g / A,))


def detach(a: Tensor) -> Tensor:
    """Constant copy of ``a``; gradients stop here."""
    return Tensor(a.data)


# -- reductions and reshaping ----------------------------------------------


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, float(g) / n),))


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping a trailing axis of length one."""
    shape = a.shape
    return _emit("row_sum", a.data.sum(axis=-1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad(g):
        return tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), grad)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", a.data[:, start:stop].copy(), (a,), grad)


# -- numerically stable softmax family -----------------------------------


def _check_temperature(temperature):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    z = a.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return ((y * (g - (g * y).sum(axis=1, keepdims=True))) / temperature,)

    return _emit("softmax_rows", y, (a,), grad)


def log_softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    z = a.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def grad(g):
        return ((g - y * g.sum(axis=1, keepdims=True)) / temperature,)

    return _emit("log_softmax_rows", out, (a,), grad)


# -- graph reductions -------------------------------------------------------


def segment_matrix(segment_ids, num_segments: int, n: Optional[int] = None) -> sp.csr_matrix:
    ids = np.asarray(segment_ids, dtype=np.int64)
    n = len(ids) if n is None else n
    if len(ids) and (ids.min() < 0 or ids.max() >= num_segments):
        bad = ids[(ids < 0) | (ids >= num_segments)][0]
        raise IndexError(f"segment id {bad} outside [0, {num_segments})")
    return sp.csr_matrix((np.ones(len(ids)), (ids, np.arange(n))), shape=(num_segments, n))


def segment_sum(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Row-wise sum of ``values`` grouped by ``segment_ids``; empty segments are zero."""
    if len(segment_ids) != values.shape[0]:
        raise _shape_error("segment_sum", values.shape, (len(segment_ids),))
    return sparse_matmul(segment_matrix(segment_ids, num_segments, values.shape[0]), values)


def segment_max(values: Tensor, segment_ids, num_segments: int) -> Tensor:
    ids = np.asarray(segment_ids, dtype=np.int64)
    segment_matrix(ids, num_segments, values.shape[0])  # range check
    d = values.shape[1]
    out = np.full((num_segments, d), -np.inf)
    np.maximum.at(out, ids, values.data)
    hit = values.data == out[ids]
    # first arg-max per segment/column receives the gradient
    order = np.argsort(ids, kind="stable")
    winner = np.zeros_like(hit)
    seen = np.zeros((num_segments, d), dtype=bool)
    for row in order:
        take = hit[row] & ~seen[ids[row]]
        winner[row] = take
        seen[ids[row]] |= take
    out[np.isinf(out)] = 0.0

    def grad(g):
        return (winner * g[ids],)

    return _emit("segment_max", out, (values,), grad)


# -- normalisation and regularisation --------------------------------------


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if not eps > 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", a.shape, gain.shape)
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data

    def grad(g):
        gh = g * G
        ga = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (ga if a.requires_grad else None,
                (g * xhat).sum(axis=0) if gain.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _emit("layer_norm", xhat * G + bias.data, (a, gain, bias), grad)


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = rng.random(a.shape, dtype=np.float32) >= rate
    factor = 1.0 / (1.0 - rate)
    out = a.data * keep
    out *= factor
    return _emit("dropout", out, (a,), lambda g: (g * keep * factor,))
