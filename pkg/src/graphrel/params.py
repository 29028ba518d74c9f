"""Parameter initialisation and traversal helpers."""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from .tensor import Tensor


def glorot(d_in: int, d_out: int, rng: np.random.Generator) -> Tensor:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def named_tensors(obj, prefix: str = ""):
    """Yield ``(dotted_name, Tensor)`` for every tensor reachable from ``obj``.

    Walks dataclasses, dicts (sorted keys) and lists in a fixed order, so
    names are stable across runs.
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, dict):
        for key in sorted(obj):
            yield from named_tensors(obj[key], f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


def trainable(obj) -> list:
    return [t for _, t in named_tensors(obj) if t.requires_grad]


def checksum(obj) -> str:
    """SHA-256 over names, shapes and raw bytes of every tensor in ``obj``."""
    h = hashlib.sha256()
    for name, t in named_tensors(obj):
        h.update(name.encode())
        h.update(np.asarray(t.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def snapshot(obj) -> dict:
    return {name: t.data.copy() for name, t in named_tensors(obj)}


def restore(obj, state: dict) -> None:
    for name, t in named_tensors(obj):
        t.data = state[name].copy()
