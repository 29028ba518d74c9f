"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian)::

    magic      4 bytes   b"GRCK"
    version    uint32    1
    meta_len   uint32    length of the metadata block
    meta       bytes     UTF-8 JSON object (model config, input dim, classes, ...)
    count      uint32    number of tensors
    count times:
        name_len  uint16
        name      bytes  UTF-8 dotted parameter name
        ndim      uint8
        dims      uint32 * ndim
        data      float64 * prod(dims), row-major
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig
from .exceptions import FormatError
from .params import named_tensors
from .training import FeedbackModel, build_model

MAGIC = b"GRCK"
VERSION = 1


def write_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            array = np.ascontiguousarray(array, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", array.ndim))
            fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
            fh.write(array.tobytes())


def read_tensors(path):
    """Return ``(tensors, meta)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", path)
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path)
    pos = 12
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}", path) from None
    return tensors, meta


def save_model(path, model: FeedbackModel, config: ModelConfig, extra: dict | None = None) -> None:
    meta = {"config": config.to_dict(), "d_in": model.encoder.d_in, "num_classes": model.num_classes}
    meta.update(extra or {})
    write_tensors(path, {name: t.data for name, t in named_tensors(model)}, meta)


def load_model(path):
    """Rebuild a model from a checkpoint; returns ``(model, config, meta)``."""
    tensors, meta = read_tensors(path)
    config = ModelConfig.from_dict(meta["config"])
    model = build_model(config, meta["d_in"], meta["num_classes"])
    for name, t in named_tensors(model):
        if name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {name}", path)
        if tensors[name].shape != t.shape:
            raise FormatError(f"tensor {name} has shape {tensors[name].shape}, expected {t.shape}", path)
        t.data = tensors[name]
    return model, config, meta
