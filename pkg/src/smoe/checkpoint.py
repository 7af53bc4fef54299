"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MXTF"                      magic
    u32                          format version (1)
    10 x u64                     ModelConfig fields in order: dim, n_layers,
                                 head_dim, hidden_dim, n_heads, n_kv_heads,
                                 context_len, vocab_size, num_experts,
                                 top_k_experts
    per tensor, in ``parameter_shapes`` order:
        u32                      rank
        rank x u64               dimensions
        prod(dims) x f32         values, row-major

Values are always stored as float32; loading yields float32 arrays unless a
different dtype is requested.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .io_util import atomic_write_bytes
from .model import ModelConfig, TransformerModel, parameter_shapes

MAGIC = b"MXTF"
VERSION = 1


def checkpoint_bytes(model: TransformerModel) -> bytes:
    cfg = model.config
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<10Q", *cfg.values())]
    for name, shape in parameter_shapes(cfg):
        arr = model.params[name]
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: TransformerModel, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def checkpoint_from_bytes(data: bytes, dtype=np.float32) -> TransformerModel:
    if data[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", data, off)
        off += 4
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig(*struct.unpack_from("<10Q", data, off))
        off += 80
        params = {}
        for name, shape in parameter_shapes(cfg):
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            if tuple(dims) != shape:
                raise FormatError(f"{name}: stored shape {dims} does not match config shape {shape}")
            count = int(np.prod(dims))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            params[name] = arr.astype(dtype)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after the last tensor")
    return TransformerModel(cfg, params)


def load_checkpoint(path: str | os.PathLike, dtype=np.float32) -> TransformerModel:
    return checkpoint_from_bytes(Path(path).read_bytes(), dtype)
