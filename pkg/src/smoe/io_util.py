"""Atomic file output and the package-wide seeded generator."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent PCG64 stream derived from a 64-bit ``seed``.

    Streams are split with ``numpy.random.SeedSequence``: ``make_rng(s, 0)``
    and ``make_rng(s, 1)`` are statistically independent and each is a pure
    function of its arguments.
    """
    seq = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=tuple(stream))
    return np.random.Generator(np.random.PCG64(seq))


# stream ids used across the package
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_EVAL = 2
STREAM_ROUTING = 3
STREAM_SHUFFLE = 4
