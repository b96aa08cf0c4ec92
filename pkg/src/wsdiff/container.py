"""Minimal binary container for arrays: magic, dims, one float64 aux field, float64 payload."""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np


def write_container(path, magic: bytes, dims: Sequence[int], aux: float, data: np.ndarray) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    dims = [int(d) for d in dims]
    payload = np.ascontiguousarray(data, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<d", float(aux)))
        fh.write(payload.tobytes())


def read_container(path, magic: bytes) -> tuple[list[int], float, np.ndarray]:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ValueError(f"bad magic: expected {magic!r}, found {got!r}")
        (ndim,) = struct.unpack("<I", fh.read(4))
        dims = list(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
        (aux,) = struct.unpack("<d", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return dims, aux, data
