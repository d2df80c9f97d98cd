"""Named, ordered parameter collections and their binary checkpoint format.

Checkpoint layout (little-endian throughout): magic ``TSDT1``, u32 parameter
count, then per parameter a u16 name length, the UTF-8 name, a u8 rank, one
u32 per dimension, and the raw float32 payload.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from typing import Iterator, Tuple

import numpy as np

from .tensor import Tensor

MAGIC = b"TSDT1"


class CheckpointError(Exception):
    pass


class ParameterSet:
    """Insertion-ordered mapping of names to gradient-carrying Tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data, dtype=np.float32) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=dtype), requires_grad=True, dtype=dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[...] = 0

    def clone(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), dtype=t.data.dtype)
        return out

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype), dtype=dtype)
        return out

    def shapes_match(self, other: "ParameterSet") -> bool:
        if self.names() != other.names():
            return False
        return all(self[n].shape == other[n].shape for n in self.names())

    def copy_data_from(self, other: "ParameterSet") -> None:
        if not self.shapes_match(other):
            raise ValueError("parameter sets have different names or shapes")
        for name, t in self._params.items():
            t.data[...] = other[name].data

    def flat_data(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])


def save_checkpoint(params: ParameterSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise CheckpointError(f"parameter name too long: {name[:32]}...")
            if t.data.ndim > 0xFF:
                raise CheckpointError(f"parameter rank {t.data.ndim} exceeds format limit")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("B", t.data.ndim))
            for d in t.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:5]!r}, expected {MAGIC!r}")
    off = 5

    def need(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", need(4, "parameter count"))
    params = ParameterSet()
    for k in range(count):
        (nlen,) = struct.unpack("<H", need(2, f"name length of parameter {k}"))
        name = need(nlen, f"name of parameter {k}").decode("utf-8")
        (rank,) = struct.unpack("B", need(1, f"rank of {name}"))
        dims = tuple(struct.unpack("<I", need(4, f"dim of {name}"))[0] for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        raw = need(4 * size, f"data of {name}")
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        params.add(name, data)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes after last parameter")
    return params
