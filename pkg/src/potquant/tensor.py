"""Dense tensors, column-wise group layout, and the PTEN file format.

PTEN layout (little-endian)::

    magic   b"PTEN"
    u16     version (1)
    u8      dtype (0 = f32, 1 = f16)
    u8      pad (0)
    u32     ndim
    u64     dims[ndim]
    payload row-major scalars (f16 stored as raw half bits)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError

PTEN_MAGIC = b"PTEN"
PTEN_VERSION = 1

_DTYPES = {"f32": (0, np.dtype("<f4")), "f16": (1, np.dtype("<f2"))}
_DTYPE_BY_TAG = {tag: (name, dt) for name, (tag, dt) in _DTYPES.items()}


@dataclass(frozen=True)
class Tensor:
    """Immutable row-major array tagged f32 or f16."""

    data: np.ndarray
    dtype: str = "f32"

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        arr = np.asarray(self.data, dtype=_DTYPES[self.dtype][1])
        if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
            raise ValueError(f"dims must be a non-empty list of positive integers, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        arr = np.ascontiguousarray(arr)
        if arr is self.data:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self, dtype=np.float64) -> np.ndarray:
        return self.data.astype(dtype)


@dataclass(frozen=True)
class GroupLayout:
    """Groups of ``group_size`` consecutive rows inside each column.

    ``d_out`` counts rows and ``d_in`` columns; the last group in a column
    is shorter when ``group_size`` does not divide ``d_out``.
    """

    d_out: int
    d_in: int
    group_size: int

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.d_out < 1 or self.d_in < 1:
            raise ValueError("matrix dims must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in)

    @property
    def groups_per_column(self) -> int:
        return math.ceil(self.d_out / self.group_size)

    @property
    def num_groups(self) -> int:
        return self.groups_per_column * self.d_in

    def group_of_row(self, i: int) -> int:
        return i // self.group_size

    def row_slice(self, g: int) -> slice:
        start = g * self.group_size
        return slice(start, min(start + self.group_size, self.d_out))

    def expand(self, per_group: np.ndarray) -> np.ndarray:
        """Broadcast a (groups_per_column, d_in) grid to (d_out, d_in)."""
        return np.repeat(per_group, self.group_size, axis=0)[: self.d_out]

    def check(self, w: np.ndarray) -> None:
        if w.ndim != 2 or w.shape != self.shape:
            raise ValueError(f"matrix shape {w.shape} does not match layout {self.shape}")


def iter_groups(w, layout: GroupLayout) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield ``(group_index, column_index, subvector)`` column by column."""
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    layout.check(arr)
    for j in range(layout.d_in):
        for g in range(layout.groups_per_column):
            yield g, j, arr[layout.row_slice(g), j]


def padded_groups(w: np.ndarray, layout: GroupLayout) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(groups, mask)`` shaped (d_in, groups_per_column, G).

    Ragged tails are zero-padded; ``mask`` marks the real elements.
    """
    layout.check(w)
    G, ng = layout.group_size, layout.groups_per_column
    pad = ng * G - layout.d_out
    wt = np.asarray(w, dtype=np.float64).T
    mask = np.ones_like(wt, dtype=bool)
    if pad:
        wt = np.pad(wt, ((0, 0), (0, pad)))
        mask = np.pad(mask, ((0, 0), (0, pad)))
    return wt.reshape(layout.d_in, ng, G), mask.reshape(layout.d_in, ng, G)


def write_tensor(path, t: Tensor) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> Tensor:
    return tensor_from_bytes(Path(path).read_bytes())


def tensor_to_bytes(t: Tensor) -> bytes:
    tag, dt = _DTYPES[t.dtype]
    header = PTEN_MAGIC + struct.pack("<HBBI", PTEN_VERSION, tag, 0, len(t.dims))
    header += struct.pack(f"<{len(t.dims)}Q", *t.dims)
    return header + t.data.astype(dt, copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 12:
        raise FormatError("truncated header")
    if buf[:4] != PTEN_MAGIC:
        raise FormatError("bad magic")
    version, tag, _pad, ndim = struct.unpack_from("<HBBI", buf, 4)
    if version != PTEN_VERSION:
        raise FormatError(f"unsupported version {version}")
    if tag not in _DTYPE_BY_TAG:
        raise FormatError(f"unknown dtype tag {tag}")
    if ndim == 0:
        raise FormatError("empty dims list")
    off = 12 + 8 * ndim
    if len(buf) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 12)
    if any(d == 0 for d in dims):
        raise FormatError("zero-length dimension")
    name, dt = _DTYPE_BY_TAG[tag]
    count = math.prod(dims)
    nbytes = count * dt.itemsize
    if len(buf) - off < nbytes:
        raise FormatError("truncated payload")
    if len(buf) - off > nbytes:
        raise FormatError("trailing bytes after payload")
    data = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    try:
        return Tensor(data, name)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
