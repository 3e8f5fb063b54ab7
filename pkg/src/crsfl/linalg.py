"""Dense/sparse vectors, the CRS1 wire format and byte accounting.

Dense vectors are plain ``float64`` numpy arrays. A :class:`SparseUpdate`
is the compressed payload a client uploads; on the wire it is::

    "CRS1" | codec u8 | dim u32 | count u32 | threshold f64 | count x (index u32 | value f32)

all little-endian, so a payload with ``n`` entries is ``21 + 8 n`` bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CRS1"
HEADER = struct.Struct("<4sBIId")
HEADER_BYTES = HEADER.size  # 21
ENTRY_BYTES = 8
DENSE_WEIGHT_BYTES = 4

_ENTRY_DTYPE = np.dtype([("index", "<u4"), ("value", "<f4")])


class Codec(enum.IntEnum):
    IDENTITY = 0
    CRS = 1
    MINMAX = 2
    GSPAR = 3
    TOPK = 4
    POISSON = 5


class MalformedPayload(ValueError):
    """A sparse update or its byte image violates the wire contract."""


class BadMagic(MalformedPayload):
    pass


class TruncatedPayload(MalformedPayload):
    pass


class IndexOutOfRange(MalformedPayload):
    pass


class NonIncreasingIndex(MalformedPayload):
    """Indices repeat or go backwards."""


class CountExceedsDim(MalformedPayload):
    pass


class NonFiniteValue(MalformedPayload):
    pass


def squared_l2(v, index=None):
    """Sum of squares of ``v``, or ``v[index]**2`` when an index is given."""
    v = np.asarray(v, dtype=np.float64)
    if index is not None:
        x = float(v[index])
        return x * x
    return float(np.dot(v, v))


@dataclass(frozen=True, eq=False)
class SparseUpdate:
    dim: int
    indices: np.ndarray
    values: np.ndarray
    threshold: float = 0.0
    codec: Codec = Codec.IDENTITY

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        val = np.array(self.values, dtype=np.float64).reshape(-1)
        dim = int(self.dim)
        if dim <= 0:
            raise MalformedPayload(f"dim must be positive, got {dim}")
        if idx.shape != val.shape:
            raise MalformedPayload("indices and values differ in length")
        if idx.size > dim:
            raise CountExceedsDim(f"{idx.size} entries for dim {dim}")
        if idx.size:
            if idx.min() < 0 or idx.max() >= dim:
                raise IndexOutOfRange(f"index outside [0, {dim})")
            if np.any(np.diff(idx) <= 0):
                raise NonIncreasingIndex("indices must be strictly increasing")
        if not np.all(np.isfinite(val)):
            raise NonFiniteValue("non-finite value in sparse update")
        if not (np.isfinite(self.threshold) and self.threshold >= 0.0):
            raise MalformedPayload(f"bad threshold {self.threshold!r}")
        idx.flags.writeable = False
        val.flags.writeable = False
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "threshold", float(self.threshold))
        object.__setattr__(self, "codec", Codec(self.codec))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __len__(self):
        return self.nnz

    def __eq__(self, other):
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.codec == other.codec
            and self.threshold == other.threshold
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    @classmethod
    def from_dense(cls, v, codec=Codec.IDENTITY, threshold=0.0):
        """All nonzero coordinates of ``v``, unscaled."""
        v = np.asarray(v, dtype=np.float64)
        idx = np.flatnonzero(v)
        return cls(v.size, idx, v[idx], threshold, codec)

    @classmethod
    def empty(cls, dim, codec=Codec.IDENTITY):
        return cls(dim, np.empty(0, np.int64), np.empty(0), 0.0, codec)


def densify(u: SparseUpdate) -> np.ndarray:
    out = np.zeros(u.dim)
    if u.nnz:
        if u.indices.max() >= u.dim:
            raise IndexOutOfRange("index outside dim")
        if np.any(np.diff(u.indices) <= 0):
            raise NonIncreasingIndex("duplicate index")
        out[u.indices] = u.values
    return out


def serialize(u: SparseUpdate) -> bytes:
    if u.nnz > u.dim:
        raise CountExceedsDim(f"{u.nnz} entries for dim {u.dim}")
    head = HEADER.pack(MAGIC, int(u.codec), u.dim, u.nnz, u.threshold)
    body = np.empty(u.nnz, dtype=_ENTRY_DTYPE)
    body["index"] = u.indices
    body["value"] = u.values
    return head + body.tobytes()


def deserialize(data: bytes) -> SparseUpdate:
    data = bytes(data)
    if len(data) < HEADER_BYTES:
        raise TruncatedPayload(f"{len(data)} bytes is shorter than the {HEADER_BYTES}-byte header")
    magic, codec, dim, count, threshold = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        codec = Codec(codec)
    except ValueError:
        raise MalformedPayload(f"unknown codec id {codec}") from None
    if dim == 0:
        raise MalformedPayload("dim must be positive")
    if count > dim:
        raise CountExceedsDim(f"{count} entries for dim {dim}")
    expected = HEADER_BYTES + ENTRY_BYTES * count
    if len(data) < expected:
        raise TruncatedPayload(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise MalformedPayload(f"{len(data) - expected} trailing bytes")
    body = np.frombuffer(data, dtype=_ENTRY_DTYPE, count=count, offset=HEADER_BYTES)
    idx = body["index"].astype(np.int64)
    if count and idx.max() >= dim:
        raise IndexOutOfRange(f"index {int(idx.max())} >= dim {dim}")
    if np.any(np.diff(idx) <= 0):
        raise NonIncreasingIndex("indices must be strictly increasing")
    return SparseUpdate(dim, idx, body["value"].astype(np.float64), threshold, codec)


def payload_bytes(u: SparseUpdate) -> int:
    return HEADER_BYTES + ENTRY_BYTES * u.nnz


def dense_broadcast_bytes(d: int) -> int:
    """Download cost of one dense model/update broadcast to one client."""
    return DENSE_WEIGHT_BYTES * int(d)


def narrow(u: SparseUpdate) -> SparseUpdate:
    """``u`` with values rounded to float32, i.e. what the server decodes."""
    return SparseUpdate(u.dim, u.indices, u.values.astype(np.float32).astype(np.float64),
                        u.threshold, u.codec)
