import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crsfl.linalg import (
    BadMagic, Codec, CountExceedsDim, IndexOutOfRange, MalformedPayload, NonIncreasingIndex,
    SparseUpdate, TruncatedPayload, dense_broadcast_bytes, densify, deserialize, payload_bytes,
    serialize, squared_l2,
)


@pytest.mark.parametrize("v, expected", [
    ([0.0, 0.0, 0.0], 0.0),
    ([3.0, 4.0], 25.0),
    ([1.5, -2.0, 0.25], 6.3125),
])
def test_squared_l2(v, expected):
    assert squared_l2(v) == expected


def test_squared_l2_single_coordinate():
    assert squared_l2([1.5, -2.0, 0.25], 1) == 4.0


def test_densify_examples():
    assert densify(SparseUpdate.empty(4)).tolist() == [0, 0, 0, 0]
    assert densify(SparseUpdate(3, [1], [5.0])).tolist() == [0, 5.0, 0]
    assert densify(SparseUpdate(5, [0, 4], [1.0, -2.0])).tolist() == [1.0, 0, 0, 0, -2.0]


@pytest.mark.parametrize("indices, exc", [
    ([2, 2], NonIncreasingIndex),
    ([3, 1], NonIncreasingIndex),
    ([5], IndexOutOfRange),
    ([-1], IndexOutOfRange),
])
def test_invalid_updates_rejected(indices, exc):
    with pytest.raises(exc):
        SparseUpdate(5, indices, np.ones(len(indices)))


def test_non_finite_value_rejected():
    with pytest.raises(MalformedPayload):
        SparseUpdate(3, [0], [np.nan])


def test_sparse_update_is_immutable():
    u = SparseUpdate(3, [1], [2.0])
    with pytest.raises(ValueError):
        u.values[0] = 1.0


def test_header_sizes():
    assert len(serialize(SparseUpdate.empty(10))) == 21
    u = SparseUpdate(10, [1, 4, 9], [1.0, 2.0, 3.0], 0.5, Codec.CRS)
    assert len(serialize(u)) == 45
    assert payload_bytes(u) == 45
    assert dense_broadcast_bytes(100) == 400


def test_layout_is_little_endian():
    u = SparseUpdate(300, [7], [1.5], 0.25, Codec.TOPK)
    raw = serialize(u)
    assert raw[:4] == b"CRS1"
    assert raw[4] == 4
    assert struct.unpack("<IId", raw[5:21]) == (300, 1, 0.25)
    assert struct.unpack("<If", raw[21:]) == (7, 1.5)


def test_round_trip_empty():
    u = SparseUpdate.empty(10, Codec.POISSON)
    assert deserialize(serialize(u)) == u


def test_truncated_header():
    with pytest.raises(TruncatedPayload):
        deserialize(b"CRS1\x01\x00")


def test_truncated_body():
    raw = serialize(SparseUpdate(10, [1, 2], [1.0, 2.0]))
    with pytest.raises(TruncatedPayload):
        deserialize(raw[:-1])


def test_duplicate_index_payload():
    head = struct.pack("<4sBIId", b"CRS1", 1, 10, 2, 0.0)
    body = struct.pack("<IfIf", 2, 1.0, 2, 1.0)
    with pytest.raises(NonIncreasingIndex):
        deserialize(head + body)


def test_index_out_of_range_payload():
    head = struct.pack("<4sBIId", b"CRS1", 1, 3, 1, 0.0)
    with pytest.raises(IndexOutOfRange):
        deserialize(head + struct.pack("<If", 3, 1.0))


def test_count_exceeding_dim_payload():
    head = struct.pack("<4sBIId", b"CRS1", 1, 1, 2, 0.0)
    with pytest.raises(CountExceedsDim):
        deserialize(head + struct.pack("<IfIf", 0, 1.0, 1, 1.0))


def test_bad_magic():
    raw = bytearray(serialize(SparseUpdate(4, [0], [1.0])))
    raw[0] ^= 0xFF
    with pytest.raises(BadMagic):
        deserialize(bytes(raw))


sparse_updates = st.integers(1, 64).flatmap(lambda dim: st.builds(
    lambda idx, vals, thr, codec: SparseUpdate(dim, sorted(idx), vals[:len(idx)], thr, codec),
    st.sets(st.integers(0, dim - 1), max_size=dim),
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=dim, max_size=dim),
    st.floats(0, 1e3),
    st.sampled_from(list(Codec)),
))


@settings(max_examples=200, deadline=None)
@given(sparse_updates)
def test_round_trip_within_float32(u):
    back = deserialize(serialize(u))
    assert back.dim == u.dim and back.codec == u.codec and back.threshold == u.threshold
    np.testing.assert_array_equal(back.indices, u.indices)
    np.testing.assert_array_equal(back.values, u.values.astype(np.float32).astype(np.float64))
    # and the byte image itself is a fixed point
    assert serialize(back) == serialize(u)


@settings(max_examples=100, deadline=None)
@given(sparse_updates, st.data())
def test_header_mutations_never_pass_silently(u, data):
    raw = bytearray(serialize(u))
    pos = data.draw(st.sampled_from([0, 1, 2, 3, 9, 10, 11, 12]))  # magic and count bytes
    raw[pos] = (raw[pos] + data.draw(st.integers(1, 255))) % 256
    try:
        back = deserialize(bytes(raw))
    except MalformedPayload:
        return
    # a count that still parses must describe a different, self-consistent payload
    assert pos >= 9 and back.nnz != u.nnz


def test_payload_bytes_matches_serialize_randomized():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dim = int(rng.integers(1, 200))
        k = int(rng.integers(0, dim + 1))
        idx = np.sort(rng.choice(dim, size=k, replace=False))
        u = SparseUpdate(dim, idx, rng.standard_normal(k), float(rng.random()), Codec(int(rng.integers(0, 6))))
        assert payload_bytes(u) == len(serialize(u))


def test_densify_of_identity_preserves_nonzeros():
    v = np.array([0.0, 1.5, 0.0, -3.0, 2.0])
    u = SparseUpdate.from_dense(v)
    assert u.nnz == 3
    np.testing.assert_array_equal(densify(u), v)
