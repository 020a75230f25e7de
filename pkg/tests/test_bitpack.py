import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ternpack import bitpack
from ternpack.bitpack import (
    DECODE_TABLE,
    PackedTensor,
    decode_block,
    density,
    encode_block,
    pack,
    plane_sizes,
    unpack,
)
from ternpack.errors import ConstraintError, FormatError
from ternpack.quant import PER_CHANNEL, PER_TENSOR, Granularity, TernaryTensor, sparse34_quantize

VALID_BLOCKS = [list(p) for p in itertools.product((-1, 0, 1), repeat=4) if p.count(0) == 1]


def random_sparse34(rng, rows, cols, g=PER_CHANNEL):
    return sparse34_quantize(rng.standard_normal((rows, cols)), g)


def random_ternary(rng, rows, cols, g=PER_CHANNEL):
    codes = rng.integers(-1, 2, size=(rows, cols)).astype(np.int8)
    grid = g.grid_shape(rows, cols)
    return TernaryTensor(codes, rng.random(grid).astype(np.float32), g)


def test_encode_examples():
    assert encode_block([1, 0, 1, -1]) == (0, 5)
    assert encode_block([-1, 0, -1, 1]) == (1, 5)
    assert encode_block([0, 1, 1, 1]) == (0, 0)


def test_decode_examples():
    assert decode_block(0, 5) == [1, 0, 1, -1]
    assert decode_block(1, 0) == [0, -1, -1, -1]


def test_bijection_over_all_32_blocks():
    codes = {encode_block(b) for b in VALID_BLOCKS}
    assert len(VALID_BLOCKS) == 32
    assert codes == {(s, i) for s in (0, 1) for i in range(16)}
    for b in VALID_BLOCKS:
        assert decode_block(*encode_block(b)) == b


@pytest.mark.parametrize("s,i", [(s, i) for s in (0, 1) for i in range(16)])
def test_mirror_symmetry(s, i):
    assert decode_block(1 - s, i) == [-v for v in decode_block(s, i)]


@pytest.mark.parametrize("bad", [[1, 1, 1, 1], [0, 0, 1, 1], [0, 0, 0, 0], [1, 0, 1], [2, 0, 1, 1]])
def test_encode_rejects_invalid_blocks(bad):
    with pytest.raises(ConstraintError):
        encode_block(bad)


def test_decode_rejects_out_of_range():
    with pytest.raises(FormatError):
        decode_block(0, 16)


def test_decode_table_has_positive_lead():
    for i, row in enumerate(DECODE_TABLE):
        first = next(v for v in row if v != 0)
        assert first == 1
        assert row.tolist() == decode_block(0, i)


def test_sherry_plane_layout_by_hand():
    # column with blocks [+1,0,+1,-1] (s=0,i=5), [0,-1,-1,-1] (s=1,i=0), [-1,0,-1,+1] (s=1,i=5)
    codes = np.array([1, 0, 1, -1, 0, -1, -1, -1, -1, 0, -1, 1], dtype=np.int8)[:, None]
    t = TernaryTensor(codes, np.ones((1, 1)), PER_CHANNEL, "sparse34")
    p = pack(t, "sherry125")
    assert p.index_plane == bytes([5 | (0 << 4), 5])
    assert p.sign_plane == bytes([0b110])


def test_dense2bit_layout_by_hand():
    codes = np.array([-1, 0, 1, 1, -1], dtype=np.int8)[:, None]
    p = pack(TernaryTensor(codes, np.ones((1, 1))), "dense2bit")
    assert p.payload == bytes([0b01_01_00_11, 0b11])


def test_tl2ref_layout_by_hand():
    # units: (-1,0,1) -> 0 + 3 + 18 = 21 ; (1, pad 0, pad 0) -> 2 + 3 + 9 = 14
    codes = np.array([-1, 0, 1, 1], dtype=np.int8)[:, None]
    p = pack(TernaryTensor(codes, np.ones((1, 1))), "tl2ref")
    bits = 21 | (14 << 5)
    assert p.payload == bits.to_bytes(2, "little")
    assert unpack(p).codes.ravel().tolist() == [-1, 0, 1, 1]


@pytest.mark.parametrize("g", [PER_CHANNEL, PER_TENSOR, Granularity("per_group", 8)])
@pytest.mark.parametrize("scheme", bitpack.SCHEMES)
def test_round_trip_sparse34(scheme, g):
    rng = np.random.default_rng(1)
    for rows in (8, 16, 24, 40):
        t = random_sparse34(rng, rows, 5, g)
        assert unpack(pack(t, scheme)).equals(t)


@pytest.mark.parametrize("scheme", ["dense2bit", "tl2ref"])
@given(rows=st.integers(1, 40), cols=st.integers(1, 6), seed=st.integers(0, 2**31))
@settings(max_examples=80, deadline=None)
def test_round_trip_dense(scheme, rows, cols, seed):
    t = random_ternary(np.random.default_rng(seed), rows, cols)
    assert unpack(pack(t, scheme)).equals(t)


def test_all_plus_one_dense2bit():
    t = TernaryTensor(np.ones((12, 3), dtype=np.int8), np.ones((1, 3)))
    assert unpack(pack(t, "dense2bit")).equals(t)


def test_sherry_rejects_dense_tensor():
    t = TernaryTensor(np.ones((8, 2), dtype=np.int8), np.ones((1, 2)))
    with pytest.raises(ConstraintError):
        pack(t, "sherry125")


def test_plane_sizes_4096():
    s = plane_sizes("sherry125", 4096, 4096)
    assert s["index_plane"] == 2_097_152
    assert s["sign_plane"] == 524_288
    assert plane_sizes("dense2bit", 4096, 4096)["payload"] == 4_194_304
    assert plane_sizes("tl2ref", 4096, 4096)["payload"] == 4096 * math.ceil(1366 * 5 / 8)


def test_density_ratios():
    rng = np.random.default_rng(0)
    t = random_sparse34(rng, 48, 10)
    d = {s: density(pack(t, s)) for s in bitpack.SCHEMES}
    assert d["sherry125"].payload_bits / d["dense2bit"].payload_bits == 0.625
    assert d["sherry125"].payload_bits / d["tl2ref"].payload_bits == 0.75
    assert d["sherry125"].scale_bits == 10 * 32
    for r in d.values():
        assert r.bits_per_weight == (r.payload_bits + r.scale_bits) / r.weight_count


@pytest.mark.parametrize("rows", range(4, 129, 4))
def test_sherry_storage_overhead(rows):
    cols = 3
    t = TernaryTensor(
        np.tile(np.array([0, 1, 1, 1], dtype=np.int8), rows // 4)[:, None].repeat(cols, 1),
        np.ones((1, cols)), PER_CHANNEL, "sparse34",
    )
    r = density(pack(t, "sherry125"))
    assert r.payload_bits == 1.25 * rows * cols
    if (rows // 4) % 8 == 0:
        assert r.payload_bytes * 8 == r.payload_bits
    # byte alignment wastes at most a half index byte plus 7 sign bits per column
    assert r.payload_bytes * 8 <= r.payload_bits + 11 * cols


@pytest.mark.parametrize("rows", range(12, 257, 4))
def test_scheme_ordering(rows):
    b = {s: bitpack.logical_payload_bits(s, rows, 2) for s in bitpack.SCHEMES}
    assert b["sherry125"] < b["tl2ref"] < b["dense2bit"]


def test_unpack_rejects_bad_planes():
    rng = np.random.default_rng(0)
    p = pack(random_ternary(rng, 6, 2), "tl2ref")
    with pytest.raises(FormatError):
        PackedTensor(p.rows, p.cols, "tl2ref", p.scales, p.granularity, payload=p.payload[:-1])
    # unit 31 is not a valid base-3 code
    bad = PackedTensor(p.rows, p.cols, "tl2ref", p.scales, p.granularity, payload=b"\xff" * len(p.payload))
    with pytest.raises(FormatError):
        unpack(bad)
    q = pack(random_ternary(rng, 4, 1), "dense2bit")
    bad2 = PackedTensor(4, 1, "dense2bit", q.scales, q.granularity, payload=bytes([0b10]))
    with pytest.raises(FormatError):
        unpack(bad2)
