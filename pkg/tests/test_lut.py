import csv

import numpy as np
import pytest

from ternpack import bitpack, lut
from ternpack.bitpack import PackedTensor, pack
from ternpack.errors import ConstraintError
from ternpack.lut import DOUBLE, SINGLE, EngineConfig, build_lut, lut_matmul, lut_matvec, max_rel_error, ref_matvec
from ternpack.quant import PER_CHANNEL, PER_TENSOR, Granularity, TernaryTensor, dequantize, sparse34_quantize

GRANS = [PER_TENSOR, PER_CHANNEL, Granularity("per_group", 16)]


def dense_block_dot(index, x):
    codes = bitpack.DECODE_TABLE[index]
    return float(np.dot(codes, x))


def test_build_lut_examples():
    assert build_lut([1, 2, 3, 4])[5] == 0.0
    assert not build_lut([0, 0, 0, 0]).any()
    assert build_lut([1, 1, 1, 1])[0] == 3.0


def test_build_lut_matches_dense_dot_for_every_index():
    x = np.array([0.3, -1.7, 2.5, 0.9])
    table = build_lut(x)
    for i in range(16):
        assert table[i] == pytest.approx(dense_block_dot(i, x), abs=1e-15)


def test_lut_matvec_single_block():
    codes = np.array([[1], [0], [1], [-1]], dtype=np.int8)
    p = pack(TernaryTensor(codes, np.array([[0.7]]), PER_CHANNEL, "sparse34"), "sherry125")
    assert lut_matvec(p, [1, 2, 3, 4], DOUBLE)[0] == 0.0
    assert ref_matvec(TernaryTensor(codes, np.array([[1.0]])), [1, 0, 0, 0], DOUBLE)[0] == 1.0


def test_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    p = pack(sparse34_quantize(rng.standard_normal((32, 8))), "sherry125")
    assert not lut_matvec(p, np.zeros(32)).any()


def test_sign_plane_negation_flips_output():
    rng = np.random.default_rng(1)
    p = pack(sparse34_quantize(rng.standard_normal((64, 16)), Granularity("per_group", 16)), "sherry125")
    flipped = PackedTensor(
        p.rows, p.cols, p.scheme, p.scales, p.granularity,
        index_plane=p.index_plane, sign_plane=bytes(b ^ 0xFF for b in p.sign_plane),
    )
    x = rng.standard_normal(64)
    for cfg in (SINGLE, DOUBLE):
        assert np.array_equal(lut_matvec(flipped, x, cfg), -lut_matvec(p, x, cfg))


@pytest.mark.parametrize("g", GRANS)
@pytest.mark.parametrize("scheme", bitpack.SCHEMES)
def test_engines_agree(scheme, g):
    rng = np.random.default_rng(2)
    t = sparse34_quantize(rng.standard_normal((64, 24)), g)
    p = pack(t, scheme)
    x = rng.standard_normal(64)
    seg = lut.SEGMENT[scheme]
    assert np.array_equal(lut.matvec(p, x, DOUBLE), ref_matvec(t, x, DOUBLE, seg))
    assert max_rel_error(lut.matvec(p, x, SINGLE), ref_matvec(t, x, SINGLE, seg)) <= 1e-5
    # independent check against the plain dense product
    np.testing.assert_allclose(lut.matvec(p, x, DOUBLE), x @ dequantize(t), rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("scheme", ["dense2bit", "tl2ref"])
@pytest.mark.parametrize("rows", [5, 7, 12, 18, 20])
def test_table_engines_on_dense_ternary(scheme, rows):
    rng = np.random.default_rng(rows)
    codes = rng.integers(-1, 2, size=(rows, 6)).astype(np.int8)
    g = Granularity("per_group", 4) if rows % 4 == 0 else PER_CHANNEL
    t = TernaryTensor(codes, rng.random(g.grid_shape(rows, 6)), g)
    p = pack(t, scheme)
    x = rng.standard_normal(rows)
    assert np.array_equal(lut.matvec(p, x, DOUBLE), ref_matvec(t, x, DOUBLE, lut.SEGMENT[scheme]))
    np.testing.assert_allclose(lut.matvec(p, x, DOUBLE), x @ dequantize(t), rtol=1e-12, atol=1e-12)


def test_tl2_segments_straddling_groups():
    # group size 4 with 3-weight units forces units to split across scopes
    rng = np.random.default_rng(9)
    t = sparse34_quantize(rng.standard_normal((24, 5)), Granularity("per_group", 4))
    p = pack(t, "tl2ref")
    x = rng.standard_normal(24)
    assert np.array_equal(lut.matvec(p, x, DOUBLE), ref_matvec(t, x, DOUBLE, 3))


def test_linearity():
    rng = np.random.default_rng(3)
    p = pack(sparse34_quantize(rng.standard_normal((128, 32))), "sherry125")
    x, z = rng.standard_normal(128), rng.standard_normal(128)
    a, b = 0.75, -1.5
    lhs = lut_matvec(p, a * x + b * z, DOUBLE)
    rhs = a * lut_matvec(p, x, DOUBLE) + b * lut_matvec(p, z, DOUBLE)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


def test_thread_count_does_not_change_results():
    rng = np.random.default_rng(4)
    t = sparse34_quantize(rng.standard_normal((64, 37)), Granularity("per_group", 16))
    x = rng.standard_normal(64)
    for scheme in bitpack.SCHEMES:
        p = pack(t, scheme)
        one = lut.matvec(p, x, EngineConfig("single", 1))
        four = lut.matvec(p, x, EngineConfig("single", 4))
        assert np.array_equal(one, four)


def test_multiplications_only_at_scale_application():
    rng = np.random.default_rng(5)
    for g, scopes in ((PER_CHANNEL, 1), (PER_TENSOR, 1), (Granularity("per_group", 8), 4)):
        t = sparse34_quantize(rng.standard_normal((32, 6)), g)
        p = pack(t, "sherry125")
        x = rng.standard_normal(32)
        y, counts = lut.lut_matvec_counted(p, x)
        assert np.array_equal(y, lut_matvec(p, x, DOUBLE))
        for c in counts:
            assert c.mults == scopes
            assert c.lookups == 8


def test_lut_matmul_rows():
    rng = np.random.default_rng(6)
    t = sparse34_quantize(rng.standard_normal((32, 10)))
    p = pack(t, "sherry125")
    X = rng.standard_normal((5, 32))
    Y = lut_matmul(p, X, DOUBLE)
    assert np.array_equal(Y[2], lut_matvec(p, X[2], DOUBLE))
    assert not lut_matmul(p, np.zeros((3, 32))).any()
    np.testing.assert_allclose(Y, X @ dequantize(t), rtol=1e-9, atol=1e-12)


def test_shape_and_scheme_errors():
    rng = np.random.default_rng(7)
    t = sparse34_quantize(rng.standard_normal((16, 4)))
    with pytest.raises(ConstraintError):
        lut_matvec(pack(t, "sherry125"), np.ones(12))
    with pytest.raises(ConstraintError):
        lut_matvec(pack(t, "dense2bit"), np.ones(16))
    with pytest.raises(ConstraintError):
        lut_matmul(pack(t, "sherry125"), np.ones((2, 8)))


def test_ref_matvec_dense_weight():
    W = np.arange(12, dtype=np.float64).reshape(4, 3)
    x = np.array([1.0, 0, -1, 2])
    np.testing.assert_array_equal(ref_matvec(W, x, DOUBLE), x @ W)


def test_bench_report(tmp_path):
    rows = lut.bench(sizes=(64, 128), repeats=3)
    assert len(rows) == 6
    for r in rows:
        assert r.median_ns > 0 and r.p10_ns <= r.median_ns <= r.p90_ns
        sizes = bitpack.plane_sizes(r.scheme, r.rows, r.cols)
        assert r.payload_bytes == sum(sizes.values())
        assert r.threads == 1
    path = tmp_path / "bench.csv"
    lut.write_bench_csv(rows, path)
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = list(reader)
    assert header == list(lut.BENCH_FIELDS)
    assert len(body) == 6 and all(len(r) == len(header) and all(r) for r in body)
