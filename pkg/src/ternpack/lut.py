"""Multiplication-free matrix-vector products over packed ternary weights.

Activations are cut into segments that line up with the packing unit of each
scheme (4 for sherry125, 2 for dense2bit, 3 for tl2ref). For every segment a
small table of signed partial sums is built once and shared by all output
channels; each channel then only gathers table entries, flips signs and adds.
The per-scope scale is applied once per scope at the end.

Summation order is fixed: entries inside a segment left to right, segments
ascending within a scope, scopes ascending within a column. ``ref_matvec``
follows the same order with explicit products, so both paths agree bit for
bit in double precision.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

from . import bitpack
from .bitpack import PackedTensor, block_positions
from .errors import ConstraintError
from .quant import BLOCK, Granularity, TernaryTensor, sparse34_quantize

Precision = Literal["single", "double"]

SEGMENT = {"sherry125": BLOCK, "dense2bit": 2, "tl2ref": bitpack.TL2_GROUP}


@dataclass(frozen=True)
class EngineConfig:
    precision: Precision = "single"
    threads: int = 1

    def __post_init__(self):
        if self.precision not in ("single", "double"):
            raise ConstraintError(f"precision must be single or double, got {self.precision!r}")
        if self.threads < 1:
            raise ConstraintError("threads must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


SINGLE = EngineConfig("single")
DOUBLE = EngineConfig("double")


def _pieces(rows: int, segment: int, g: Granularity) -> list[tuple[int, int, int]]:
    """Segments clipped at scope boundaries, as ``(start, stop, scope_row)``."""
    scope = g.scope_len(rows)
    out = []
    for start in range(0, rows, segment):
        stop = min(start + segment, rows)
        while start < stop:
            cut = min(stop, (start // scope + 1) * scope)
            out.append((start, cut, start // scope))
            start = cut
    return out


def _check_x(x, rows: int, dtype) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != rows:
        raise ConstraintError(f"activation length {x.shape} does not match d_in={rows}")
    if not np.all(np.isfinite(x)):
        raise ConstraintError("activation contains NaN or Inf")
    return x.astype(dtype)


# -- sherry125 ---------------------------------------------------------------

_SHERRY_POS = [block_positions(i) for i in range(16)]


def build_lut(segment, dtype=np.float64) -> np.ndarray:
    """16 signed sums of one 4-activation segment, positive lead sign."""
    seg = np.asarray(segment, dtype=dtype)
    if seg.shape != (BLOCK,):
        raise ConstraintError(f"segment must have {BLOCK} activations")
    return build_luts(seg, dtype)[0]


def build_luts(x: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Tables for every 4-segment of ``x``, shape ``(d_in / 4, 16)``."""
    seg = np.asarray(x, dtype=dtype).reshape(-1, BLOCK)
    neg = -seg
    lut = np.empty((seg.shape[0], 16), dtype=dtype)
    for i, (_, p1, p2, p3, r2, r3) in enumerate(_SHERRY_POS):
        e = seg[:, p1] + (neg if r2 else seg)[:, p2]
        lut[:, i] = e + (neg if r3 else seg)[:, p3]
    return lut


def _sherry_columns(lut, index, sign, scales, blocks_per_scope, dtype):
    cols, nb = index.shape
    y = np.zeros(cols, dtype=dtype)
    acc = np.zeros(cols, dtype=dtype)
    flip = sign.astype(bool)
    for b in range(nb):
        v = lut[b][index[:, b]]
        acc = acc + np.where(flip[:, b], -v, v)
        if (b + 1) % blocks_per_scope == 0:
            y = y + scales[b // blocks_per_scope] * acc
            acc = np.zeros(cols, dtype=dtype)
    return y


def lut_matvec(p: PackedTensor, x, config: EngineConfig = SINGLE) -> np.ndarray:
    """``y = x @ (T * alpha)`` for a sherry125 tensor, via lookups only."""
    if p.scheme != "sherry125":
        raise ConstraintError(f"lut_matvec needs a sherry125 tensor, got {p.scheme}")
    dtype = config.dtype
    x = _check_x(x, p.rows, dtype)
    lut = build_luts(x, dtype)
    index, sign = bitpack.sherry_planes(p)
    per_scope = p.granularity.scope_len(p.rows) // BLOCK
    scales = _column_scales(p, dtype)
    return _split_columns(
        config, p.cols,
        lambda sl: _sherry_columns(lut, index[sl], sign[sl], scales[:, sl], per_scope, dtype),
    )


def _column_scales(p, dtype) -> np.ndarray:
    """Scale grid broadcast to ``(n_scopes_per_column, cols)``."""
    rows_grid = p.granularity.grid_shape(p.rows, p.cols)[0]
    return np.broadcast_to(p.scales.astype(dtype), (rows_grid, p.cols))


def _split_columns(config: EngineConfig, cols: int, fn) -> np.ndarray:
    if config.threads == 1 or cols < 2:
        return fn(slice(0, cols))
    bounds = np.linspace(0, cols, min(config.threads, cols) + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(config.threads) as pool:
        parts = list(pool.map(fn, slices))
    return np.concatenate(parts)


# -- dense2bit and tl2ref ----------------------------------------------------


def _select(code: int, v: np.ndarray, neg: np.ndarray, zero: np.ndarray) -> np.ndarray:
    return v if code == 1 else neg if code == -1 else zero


def _piece_luts(x: np.ndarray, pieces, segment: int, codebook: np.ndarray, dtype) -> np.ndarray:
    """Per-piece tables; ``codebook[c]`` lists the ternary digits of code ``c``.

    Positions of the segment that fall outside the piece contribute zero.
    """
    n_codes = codebook.shape[0]
    lut = np.empty((len(pieces), n_codes), dtype=dtype)
    seg = np.zeros((len(pieces), segment), dtype=dtype)
    for k, (start, stop, _) in enumerate(pieces):
        base = start - start % segment
        seg[k, start - base: stop - base] = x[start:stop]
    neg, zero = -seg, np.zeros(len(pieces), dtype=dtype)
    for c in range(n_codes):
        e = _select(codebook[c, 0], seg[:, 0], neg[:, 0], zero)
        for j in range(1, segment):
            e = e + _select(codebook[c, j], seg[:, j], neg[:, j], zero)
        lut[:, c] = e
    return lut


def _codebook_2bit() -> np.ndarray:
    digit = {0: 0, 1: 1, 2: 0, 3: -1}  # 0b10 is never produced
    return np.array([[digit[n & 3], digit[n >> 2]] for n in range(16)], dtype=np.int8)


def _codebook_tl2() -> np.ndarray:
    return np.array([[(c // 3**k) % 3 - 1 for k in range(3)] for c in range(27)], dtype=np.int8)


_CODEBOOK = {"dense2bit": _codebook_2bit(), "tl2ref": _codebook_tl2()}


def _unit_codes(p: PackedTensor) -> np.ndarray:
    """Code of every packing unit, ``(cols, units)``."""
    if p.scheme == "tl2ref":
        return bitpack.tl2_unpack_units(p.payload, p.rows, p.cols)
    raw = np.frombuffer(p.payload, dtype=np.uint8).reshape(p.cols, -1)
    return np.stack([raw & 0x0F, raw >> 4], axis=2).reshape(p.cols, -1)


def _piece_columns(lut, units, pieces, segment, scales, dtype):
    cols = units.shape[0]
    y = np.zeros(cols, dtype=dtype)
    acc = np.zeros(cols, dtype=dtype)
    for k, (start, _, scope) in enumerate(pieces):
        acc = acc + lut[k][units[:, start // segment]]
        if k + 1 == len(pieces) or pieces[k + 1][2] != scope:
            y = y + scales[scope] * acc
            acc = np.zeros(cols, dtype=dtype)
    return y


def table_matvec(p: PackedTensor, x, config: EngineConfig = SINGLE) -> np.ndarray:
    """Table-lookup product for dense2bit (2-weight nibbles) or tl2ref (5-bit triples)."""
    if p.scheme not in _CODEBOOK:
        raise ConstraintError(f"table_matvec handles dense2bit and tl2ref, got {p.scheme}")
    dtype = config.dtype
    x = _check_x(x, p.rows, dtype)
    segment = SEGMENT[p.scheme]
    pieces = _pieces(p.rows, segment, p.granularity)
    lut = _piece_luts(x, pieces, segment, _CODEBOOK[p.scheme], dtype)
    units = _unit_codes(p)
    scales = _column_scales(p, dtype)
    return _split_columns(
        config, p.cols,
        lambda sl: _piece_columns(lut, units[sl], pieces, segment, scales[:, sl], dtype),
    )


def matvec(p: PackedTensor, x, config: EngineConfig = SINGLE) -> np.ndarray:
    if p.scheme == "sherry125":
        return lut_matvec(p, x, config)
    return table_matvec(p, x, config)


def lut_matmul(p: PackedTensor, X, config: EngineConfig = SINGLE) -> np.ndarray:
    """Row-by-row ``matvec``; tables are rebuilt for every row of ``X``."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != p.rows:
        raise ConstraintError(f"activation matrix {X.shape} does not match d_in={p.rows}")
    out = np.empty((X.shape[0], p.cols), dtype=config.dtype)
    for r in range(X.shape[0]):
        out[r] = matvec(p, X[r], config)
    return out


# -- reference path ----------------------------------------------------------


def ref_matvec(w, x, config: EngineConfig = SINGLE, segment: int = BLOCK) -> np.ndarray:
    """Dense reference.

    For a plain weight array this is ``x @ W``. For a ``TernaryTensor`` the
    products ``T[i, j] * x[i]`` are summed in the engine's order, with
    ``segment`` matching the packing unit being checked.
    """
    dtype = config.dtype
    if not isinstance(w, TernaryTensor):
        W = np.asarray(w)
        x = _check_x(x, W.shape[0], dtype)
        return x @ W.astype(dtype)
    rows, cols = w.shape
    x = _check_x(x, rows, dtype)
    prod = w.codes.astype(dtype) * x[:, None]
    scales = np.broadcast_to(w.scales.astype(dtype), (w.granularity.grid_shape(rows, cols)[0], cols))
    pieces = _pieces(rows, segment, w.granularity)
    y = np.zeros(cols, dtype=dtype)
    acc = np.zeros(cols, dtype=dtype)
    for k, (start, stop, scope) in enumerate(pieces):
        part = prod[start]
        for i in range(start + 1, stop):
            part = part + prod[i]
        acc = acc + part
        if k + 1 == len(pieces) or pieces[k + 1][2] != scope:
            y = y + scales[scope] * acc
            acc = np.zeros(cols, dtype=dtype)
    return y


def ref_matmul(w, X, config: EngineConfig = SINGLE, segment: int = BLOCK) -> np.ndarray:
    X = np.asarray(X)
    return np.stack([ref_matvec(w, row, config, segment) for row in X]) if len(X) else np.zeros((0, w.shape[1]))


def max_rel_error(a, b) -> float:
    """Largest elementwise ``|a - b| / |b|``; exact matches count as zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    rel = np.divide(diff, np.abs(b), out=np.where(diff == 0, 0.0, np.inf), where=b != 0)
    return float(rel.max()) if rel.size else 0.0


# -- instrumented scalar kernel ----------------------------------------------


@dataclass
class OpCount:
    lookups: int = 0
    adds: int = 0
    negations: int = 0
    mults: int = 0


def lut_matvec_counted(p: PackedTensor, x) -> tuple[np.ndarray, list[OpCount]]:
    """Scalar sherry125 kernel that tallies the arithmetic done per output channel.

    Table construction is shared by all channels and is not charged to any of
    them. Used to check that multiplications happen only at scale application.
    """
    if p.scheme != "sherry125":
        raise ConstraintError("lut_matvec_counted needs a sherry125 tensor")
    x = _check_x(x, p.rows, np.float64)
    lut = build_luts(x).tolist()
    index, sign = bitpack.sherry_planes(p)
    per_scope = p.granularity.scope_len(p.rows) // BLOCK
    scales = _column_scales(p, np.float64)
    y = np.zeros(p.cols)
    counts = []
    for j in range(p.cols):
        c = OpCount()
        total, acc = 0.0, 0.0
        for b in range(p.rows // BLOCK):
            v = lut[b][index[j, b]]
            c.lookups += 1
            if sign[j, b]:
                v = -v
                c.negations += 1
            acc += v
            c.adds += 1
            if (b + 1) % per_scope == 0:
                total += float(scales[b // per_scope, j]) * acc
                c.mults += 1
                c.adds += 1
                acc = 0.0
        y[j] = total
        counts.append(c)
    return y, counts


# -- benchmark ---------------------------------------------------------------

BENCH_FIELDS = (
    "scheme", "rows", "cols", "granularity", "repeats",
    "median_ns", "p10_ns", "p90_ns", "payload_bytes", "scale_bytes", "threads",
)


@dataclass
class BenchRow:
    scheme: str
    rows: int
    cols: int
    granularity: str
    repeats: int
    median_ns: int
    p10_ns: int
    p90_ns: int
    payload_bytes: int
    scale_bytes: int
    threads: int


def _bench_granularity(g: Granularity, n: int) -> Granularity:
    if g.kind == "per_group" and n % g.group_size:
        return Granularity("per_channel")
    return g


def bench(
    schemes=bitpack.SCHEMES,
    sizes=(512, 1024, 4096),
    repeats: int = 10,
    granularity: Granularity = Granularity("per_group", 128),
    config: EngineConfig = SINGLE,
    seed: int = 0,
) -> list[BenchRow]:
    """Time ``matvec`` for every (scheme, square size) pair.

    All schemes pack the same 3:4 tensor so only the layout differs.
    Throughput ordering is hardware dependent and only reported.
    """
    if repeats < 1:
        raise ConstraintError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    rows_out = []
    for n in sizes:
        g = _bench_granularity(granularity, n)
        t = sparse34_quantize(rng.standard_normal((n, n)), g)
        x = rng.standard_normal(n).astype(config.dtype)
        for scheme in schemes:
            p = bitpack.pack(t, scheme)
            matvec(p, x, config)  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                matvec(p, x, config)
                times.append(time.perf_counter_ns() - t0)
            p10, med, p90 = np.percentile(times, [10, 50, 90])
            rows_out.append(BenchRow(
                scheme, n, n, str(g), repeats, int(med), int(p10), int(p90),
                p.payload_bytes, p.scales.size * 4, config.threads,
            ))
    return rows_out


def write_bench_csv(rows: list[BenchRow], path) -> None:
    from .fileio import atomic_write

    def emit(fh):
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))

    atomic_write(os.fspath(path), emit, text=True)
