"""Ternary quantizers: AbsMean, TWN and 3:4 Sparse-AbsMean.

Weights are laid out as ``(d_in, d_out)``: rows are input channels, columns
are output channels. A scale (and threshold, for the dense schemes) is shared
by every weight in a *scope*, which is the whole tensor, one column, or one
run of ``group_size`` consecutive input channels within a column.

Statistics are computed in float64 and scales are stored as float32.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import ConstraintError

GranularityKind = Literal["per_tensor", "per_channel", "per_group"]
Scheme = Literal["absmean", "twn", "sparse34"]

BLOCK = 4
TWN_THRESHOLD_FACTOR = 0.7
ORACLE_MAX_LEN = 12


@dataclass(frozen=True)
class Granularity:
    kind: GranularityKind = "per_channel"
    group_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("per_tensor", "per_channel", "per_group"):
            raise ConstraintError(f"unknown granularity kind {self.kind!r}")
        if self.kind == "per_group":
            if self.group_size is None or self.group_size <= 0:
                raise ConstraintError("per_group granularity needs a positive group_size")
            if self.group_size % BLOCK:
                raise ConstraintError(f"group_size {self.group_size} is not a multiple of {BLOCK}")
        elif self.group_size is not None:
            raise ConstraintError(f"group_size only applies to per_group, got kind={self.kind}")

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        """Parse ``tensor``, ``channel`` or ``group:<size>``."""
        text = text.strip().lower()
        if text in ("tensor", "per_tensor"):
            return cls("per_tensor")
        if text in ("channel", "per_channel"):
            return cls("per_channel")
        if text.startswith("group:"):
            try:
                size = int(text.split(":", 1)[1])
            except ValueError:
                raise ConstraintError(f"bad group size in {text!r}") from None
            return cls("per_group", size)
        raise ConstraintError(f"unknown granularity {text!r}")

    def __str__(self):
        if self.kind == "per_group":
            return f"group:{self.group_size}"
        return self.kind.removeprefix("per_")

    def scope_len(self, rows: int) -> int:
        """Number of input channels covered by one scale within a column."""
        return self.group_size if self.kind == "per_group" else rows

    def grid_shape(self, rows: int, cols: int) -> tuple[int, int]:
        """Shape of the scale grid for a ``(rows, cols)`` weight."""
        if self.kind == "per_tensor":
            return (1, 1)
        if self.kind == "per_channel":
            return (1, cols)
        return (rows // self.group_size, cols)

    def check(self, rows: int, cols: int) -> None:
        if rows <= 0 or cols <= 0:
            raise ConstraintError(f"empty weight of shape ({rows}, {cols})")
        if self.kind == "per_group" and rows % self.group_size:
            raise ConstraintError(f"d_in={rows} is not divisible by group_size={self.group_size}")


PER_TENSOR = Granularity("per_tensor")
PER_CHANNEL = Granularity("per_channel")


@dataclass
class TernaryTensor:
    """Ternary codes with their per-scope scales.

    ``codes`` is an int8 ``(rows, cols)`` array over {-1, 0, +1}; ``scales``
    (and ``thresholds`` when present) have ``granularity.grid_shape`` shape.
    """

    codes: np.ndarray
    scales: np.ndarray
    granularity: Granularity = PER_CHANNEL
    scheme: Scheme | None = None
    thresholds: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        if self.codes.ndim != 2:
            raise ConstraintError("codes must be a 2-D array")
        rows, cols = self.codes.shape
        self.granularity.check(rows, cols)
        grid = self.granularity.grid_shape(rows, cols)
        if self.scales.shape != grid:
            raise ConstraintError(f"scales shape {self.scales.shape} != expected {grid}")
        if self.thresholds is not None:
            self.thresholds = np.asarray(self.thresholds, dtype=np.float32)
            if self.thresholds.shape != grid:
                raise ConstraintError("thresholds must match the scale grid")
        if np.any(np.abs(self.codes) > 1):
            raise ConstraintError("codes outside {-1, 0, +1}")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales < 0):
            raise ConstraintError("scales must be finite and non-negative")
        if self.scheme == "sparse34" and not is_sparse34(self.codes):
            raise ConstraintError("codes violate the 3:4 constraint")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def scale_map(self) -> np.ndarray:
        """Per-weight float64 scale, shape ``(rows, cols)``."""
        return expand_scopes(self.scales.astype(np.float64), self.granularity, self.shape)

    def equals(self, other: "TernaryTensor") -> bool:
        """Codes, scales and granularity are identical."""
        return (
            self.granularity == other.granularity
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
        )


def check_weight(W) -> np.ndarray:
    W = np.asarray(W)
    if W.ndim != 2:
        raise ConstraintError(f"weight must be 2-D, got shape {W.shape}")
    if not np.issubdtype(W.dtype, np.floating):
        W = W.astype(np.float64)
    if not np.all(np.isfinite(W)):
        raise ConstraintError("weight contains NaN or Inf")
    return W


def scope_view(A: np.ndarray, g: Granularity) -> np.ndarray:
    """Reshape ``(rows, cols)`` to ``(n_row_groups, scope_len, n_col_groups)``.

    Reducing over axis 1 yields one value per scope in grid layout.
    """
    rows, cols = A.shape
    if g.kind == "per_tensor":
        return A.reshape(1, rows * cols, 1)
    if g.kind == "per_channel":
        return A.reshape(1, rows, cols)
    return A.reshape(rows // g.group_size, g.group_size, cols)


def expand_scopes(grid: np.ndarray, g: Granularity, shape: tuple[int, int]) -> np.ndarray:
    """Broadcast a scale grid back to one value per weight."""
    rows, cols = shape
    view_shape = scope_view(np.empty(shape, dtype=np.bool_), g).shape
    return np.broadcast_to(grid[:, None, :], view_shape).reshape(rows, cols)


def _prepare(W, g: Granularity) -> np.ndarray:
    W = check_weight(W).astype(np.float64)
    g.check(*W.shape)
    return W


def _threshold_codes(W: np.ndarray, delta_map: np.ndarray) -> np.ndarray:
    # |W| == delta maps to zero
    codes = np.zeros(W.shape, dtype=np.int8)
    codes[W > delta_map] = 1
    codes[W < -delta_map] = -1
    return codes


def absmean_quantize(W, g: Granularity = PER_CHANNEL) -> TernaryTensor:
    """AbsMean: scale = mean |W| per scope, threshold = scale / 2."""
    W = _prepare(W, g)
    alpha = np.abs(scope_view(W, g)).mean(axis=1)
    delta = alpha / 2
    codes = _threshold_codes(W, expand_scopes(delta, g, W.shape))
    return TernaryTensor(codes, alpha.astype(np.float32), g, "absmean", delta.astype(np.float32))


def twn_quantize(W, g: Granularity = PER_CHANNEL) -> TernaryTensor:
    """Ternary Weight Networks: threshold = 0.7 mean |W|, scale = mean |W| above it."""
    W = _prepare(W, g)
    absw = np.abs(scope_view(W, g))
    delta = TWN_THRESHOLD_FACTOR * absw.mean(axis=1)
    above = absw > delta[:, None, :]
    count = above.sum(axis=1)
    total = np.where(above, absw, 0.0).sum(axis=1)
    alpha = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    codes = _threshold_codes(W, expand_scopes(delta, g, W.shape))
    return TernaryTensor(codes, alpha.astype(np.float32), g, "twn", delta.astype(np.float32))


def sparse34_codes(W: np.ndarray) -> np.ndarray:
    """3:4 code assignment: zero the smallest |W| of each aligned 4-block.

    Ties go to the lowest index within the block; sign(0) is +1.
    """
    rows, cols = W.shape
    if rows % BLOCK:
        raise ConstraintError(f"d_in={rows} is not divisible by {BLOCK}")
    codes = np.where(W >= 0, 1, -1).astype(np.int8)
    blocks = codes.reshape(rows // BLOCK, BLOCK, cols)
    # argmin returns the first minimum, which is the tie rule we want
    zero_pos = np.argmin(np.abs(W).reshape(rows // BLOCK, BLOCK, cols), axis=1)
    np.put_along_axis(blocks, zero_pos[:, None, :], 0, axis=1)
    return codes


def sparse34_quantize(W, g: Granularity = PER_CHANNEL) -> TernaryTensor:
    """Sparse-AbsMean: 3:4 codes, scale = mean |W| over the kept weights of each scope."""
    W = _prepare(W, g)
    codes = sparse34_codes(W)
    kept = scope_view(codes != 0, g)
    absw = np.abs(scope_view(W, g))
    total = np.where(kept, absw, 0.0).sum(axis=1)
    # kept count is exactly 3/4 of the scope, so this is (4 / 3n) * sum
    alpha = total / kept.sum(axis=1)
    return TernaryTensor(codes, alpha.astype(np.float32), g, "sparse34")


QUANTIZERS = {
    "absmean": absmean_quantize,
    "twn": twn_quantize,
    "sparse34": sparse34_quantize,
}


def quantize(W, scheme: Scheme = "sparse34", g: Granularity = PER_CHANNEL) -> TernaryTensor:
    try:
        fn = QUANTIZERS[scheme]
    except KeyError:
        raise ConstraintError(f"unknown scheme {scheme!r}") from None
    return fn(W, g)


def dequantize(t: TernaryTensor, dtype=np.float64) -> np.ndarray:
    return (t.codes * t.scale_map()).astype(dtype)


def reconstruction_error(W, t: TernaryTensor) -> float:
    """Squared L2 distance between ``W`` and its ternary reconstruction."""
    W = check_weight(W).astype(np.float64)
    if W.shape != t.shape:
        raise ConstraintError(f"shape mismatch: W {W.shape} vs codes {t.shape}")
    return float(np.sum((W - dequantize(t)) ** 2))


def is_sparse34(codes: np.ndarray) -> bool:
    rows, cols = codes.shape
    if rows % BLOCK:
        return False
    nnz = np.count_nonzero(codes.reshape(rows // BLOCK, BLOCK, cols), axis=1)
    return bool(np.all(nnz == BLOCK - 1))


def _valid_blocks() -> np.ndarray:
    pats = [p for p in itertools.product((-1, 0, 1), repeat=BLOCK) if p.count(0) == 1]
    return np.array(pats, dtype=np.float64)


def sparse34_oracle(column, g: Granularity = PER_CHANNEL):
    """Exhaustive minimum of the 3:4 reconstruction error for one short column.

    Every combination of the 32 valid block patterns is tried; each scope gets
    its least-squares scale, clamped at zero. Returns
    ``(min_error, codes, alphas)`` where ``alphas`` has one entry per scope.
    Candidates are enumerated in lexicographic pattern order and the first
    minimum wins.
    """
    w = np.asarray(column, dtype=np.float64).ravel()
    n = w.size
    if n == 0 or n % BLOCK:
        raise ConstraintError(f"column length {n} is not a positive multiple of {BLOCK}")
    if n > ORACLE_MAX_LEN:
        raise ConstraintError(f"column length {n} exceeds the oracle limit {ORACLE_MAX_LEN}")
    scope = n if g.kind != "per_group" else g.group_size
    if n % scope:
        raise ConstraintError(f"column length {n} is not divisible by group_size={scope}")

    pats = _valid_blocks()
    nb = n // BLOCK
    idx = np.array(list(itertools.product(range(len(pats)), repeat=nb)))
    cand = pats[idx].reshape(len(idx), n)

    cs = cand.reshape(len(cand), n // scope, scope)
    ws = w.reshape(n // scope, scope)
    corr = (cs * ws).sum(axis=2)
    energy = (cs * cs).sum(axis=2)
    alpha = np.maximum(corr / energy, 0.0)
    err = ((ws - cs * alpha[:, :, None]) ** 2).sum(axis=(1, 2))
    best = int(np.argmin(err))
    return float(err[best]), cand[best].astype(np.int8), alpha[best]
