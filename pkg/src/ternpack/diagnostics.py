"""Effective rank of gradient matrices and weight-distribution histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstraintError
from .quant import Granularity, expand_scopes

SV_FLOOR = 1e-12
HIST_BINS = 64
HIST_RANGE = (-3.0, 3.0)


@dataclass
class EffectiveRankResult:
    er: float
    singular_values: np.ndarray
    entropy: float
    degenerate: bool = False  # all-zero input, er reported as 0


def effective_rank(G) -> EffectiveRankResult:
    """exp of the Shannon entropy of the normalized singular values.

    Singular values below ``1e-12 * sigma_max`` are dropped. An all-zero
    matrix has no defined value and returns ``er=0`` with ``degenerate=True``.
    """
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.size == 0:
        raise ConstraintError(f"effective_rank needs a non-empty 2-D matrix, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise ConstraintError("effective_rank input contains NaN or Inf")
    sv = np.linalg.svd(G, compute_uv=False)
    if sv[0] == 0.0:
        return EffectiveRankResult(0.0, sv, 0.0, degenerate=True)
    kept = sv[sv > SV_FLOOR * sv[0]]
    p = kept / kept.sum()
    entropy = float(-(p * np.log(p)).sum())
    return EffectiveRankResult(float(np.exp(entropy)), sv, entropy)


@dataclass
class Histogram:
    counts: np.ndarray
    lo: float = HIST_RANGE[0]
    hi: float = HIST_RANGE[1]
    zero_scale: bool = False  # some scope had alpha == 0 and was normalized by 1

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, len(self.counts) + 1)

    def bins_touching(self, value: float) -> list[int]:
        """Bins whose closed interval contains ``value`` (two when it sits on an edge)."""
        e = self.edges
        return [b for b in range(len(self.counts)) if e[b] <= value <= e[b + 1]]

    def bin_of(self, value: float) -> int:
        width = (self.hi - self.lo) / len(self.counts)
        return int(np.clip(np.floor((value - self.lo) / width), 0, len(self.counts) - 1))

    def to_json(self) -> dict:
        return {"counts": [int(c) for c in self.counts], "range": [self.lo, self.hi]}

    @classmethod
    def from_json(cls, d: dict) -> "Histogram":
        lo, hi = d["range"]
        return cls(np.asarray(d["counts"], dtype=np.int64), float(lo), float(hi))


def weight_histogram(W, scales, granularity: Granularity) -> Histogram:
    """64-bin histogram of ``W / alpha`` over [-3, 3]; out-of-range mass lands in the edge bins."""
    W = np.asarray(W, dtype=np.float64)
    grid = np.asarray(scales, dtype=np.float64)
    zero = bool(np.any(grid == 0))
    grid = np.where(grid == 0, 1.0, grid)
    norm = W / expand_scopes(grid, granularity, W.shape)
    lo, hi = HIST_RANGE
    counts, _ = np.histogram(np.clip(norm, lo, hi), bins=HIST_BINS, range=HIST_RANGE)
    return Histogram(counts.astype(np.int64), lo, hi, zero)


@dataclass
class TrapSummary:
    score: float
    modes: tuple[float, float]
    mode_bins: tuple[int, int]


def trap_score(hist: Histogram, eps: float = 0.0) -> TrapSummary:
    """Mass fraction held by the two heaviest bins, ignoring the bins at zero.

    With ``eps > 0`` every bin whose centre lies within ``eps`` of a mode
    centre is counted too. A healthy ternary layer keeps a third mode at zero;
    a trapped one piles almost everything onto two non-zero modes.
    """
    counts = np.asarray(hist.counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return TrapSummary(0.0, (0.0, 0.0), (0, 0))
    centres = (hist.edges[:-1] + hist.edges[1:]) / 2
    zero_bins = hist.bins_touching(0.0)
    masked = counts.copy()
    masked[zero_bins] = -1.0
    # stable sort keeps the lowest index first among equal bins
    first, second = np.argsort(-masked, kind="stable")[:2]
    near = np.zeros(len(counts), dtype=bool)
    for b in (first, second):
        near |= np.abs(centres - centres[b]) <= eps
        near[b] = True
    near[zero_bins] = False
    return TrapSummary(
        float(counts[near].sum() / total),
        (float(centres[first]), float(centres[second])),
        (int(first), int(second)),
    )
