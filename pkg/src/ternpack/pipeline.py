"""End-to-end helpers: quantize and pack weight files, run inference, summarize traces."""

from __future__ import annotations

import numpy as np

from . import bitpack, lut
from .bitpack import DensityReport, PackedTensor
from .diagnostics import Histogram, trap_score
from .errors import ConstraintError, TernpackError
from .quant import Granularity, quantize


def default_pack(scheme: str) -> bitpack.PackScheme:
    return "sherry125" if scheme == "sparse34" else "dense2bit"


def quantize_tensors(
    tensors: dict[str, np.ndarray],
    scheme: str = "sparse34",
    granularity: Granularity = Granularity("per_group", 128),
    pack_scheme: bitpack.PackScheme | None = None,
) -> tuple[dict[str, PackedTensor], dict[str, DensityReport]]:
    """Quantize and pack every tensor; errors are re-raised with the tensor name."""
    pack_scheme = pack_scheme or default_pack(scheme)
    packed, reports = {}, {}
    for name, W in tensors.items():
        try:
            t = quantize(W, scheme, granularity)
            packed[name] = bitpack.pack(t, pack_scheme)
        except TernpackError as e:
            raise type(e)(f"tensor {name!r}: {e}") from None
        reports[name] = bitpack.density(packed[name])
    return packed, reports


def infer(p: PackedTensor, x, engine: str = "lut", config: lut.EngineConfig = lut.SINGLE) -> np.ndarray:
    """``x @ W_q`` for a vector or a batch of rows, through the table engine or the reference."""
    x = np.asarray(x, dtype=np.float64)
    if engine not in ("lut", "ref"):
        raise ConstraintError(f"unknown engine {engine!r}")
    rows = x[None, :] if x.ndim == 1 else x
    if engine == "lut":
        out = lut.lut_matmul(p, rows, config)
    else:
        out = lut.ref_matmul(bitpack.unpack(p), rows, config, lut.SEGMENT[p.scheme])
    return out[0] if x.ndim == 1 else out


def er_rows(records: list[dict]) -> list[list]:
    return [[r["step"], *r["er_per_layer"]] for r in records]


def hist_rows(records: list[dict]) -> list[list]:
    out = []
    for r in records:
        for layer, h in enumerate(r["hist_per_layer"]):
            hist = Histogram.from_json(h)
            edges = hist.edges
            for b, c in enumerate(hist.counts):
                out.append([r["step"], layer, float(edges[b]), float(edges[b + 1]), int(c)])
    return out


def trap_rows(records: list[dict], eps: float = 0.0) -> list[list]:
    """Trap summary of every layer at the last recorded step."""
    last = records[-1]
    out = []
    for layer, h in enumerate(last["hist_per_layer"]):
        s = trap_score(Histogram.from_json(h), eps)
        out.append([last["step"], layer, s.score, s.modes[0], s.modes[1]])
    return out
