"""Quantization-aware training of a toy MLP with an annealed full-precision bypass.

Each quantized linear layer computes ``Y = X (T * alpha) + lam * X W`` where
``T, alpha`` are recomputed from the latent weights ``W`` on every forward
pass and ``lam`` follows a schedule that ends at zero. The quantizer is
treated as the identity in the backward pass (straight-through), so

    dL/dX = dL/dY (T * alpha + lam W)^T
    dL/dW = (1 + lam) X^T dL/dY

The task is teacher-student regression: a fixed random ReLU MLP labels
standard-normal inputs and a quantized student of the same shape is trained
with plain SGD. Recorded losses are measured on a fixed held-out batch; the
effective-rank diagnostics use the gradients of the current training batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import bitpack, fileio
from .diagnostics import effective_rank, weight_histogram
from .errors import ConstraintError
from .quant import (
    PER_CHANNEL,
    Granularity,
    TernaryTensor,
    absmean_quantize,
    check_weight,
    dequantize,
    scope_view,
    sparse34_quantize,
)

Family = Literal["linear", "cosine", "exponential", "constant_zero", "constant_one"]
LayerScheme = Literal["absmean", "sparse34", "binary"]

FAMILIES = ("linear", "cosine", "exponential", "constant_zero", "constant_one")
EXP_RATE = 5.0


@dataclass(frozen=True)
class Schedule:
    family: Family = "cosine"
    warmup_fraction: float = 0.0
    total_steps: int = 2000

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConstraintError(f"unknown schedule family {self.family!r}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConstraintError("warmup_fraction must be in [0, 1)")
        if self.total_steps <= 0:
            raise ConstraintError("total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def decay(self, progress: float) -> float:
        if self.family == "linear":
            return 1.0 - progress
        if self.family == "cosine":
            return 0.5 * (1.0 + math.cos(math.pi * progress))
        if self.family == "exponential":
            return math.exp(-EXP_RATE * progress)
        return 0.0 if self.family == "constant_zero" else 1.0


def lambda_at(s: Schedule, t: int) -> float:
    """Gate value at step ``t`` in ``[0, total_steps]``.

    During warmup the gate ramps linearly from 0 to the start of the decay
    curve; afterwards the decay runs over the remaining steps.
    """
    if not 0 <= t <= s.total_steps:
        raise ConstraintError(f"step {t} outside [0, {s.total_steps}]")
    if s.family in ("constant_zero", "constant_one"):
        return s.decay(0.0)
    w = s.warmup_steps
    if t < w:
        return (t / w) * s.decay(0.0)
    return s.decay((t - w) / (s.total_steps - w))


def binary_quantize(W, g: Granularity = PER_CHANNEL) -> TernaryTensor:
    """1-bit ablation arm: sign(W) with sign(0) = +1, scale = mean |W| per scope."""
    W = check_weight(W).astype(np.float64)
    g.check(*W.shape)
    alpha = np.abs(scope_view(W, g)).mean(axis=1)
    codes = np.where(W >= 0, 1, -1).astype(np.int8)
    return TernaryTensor(codes, alpha.astype(np.float32), g)


LAYER_QUANTIZERS = {"absmean": absmean_quantize, "sparse34": sparse34_quantize, "binary": binary_quantize}


@dataclass
class QuantLinear:
    W: np.ndarray
    scheme: LayerScheme = "sparse34"
    granularity: Granularity = PER_CHANNEL
    arenas: bool = True

    def __post_init__(self):
        self.W = check_weight(self.W).astype(np.float64)
        if self.scheme not in LAYER_QUANTIZERS:
            raise ConstraintError(f"unknown layer scheme {self.scheme!r}")

    def quantize(self) -> TernaryTensor:
        return LAYER_QUANTIZERS[self.scheme](self.W, self.granularity)

    def gate(self, lam: float) -> float:
        if not 0.0 <= lam <= 1.0:
            raise ConstraintError(f"lambda {lam} outside [0, 1]")
        return lam if self.arenas else 0.0

    def effective_weight(self, lam: float, wq: np.ndarray | None = None) -> np.ndarray:
        """``T * alpha + lam * W``, the matrix both passes multiply by."""
        lam = self.gate(lam)
        wq = dequantize(self.quantize()) if wq is None else wq
        return wq if lam == 0.0 else wq + lam * self.W


def _check_x(layer: QuantLinear, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.W.shape[0]:
        raise ConstraintError(f"input {X.shape} does not match d_in={layer.W.shape[0]}")
    return X


def forward(layer: QuantLinear, X, lam: float, wq: np.ndarray | None = None) -> np.ndarray:
    """``X (T * alpha) + lam X W``. ``wq`` freezes the quantized weight (test hook)."""
    X = _check_x(layer, X)
    lam = layer.gate(lam)
    wq = dequantize(layer.quantize()) if wq is None else wq
    Y = X @ wq
    if lam != 0.0:
        Y = Y + lam * (X @ layer.W)
    return Y


def backward(layer: QuantLinear, X, lam: float, dY, ste: bool = True, wq: np.ndarray | None = None):
    """Return ``(dL/dX, dL/dW)``. ``ste=False`` keeps only the residual path in dL/dW."""
    X = _check_x(layer, X)
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != (X.shape[0], layer.W.shape[1]):
        raise ConstraintError(f"upstream gradient {dY.shape} does not match output shape")
    lam = layer.gate(lam)
    dX = dY @ layer.effective_weight(lam, wq).T
    dW = ((1.0 if ste else 0.0) + lam) * (X.T @ dY)
    return dX, dW


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    dims: tuple[int, ...] = (64, 256, 64)
    steps: int = 2000
    lr: float = 0.05
    batch: int = 32
    seed: int = 1
    scheme: LayerScheme = "sparse34"
    granularity: Granularity = PER_CHANNEL
    arenas: bool = True
    schedule: Schedule | None = None
    log_every: int = 50
    eval_size: int = 1024

    def __post_init__(self):
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ConstraintError(f"bad layer dims {self.dims}")
        if self.steps <= 0 or self.batch <= 0 or self.log_every <= 0 or self.eval_size <= 0:
            raise ConstraintError("steps, batch, log_every and eval_size must be positive")
        if self.lr < 0:
            raise ConstraintError("learning rate must be non-negative")
        if self.schedule is None:
            self.schedule = Schedule("cosine", 0.1, self.steps)
        elif self.schedule.total_steps != self.steps:
            raise ConstraintError("schedule.total_steps must equal steps")


@dataclass
class TrainTrace:
    records: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    final_lambda: float = float("nan")
    layers: list[QuantLinear] = field(default_factory=list, repr=False)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def mean_er(self, lo: float = 0.4, hi: float = 0.6) -> float:
        """Mean over layers and recorded steps of ER(dL/dX) within a progress window."""
        last = self.records[-1]["step"]
        vals = [np.mean(r["er_per_layer"]) for r in self.records if lo * last <= r["step"] <= hi * last]
        return float(np.mean(vals))


def _init_mlp(rng: np.random.Generator, dims) -> list[np.ndarray]:
    # He init on hidden layers, unit-variance-preserving on the last
    ws = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        gain = 2.0 if i < len(dims) - 2 else 1.0
        ws.append(rng.standard_normal((a, b)) * math.sqrt(gain / a))
    return ws


def _teacher(ws, X):
    H = X
    for i, W in enumerate(ws):
        H = H @ W
        if i < len(ws) - 1:
            H = np.maximum(H, 0.0)
    return H


def mlp_forward(layers: list[QuantLinear], X, lam: float, frozen: list | None = None):
    """Forward through all layers, returning output and the per-layer caches.

    ``frozen`` supplies fixed quantized weights per layer instead of
    requantizing.
    """
    caches = []
    H = X
    for i, layer in enumerate(layers):
        wq = dequantize(layer.quantize()) if frozen is None else frozen[i]
        Z = forward(layer, H, lam, wq)
        caches.append((H, wq, Z))
        H = np.maximum(Z, 0.0) if i < len(layers) - 1 else Z
    return H, caches


def mlp_backward(layers: list[QuantLinear], caches, lam: float, dY, ste: bool = True):
    """Backpropagate through ``mlp_forward``; returns ``[(layer_index, dX, dW), ...]``."""
    grads = []
    d = dY
    for i in reversed(range(len(layers))):
        H, wq, Z = caches[i]
        if i < len(layers) - 1:
            d = d * (Z > 0)
        dX, dW = backward(layers[i], H, lam, d, ste=ste, wq=wq)
        grads.append((i, dX, dW))
        d = dX
    grads.reverse()
    return grads


def _loss(Y, target) -> tuple[float, np.ndarray]:
    r = Y - target
    return float(np.mean(r * r)), 2.0 * r / r.size


def train(config: TrainConfig) -> TrainTrace:
    rng = np.random.default_rng(config.seed)
    teacher = _init_mlp(rng, config.dims)
    layers = [
        QuantLinear(W, config.scheme, config.granularity, config.arenas)
        for W in _init_mlp(rng, config.dims)
    ]
    X_eval = rng.standard_normal((config.eval_size, config.dims[0]))
    Y_eval = _teacher(teacher, X_eval)
    sched = config.schedule
    trace = TrainTrace(layers=layers)

    for step in range(config.steps + 1):
        lam = lambda_at(sched, step) if config.arenas else 0.0
        X = rng.standard_normal((config.batch, config.dims[0]))
        Y, caches = mlp_forward(layers, X, lam)
        _, dY = _loss(Y, _teacher(teacher, X))

        grads = mlp_backward(layers, caches, lam, dY)

        if step % config.log_every == 0 or step == config.steps:
            eval_loss = _loss(mlp_forward(layers, X_eval, lam)[0], Y_eval)[0]
            trace.records.append(_record(step, eval_loss, lam, layers, grads))
        if step == config.steps:
            break
        for i, _, dW in grads:
            layers[i].W -= config.lr * dW

    trace.final_lambda = lam
    trace.final_loss = _loss(mlp_forward(layers, X_eval, 0.0)[0], Y_eval)[0]
    return trace


def _record(step, loss, lam, layers, grads) -> dict:
    ers, hists = [], []
    for layer, (_, dX, _) in zip(layers, grads):
        ers.append(effective_rank(dX).er)
        t = layer.quantize()
        hists.append(weight_histogram(layer.W, t.scales, t.granularity).to_json())
    return {"step": step, "loss": loss, "lambda": lam, "er_per_layer": ers, "hist_per_layer": hists}


def default_pack_scheme(scheme: LayerScheme) -> bitpack.PackScheme:
    return "sherry125" if scheme == "sparse34" else "dense2bit"


def export_student(
    layers: list[QuantLinear],
    path,
    granularity: Granularity | None = None,
    final_lambda: float = 0.0,
    pack_scheme: bitpack.PackScheme | None = None,
) -> dict[str, bitpack.PackedTensor]:
    """Quantize the final latent weights, pack them and write a model file.

    Refuses while the bypass is still active (``final_lambda != 0``), since
    the packed model could not reproduce the trained network.
    """
    if not layers:
        raise ConstraintError("no layers to export")
    if final_lambda != 0.0:
        raise ConstraintError(f"final lambda is {final_lambda}, export needs a fully annealed model")
    packed = {}
    for i, layer in enumerate(layers):
        g = granularity or layer.granularity
        t = LAYER_QUANTIZERS[layer.scheme](layer.W, g)
        packed[f"layer{i}"] = bitpack.pack(t, pack_scheme or default_pack_scheme(layer.scheme))
    fileio.write_model(path, packed)
    return packed
