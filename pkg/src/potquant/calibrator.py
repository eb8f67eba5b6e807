"""Data-dependent refinement of group scales.

Every group scale gets a residual ``gamma`` and the effective scale is
``S * (1 + gamma)``.  Exponents are recomputed from the adjusted scales on
every step, the block output of the quantized weights is compared with the
output of the original weights on the same inputs, and ``gamma`` follows
plain gradient descent on

    ||F(W, X) - F(W~(gamma), X)||_F^2 + (weight_decay / 2) * ||gamma||_F^2

Two gradient rules are available for ``dW~/dS_hat``:

``detach-exponent``
    ``P * 2**E`` with the exponent held fixed for the step.
``literal-ste``
    differentiates ``E`` through ``log2(|W| / S_hat)``.  For elements whose
    exponent is not clamped this cancels the first term exactly, so only
    saturated elements contribute.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import fp16
from .errors import DivergenceError
from .quantizer import (
    FLAG_CALIBRATED,
    QuantizedMatrix,
    max_scale,
    quantize_with_scales,
    round_half_away,
    sign_of,
)
from .tensor import GroupLayout

log = logging.getLogger(__name__)

GRAD_MODES = ("detach-exponent", "literal-ste")
GAMMA_FLOOR = -0.999

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class CalibConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-1
    epochs: int = 10
    grad_mode: str = "detach-exponent"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad mode {self.grad_mode!r}; expected one of {GRAD_MODES}")

    @staticmethod
    def default_epochs(bits: int) -> int:
        return 40 if bits <= 2 else 10


# --------------------------------------------------------------------------
# forward models


def linear_forward(w, x) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"shape mismatch: X {x.shape} @ W {w.shape}")
    return x @ w


def gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def gelu_grad(z):
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def softmax(a, axis=-1):
    a = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(a)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class BlockWeights:
    """Single-head attention plus a two-layer MLP, all in ``X @ W`` form."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_1: np.ndarray
    w_2: np.ndarray

    NAMES = ("w_q", "w_k", "w_v", "w_1", "w_2")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.w_q.shape[0]
        ff = self.w_1.shape[1]
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be ({d}, {d})")
        if self.w_1.shape != (d, ff) or self.w_2.shape != (ff, d):
            raise ValueError("MLP weights must be (d, d_ff) and (d_ff, d)")
        if not all(np.all(np.isfinite(m)) for m in self.as_list()):
            raise ValueError("block weights must be finite")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    def as_list(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.NAMES]

    @classmethod
    def from_list(cls, mats: Sequence[np.ndarray]) -> "BlockWeights":
        return cls(*mats)


def _block_forward(bw: BlockWeights, x: np.ndarray):
    d = bw.d
    # overflow surfaces as the explicit check below
    with np.errstate(over="ignore", invalid="ignore"):
        q, k, v = x @ bw.w_q, x @ bw.w_k, x @ bw.w_v
        p = softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(d))
        h = x + p @ v
        z = h @ bw.w_1
        u = gelu(z)
        y = u @ bw.w_2
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite value in block forward")
    return y, (q, k, v, p, h, z, u)


def block_forward(bw: BlockWeights, x) -> np.ndarray:
    """``MLP(X + Attn(X))`` for X shaped (B, T, d) or (T, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != bw.d:
        raise ValueError(f"input feature dim {x.shape[-1]} != {bw.d}")
    return _block_forward(bw, x)[0]


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def block_backward(bw: BlockWeights, x: np.ndarray, cache, dy: np.ndarray) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. the five weights given dL/dY."""
    q, k, v, p, h, z, u = cache
    scale = 1.0 / math.sqrt(bw.d)
    g_w2 = _flat(u).T @ _flat(dy)
    dz = (dy @ bw.w_2.T) * gelu_grad(z)
    g_w1 = _flat(h).T @ _flat(dz)
    da = dz @ bw.w_1.T
    dp = da @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ da
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    xf = _flat(x)
    return [xf.T @ _flat(dq), xf.T @ _flat(dk), xf.T @ _flat(dv), g_w1, g_w2]


@dataclass(frozen=True)
class Model:
    """Forward/backward pair over a list of weight matrices."""

    name: str
    forward: Callable
    backward: Callable


def _lin_fwd(ws, x):
    return linear_forward(ws[0], x), None


def _lin_bwd(ws, x, cache, dy):
    return [_flat(x).T @ _flat(dy)]


def _blk_fwd(ws, x):
    return _block_forward(BlockWeights.from_list(ws), x)


def _blk_bwd(ws, x, cache, dy):
    return block_backward(BlockWeights.from_list(ws), x, cache, dy)


LINEAR = Model("linear", _lin_fwd, _lin_bwd)
BLOCK = Model("block", _blk_fwd, _blk_bwd)
MODELS = {"linear": LINEAR, "block": BLOCK}


# --------------------------------------------------------------------------
# scale adjustment and requantization


def adjust_scales(scales, gamma) -> np.ndarray:
    scales = np.asarray(scales, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if scales.shape != gamma.shape:
        raise ValueError(f"scale grid {scales.shape} and gamma {gamma.shape} differ")
    adjusted = scales * (1.0 + gamma)
    if np.any(adjusted <= 0):
        raise ValueError("adjusted scale must stay positive")
    return adjusted


@dataclass
class Requantized:
    weights: np.ndarray  # W~ (d_out, d_in)
    exponents: np.ndarray
    clamped: np.ndarray  # True where the clamp to [0, q_max] was active


def requantize(w, s_hat_grid, layout: GroupLayout, q_max: int) -> Requantized:
    """Fresh exponents from adjusted per-group scales, then ``S_hat * P * 2**E``."""
    w = np.asarray(w, dtype=np.float64)
    s = layout.expand(np.asarray(s_hat_grid, dtype=np.float64))
    with np.errstate(divide="ignore"):
        raw = round_half_away(np.clip(np.log2(np.abs(w) / s), -1.0, q_max + 1.0))
    clamped = (raw < 0) | (raw > q_max)
    e = np.clip(raw, 0, q_max)
    return Requantized(s * sign_of(w) * np.exp2(e), e.astype(np.int64), clamped)


def _group_sum(per_element: np.ndarray, layout: GroupLayout) -> np.ndarray:
    G, ng = layout.group_size, layout.groups_per_column
    pad = ng * G - layout.d_out
    if pad:
        per_element = np.pad(per_element, ((0, pad), (0, 0)))
    return per_element.reshape(ng, G, layout.d_in).sum(axis=1)


def dwtilde_dscale(w, rq: Requantized, mode: str) -> np.ndarray:
    """Per-element ``dW~/dS_hat`` under the chosen gradient rule."""
    base = sign_of(w) * np.exp2(rq.exponents)
    if mode == "detach-exponent":
        return base
    if mode == "literal-ste":
        # 1 + S_hat*ln2*dE/dS_hat with dE/dS_hat = -1/(S_hat*ln2) when unclamped
        return np.where(rq.clamped, base, base * 0.0)
    raise ValueError(f"unknown grad mode {mode!r}")


# --------------------------------------------------------------------------
# loss and gradient


@dataclass
class LossTerms:
    total: float
    data: float
    reg: float


class Objective:
    """Q2 for a fixed set of original weights and Step-1 scales."""

    def __init__(self, model: Model, weights: Sequence, scales: Sequence, layouts: Sequence[GroupLayout], q_max: int):
        if not (len(weights) == len(scales) == len(layouts)):
            raise ValueError("weights, scales and layouts must have equal length")
        self.model = model
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.scales = [np.asarray(s, dtype=np.float64) for s in scales]
        self.layouts = list(layouts)
        self.q_max = q_max
        for w, s, lay in zip(self.weights, self.scales, self.layouts):
            lay.check(w)
            if s.shape != (lay.groups_per_column, lay.d_in):
                raise ValueError("scale grid does not match layout")

    def zero_gamma(self) -> list[np.ndarray]:
        return [np.zeros_like(s) for s in self.scales]

    def reference(self, x) -> np.ndarray:
        return self.model.forward(self.weights, x)[0]

    def quantized_weights(self, gammas) -> list[Requantized]:
        return [
            requantize(w, adjust_scales(s, g), lay, self.q_max)
            for w, s, g, lay in zip(self.weights, self.scales, gammas, self.layouts)
        ]

    def loss(self, gammas, x, weight_decay: float, ref=None) -> LossTerms:
        x = np.asarray(x, dtype=np.float64)
        ref = self.reference(x) if ref is None else ref
        rqs = self.quantized_weights(gammas)
        out = self.model.forward([r.weights for r in rqs], x)[0]
        data = float(np.sum((ref - out) ** 2))
        reg = 0.5 * weight_decay * float(sum(np.sum(g * g) for g in gammas))
        return LossTerms(data + reg, data, reg)

    def grad(self, gammas, x, weight_decay: float, mode: str = "detach-exponent", ref=None):
        """Return ``(grads, LossTerms)`` with one gradient grid per matrix."""
        x = np.asarray(x, dtype=np.float64)
        ref = self.reference(x) if ref is None else ref
        rqs = self.quantized_weights(gammas)
        wq = [r.weights for r in rqs]
        out, cache = self.model.forward(wq, x)
        diff = out - ref
        data = float(np.sum(diff * diff))
        reg = 0.5 * weight_decay * float(sum(np.sum(g * g) for g in gammas))
        g_w = self.model.backward(wq, x, cache, 2.0 * diff)
        grads = []
        for w, s, g, lay, rq, gw in zip(self.weights, self.scales, gammas, self.layouts, rqs, g_w):
            g_shat = _group_sum(gw * dwtilde_dscale(w, rq, mode), lay)
            grads.append(g_shat * s + weight_decay * g)
        return grads, LossTerms(data + reg, data, reg)


def grad_gamma(weights, scales, gammas, x, layouts, q_max, weight_decay=0.0, mode="detach-exponent", model="linear"):
    """Functional wrapper around :meth:`Objective.grad`."""
    obj = Objective(MODELS[model], weights, scales, layouts, q_max)
    return obj.grad(gammas, x, weight_decay, mode)[0]


def loss_q2(weights, quantized_weights, x, gammas=(), weight_decay=0.0, model="linear") -> float:
    """Q2 for explicit quantized weights (no requantization)."""
    m = MODELS[model]
    x = np.asarray(x, dtype=np.float64)
    ref = m.forward([np.asarray(w, dtype=np.float64) for w in weights], x)[0]
    out = m.forward([np.asarray(w, dtype=np.float64) for w in quantized_weights], x)[0]
    reg = 0.5 * weight_decay * float(sum(np.sum(np.asarray(g) ** 2) for g in gammas))
    return float(np.sum((ref - out) ** 2)) + reg


# --------------------------------------------------------------------------
# optimisation loop


@dataclass
class EpochLoss:
    epoch: int
    loss: float
    data_term: float
    reg_term: float


@dataclass
class CalibrationResult:
    gammas: list[np.ndarray]
    scales: list[np.ndarray]  # refined S * (1 + gamma), float64
    quantized: list[QuantizedMatrix]  # FP16-rounded scales with requantized codes
    history: list[EpochLoss] = field(default_factory=list)


def export_scales(s_hat: np.ndarray, q_max: int) -> np.ndarray:
    """Round refined scales to FP16 bits, clamped into the kernel's valid range."""
    return fp16.to_bits_array(np.clip(s_hat, fp16.MIN_NORMAL, max_scale(q_max)))


def calibrate(
    weights: Sequence,
    quantized: Sequence[QuantizedMatrix],
    batches: Sequence,
    cfg: CalibConfig,
    model: str = "linear",
) -> CalibrationResult:
    """Fine-tune one residual per group scale by gradient descent.

    ``batches`` is a sequence of input arrays; an empty sequence or
    ``epochs == 0`` leaves the scales untouched.
    """
    if not quantized:
        raise ValueError("need at least one quantized matrix")
    bits = quantized[0].bits
    if any(q.bits != bits for q in quantized):
        raise ValueError("all matrices must share one bit-width")
    obj = Objective(
        MODELS[model], weights, [q.scales() for q in quantized], [q.layout for q in quantized], quantized[0].q_max
    )
    batches = [np.asarray(b, dtype=np.float64) for b in batches]
    with np.errstate(over="ignore", invalid="ignore"):
        refs = [obj.reference(b) for b in batches]
    gammas = obj.zero_gamma()
    history: list[EpochLoss] = []

    for epoch in range(1, cfg.epochs + 1):
        if not batches:
            break
        tot = data = reg = 0.0
        for bi, (x, ref) in enumerate(zip(batches, refs)):
            with np.errstate(over="ignore", invalid="ignore"):
                grads, terms = obj.grad(gammas, x, cfg.weight_decay, cfg.grad_mode, ref=ref)
            if not math.isfinite(terms.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}: {terms}")
            tot += terms.total
            data += terms.data
            reg += terms.reg
            gammas = [np.maximum(g - cfg.lr * d, GAMMA_FLOOR) for g, d in zip(gammas, grads)]
        n = len(batches)
        history.append(EpochLoss(epoch, tot / n, data / n, reg / n))
        log.info("epoch %d loss %.6g (data %.6g reg %.6g)", epoch, tot / n, data / n, reg / n)

    refined = [adjust_scales(s, g) for s, g in zip(obj.scales, gammas)]
    out = []
    for w, q, s_hat, g in zip(obj.weights, quantized, refined, gammas):
        if np.all(g == 0):
            bits_grid = q.scale_bits.copy()
        else:
            bits_grid = export_scales(s_hat, q.q_max)
        flags = q.flags | (FLAG_CALIBRATED if cfg.epochs and batches else 0)
        out.append(quantize_with_scales(w, q.layout, q.bits, bits_grid, flags))
    return CalibrationResult(gammas, refined, out, history)
