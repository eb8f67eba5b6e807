"""Data-agnostic power-of-two quantization with per-group scale grid search.

Each weight is stored as ``scale * sign * 2**e`` with ``e`` in ``[0, q_max]``
and one FP16 scale per group of rows in a column.  The grid search evaluates
every candidate ``s0 * b`` *after* rounding it to FP16, so the loss it
minimises is exactly the reconstruction error the dequantization kernel
will reproduce.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fp16
from .errors import InvariantError
from .tensor import GroupLayout, Tensor, padded_groups

SUPPORTED_BITS = (2, 3, 4)

FLAG_GRID_SEARCH = 0x01
FLAG_CALIBRATED = 0x02

# Keeps a chunk of the candidate x group x element cube around 32 MB.
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    group_size: int = 128
    grid_step: float = 0.01
    grid_count: int = 200

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"unsupported bit-width {self.bits}; expected one of {SUPPORTED_BITS}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not self.grid_step > 0 or self.grid_count < 1:
            raise ValueError("grid_step must be > 0 and grid_count >= 1")

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def multipliers(self) -> np.ndarray:
        return np.arange(1, self.grid_count + 1, dtype=np.float64) * self.grid_step


def bits_per_weight(bits: int, group_size: int) -> float:
    """Storage cost counting one FP16 scale per group."""
    return bits + 16.0 / group_size


def max_scale(q_max: int) -> float:
    """Largest FP16 scale whose exponent field leaves room for ``2**q_max``."""
    return fp16.decode(fp16.compose(0, 30 - q_max, fp16.MANT_MASK))


def scale_bits_valid(bits: int, q_max: int) -> bool:
    return fp16.is_normal_positive(bits) and fp16.exponent_field(bits) + q_max <= 30


def round_half_away(x):
    """Round to nearest integer, ties away from zero (vectorised)."""
    x = np.asarray(x, dtype=np.float64)
    r = np.trunc(x)
    return r + np.where(np.abs(x - r) >= 0.5, np.sign(x), 0.0)


def sign_of(w) -> np.ndarray:
    """+1/-1 with sign(0) = +1."""
    return np.where(np.asarray(w) < 0, -1.0, 1.0)


def compute_exponent(w_abs: float, s: float, q_max: int) -> int:
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    if w_abs == 0:
        return 0
    v = math.log2(w_abs / s)
    r = math.trunc(v)
    if abs(v - r) >= 0.5:
        r += 1 if v > 0 else -1
    return min(max(r, 0), q_max)


def exponents(w_abs, s, q_max: int) -> np.ndarray:
    """Vectorised :func:`compute_exponent`; ``s`` broadcasts against ``w_abs``."""
    with np.errstate(divide="ignore"):
        v = np.log2(np.asarray(w_abs, dtype=np.float64) / s)
    v = np.clip(v, -1.0, q_max + 1.0)
    return np.clip(round_half_away(v), 0, q_max).astype(np.int64)


def reconstruct(s: float, p: int, e: int) -> float:
    return s * p * 2.0**e


def group_loss(w_group, s: float, q_max: int) -> float:
    """Squared reconstruction error of one group at scale ``s``.

    Summation is strictly left to right so the value is reproducible
    element for element.
    """
    w = np.asarray(w_group, dtype=np.float64)
    e = exponents(np.abs(w), s, q_max)
    err = (w - s * sign_of(w) * np.exp2(e)) ** 2
    return float(np.cumsum(err)[-1]) if err.size else 0.0


def candidate_scales(s0, cfg: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    """FP16-rounded candidate scales for base scales ``s0``.

    Returns ``(scales, valid)`` shaped (grid_count, *s0.shape).  Scales are
    clamped up to the FP16 min normal; candidates without exponent headroom
    are flagged invalid.
    """
    s0 = np.asarray(s0, dtype=np.float64)
    b = cfg.multipliers().reshape((-1,) + (1,) * s0.ndim)
    scales = fp16.round_array(np.maximum(s0 * b, fp16.MIN_NORMAL))
    return scales, scales <= max_scale(cfg.q_max)


def base_scale(max_abs, q_max: int):
    return np.asarray(max_abs, dtype=np.float64) / (2.0**q_max - 1.0)


def _check_range(max_abs: np.ndarray) -> None:
    if not np.all(np.isfinite(max_abs)):
        raise InvariantError("weights must be finite")
    if np.any(max_abs > fp16.MAX_FINITE):
        raise InvariantError(
            f"max |W_group| = {float(np.max(max_abs)):g} exceeds the FP16 normal range"
        )


def _search(groups: np.ndarray, mask: np.ndarray, cfg: QuantConfig):
    """Grid search over flat groups (M, G). Returns scale, b index, loss."""
    M, G = groups.shape
    q_max = cfg.q_max
    w_abs = np.abs(groups)
    p = sign_of(groups)
    max_abs = np.max(np.where(mask, w_abs, 0.0), axis=1)
    _check_range(max_abs)
    scales, valid = candidate_scales(base_scale(max_abs, q_max), cfg)

    best_loss = np.full(M, np.inf)
    best_idx = np.full(M, -1, dtype=np.int64)
    best_scale = np.zeros(M)
    chunk = max(1, _CHUNK_ELEMS // max(1, M * G))
    for c0 in range(0, cfg.grid_count, chunk):
        s = scales[c0 : c0 + chunk, :, None]
        e = exponents(w_abs[None], s, q_max)
        err = np.where(mask[None], (groups[None] - s * p[None] * np.exp2(e)) ** 2, 0.0)
        loss = np.cumsum(err, axis=2)[:, :, -1]
        loss = np.where(valid[c0 : c0 + chunk], loss, np.inf)
        # strict-less in ascending b order keeps the smallest b on ties
        for k in range(loss.shape[0]):
            better = loss[k] < best_loss
            best_loss = np.where(better, loss[k], best_loss)
            best_idx = np.where(better, c0 + k, best_idx)
            best_scale = np.where(better, scales[c0 + k], best_scale)
    if np.any(best_idx < 0):
        raise InvariantError("no FP16 scale candidate has exponent headroom for this group")
    return best_scale, best_idx, best_loss


@dataclass(frozen=True)
class ScaleSearch:
    scale: float
    multiplier: float
    loss: float


def search_group_scale(w_group, cfg: QuantConfig) -> ScaleSearch:
    """Best FP16 scale ``s0 * b`` for one group over the multiplier grid."""
    w = np.asarray(w_group, dtype=np.float64).reshape(1, -1)
    if w.size == 0:
        raise ValueError("group must be non-empty")
    scale, idx, loss = _search(w, np.ones_like(w, dtype=bool), cfg)
    return ScaleSearch(float(scale[0]), float(cfg.multipliers()[idx[0]]), float(loss[0]))


@dataclass(eq=False)
class QuantizedMatrix:
    """PoT codes plus per-group FP16 scales.

    ``signs`` holds 1 for negative weights; ``exponents`` holds ``e`` in
    ``[0, q_max]``; ``scale_bits`` is (groups_per_column, d_in) uint16.
    """

    layout: GroupLayout
    bits: int
    scale_bits: np.ndarray
    signs: np.ndarray
    exponents: np.ndarray
    flags: int = 0
    multipliers: Optional[np.ndarray] = field(default=None, compare=False)
    group_losses: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.layout.shape

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.bits == other.bits
            and self.flags == other.flags
            and np.array_equal(self.scale_bits, other.scale_bits)
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.exponents, other.exponents)
        )

    def scales(self) -> np.ndarray:
        return fp16.from_bits_array(self.scale_bits)

    def codes(self) -> np.ndarray:
        """n-bit slot values: sign in the top bit, exponent below."""
        return (self.signs.astype(np.uint16) << (self.bits - 1)) | self.exponents.astype(np.uint16)

    def dequantize_reference(self) -> np.ndarray:
        """Float64 ``S * P * 2**E`` (no FP16 tricks)."""
        s = self.layout.expand(self.scales())
        p = np.where(self.signs == 1, -1.0, 1.0)
        return s * p * np.exp2(self.exponents.astype(np.float64))

    def validate(self) -> None:
        lay = self.layout
        if self.bits not in SUPPORTED_BITS:
            raise InvariantError(f"unsupported bit-width {self.bits}")
        if self.scale_bits.shape != (lay.groups_per_column, lay.d_in):
            raise InvariantError("scale grid shape does not match layout")
        if self.signs.shape != lay.shape or self.exponents.shape != lay.shape:
            raise InvariantError("code matrix shape does not match layout")
        if np.any(self.exponents > self.q_max) or np.any(self.signs > 1):
            raise InvariantError("code out of range")
        sb = self.scale_bits.astype(np.int64)
        field_ = (sb >> 10) & 0x1F
        if np.any(sb & 0x8000) or np.any(field_ == 0) or np.any(field_ + self.q_max > 30):
            raise InvariantError("scale must be positive normal FP16 with exponent headroom")


def _quantize_columns(w: np.ndarray, layout: GroupLayout, cfg: QuantConfig, skip_search: bool):
    groups, mask = padded_groups(w, layout)
    d_in, ng, G = groups.shape
    flat, fmask = groups.reshape(-1, G), mask.reshape(-1, G)
    if skip_search:
        max_abs = np.max(np.abs(flat), axis=1)
        _check_range(max_abs)
        s = fp16.round_array(np.maximum(base_scale(max_abs, cfg.q_max), fp16.MIN_NORMAL))
        if np.any(s > max_scale(cfg.q_max)):
            raise InvariantError("base scale has no exponent headroom")
        e = exponents(np.abs(flat), s[:, None], cfg.q_max)
        err = np.where(fmask, (flat - s[:, None] * sign_of(flat) * np.exp2(e)) ** 2, 0.0)
        loss = np.cumsum(err, axis=1)[:, -1]
        b = np.ones(len(s))
    else:
        s, idx, loss = _search(flat, fmask, cfg)
        b = cfg.multipliers()[idx]
    return (s.reshape(d_in, ng).T, b.reshape(d_in, ng).T, loss.reshape(d_in, ng).T)


def quantize_with_scales(w, layout: GroupLayout, bits: int, scale_bits: np.ndarray, flags: int = 0):
    """Assign codes for fixed FP16 scales (used after search and calibration)."""
    w = np.asarray(w, dtype=np.float64)
    layout.check(w)
    q_max = 2 ** (bits - 1) - 1
    s = layout.expand(fp16.from_bits_array(scale_bits))
    qm = QuantizedMatrix(
        layout=layout,
        bits=bits,
        scale_bits=np.asarray(scale_bits, dtype=np.uint16),
        signs=(w < 0).astype(np.uint8),
        exponents=exponents(np.abs(w), s, q_max).astype(np.uint8),
        flags=flags,
    )
    qm.validate()
    return qm


def quantize_step1(w, cfg: QuantConfig, skip_search: bool = False, workers: int = 1) -> QuantizedMatrix:
    """Quantize a 2-D matrix group by group.

    With ``skip_search`` every group uses ``b = 1`` (scale ``s0``).
    ``workers`` splits columns over threads; output does not depend on it.
    """
    arr = w.numpy() if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    layout = GroupLayout(arr.shape[0], arr.shape[1], cfg.group_size)

    if workers > 1 and layout.d_in > 1:
        bounds = np.linspace(0, layout.d_in, min(workers, layout.d_in) + 1).astype(int)
        parts = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

        def run(part):
            lo, hi = part
            sub = GroupLayout(layout.d_out, hi - lo, cfg.group_size)
            return _quantize_columns(arr[:, lo:hi], sub, cfg, skip_search)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, parts))
        s, b, loss = (np.concatenate([r[k] for r in results], axis=1) for k in range(3))
    else:
        s, b, loss = _quantize_columns(arr, layout, cfg, skip_search)

    flags = 0 if skip_search else FLAG_GRID_SEARCH
    qm = quantize_with_scales(arr, layout, cfg.bits, fp16.to_bits_array(s), flags)
    qm.multipliers = b
    qm.group_losses = loss
    return qm


@dataclass
class UniformQuantized:
    """Asymmetric round-to-nearest codes with per-group scale and zero-point."""

    layout: GroupLayout
    bits: int
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray

    def dequantize_reference(self) -> np.ndarray:
        return (self.codes + self.layout.expand(self.zeros)) * self.layout.expand(self.scales)


def quantize_rtn_uniform(w, cfg: QuantConfig) -> UniformQuantized:
    arr = w.numpy() if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    layout = GroupLayout(arr.shape[0], arr.shape[1], cfg.group_size)
    groups, mask = padded_groups(arr, layout)
    hi = np.max(np.where(mask, groups, -np.inf), axis=2).T
    lo = np.min(np.where(mask, groups, np.inf), axis=2).T
    levels = 2**cfg.bits - 1
    const = hi == lo
    # constant group: S = |c| (1 for c = 0) and Z = sign(c) rebuild c exactly
    const_scale = np.where(lo == 0, 1.0, np.abs(lo))
    scales = np.where(const, const_scale, (hi - lo) / levels)
    zeros = round_half_away(lo / scales)
    codes = round_half_away(arr / layout.expand(scales)) - layout.expand(zeros)
    codes = np.clip(codes, 0, levels)
    codes[layout.expand(const)] = 0
    return UniformQuantized(layout, cfg.bits, codes.astype(np.uint8), scales, zeros)
