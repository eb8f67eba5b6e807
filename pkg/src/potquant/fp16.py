"""Bit-exact IEEE binary16 encode/decode.

Scalar routines work on Python ints holding the 16-bit pattern; the
``*_array`` helpers are the vectorised equivalents used by the quantizer
and kernel (numpy's float16 cast is round-to-nearest-even as well).
"""

from __future__ import annotations

import math

import numpy as np

SIGN_MASK = 0x8000
EXP_MASK = 0x7C00
MANT_MASK = 0x03FF
EXP_BIAS = 15
MANT_BITS = 10

POS_INF = 0x7C00
NEG_INF = 0xFC00
CANONICAL_NAN = 0x7E00

MIN_NORMAL = 2.0**-14
MAX_FINITE = 65504.0


def compose(sign: int, exponent: int, mantissa: int) -> int:
    if not (0 <= sign <= 1 and 0 <= exponent <= 31 and 0 <= mantissa <= MANT_MASK):
        raise ValueError(f"field out of range: S={sign} E={exponent} M={mantissa}")
    return (sign << 15) | (exponent << MANT_BITS) | mantissa


def decompose(bits: int) -> tuple[int, int, int]:
    """Split a pattern into (sign, biased exponent field, mantissa)."""
    bits &= 0xFFFF
    return bits >> 15, (bits & EXP_MASK) >> MANT_BITS, bits & MANT_MASK


def exponent_field(bits: int) -> int:
    return (bits & EXP_MASK) >> MANT_BITS


def decode(bits: int) -> float:
    sign, exp, mant = decompose(bits)
    if exp == 31:
        value = math.inf if mant == 0 else math.nan
    elif exp == 0:
        value = math.ldexp(mant, -24)
    else:
        value = math.ldexp(1024 + mant, exp - EXP_BIAS - MANT_BITS)
    return -value if sign else value


def encode(x: float) -> int:
    """Round ``x`` to the nearest half (ties to even) and return its bits.

    Overflow saturates to infinity, underflow to a signed zero, and every
    NaN maps to :data:`CANONICAL_NAN`.
    """
    x = float(x)
    if math.isnan(x):
        return CANONICAL_NAN
    sign = SIGN_MASK if math.copysign(1.0, x) < 0 else 0
    a = abs(x)
    if math.isinf(a):
        return sign | POS_INF
    if a == 0.0:
        return sign

    frac, e = math.frexp(a)  # a = frac * 2**e, 0.5 <= frac < 1
    mant = int(frac * (1 << 53))  # a = mant * 2**(e - 53), exactly
    k = e - 1  # a in [2**k, 2**(k+1))
    quantum = max(k - MANT_BITS, -24)
    shift = quantum - (e - 53)
    if shift >= 60:
        return sign
    units = mant >> shift
    rem = mant & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and units & 1):
        units += 1

    if k < -14:
        # subnormal; units == 1024 lands exactly on the min normal pattern
        return sign | units
    if units == 2048:
        units = 1024
        k += 1
    field = k + EXP_BIAS
    if field >= 31:
        return sign | POS_INF
    return sign | (field << MANT_BITS) | (units - 1024)


def is_normal_positive(bits: int) -> bool:
    sign, exp, _ = decompose(bits)
    return sign == 0 and 0 < exp < 31


def round_to_half(x: float) -> float:
    return decode(encode(x))


def to_bits_array(values) -> np.ndarray:
    """Vectorised encode: float array -> uint16 patterns."""
    with np.errstate(over="ignore"):
        half = np.asarray(values, dtype=np.float64).astype(np.float16)
    bits = half.view(np.uint16).copy()
    bits[np.isnan(half)] = CANONICAL_NAN
    return bits


def from_bits_array(bits) -> np.ndarray:
    """Vectorised decode: uint16 patterns -> float64 values."""
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float64)


def round_array(values) -> np.ndarray:
    return from_bits_array(to_bits_array(values))
