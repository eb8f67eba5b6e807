"""Packed PoT code storage and integer-addition dequantization.

An n-bit code slot holds the sign in its top bit and the exponent in the
low ``n - 1`` bits.  Dequantization never multiplies: the slot is turned
into the 16-bit addend ``(S << 15) | (E << 10)`` and added to the FP16
scale pattern.  Adding ``E << 10`` bumps the exponent field, i.e. multiplies
by ``2**E``, and the sign bit lands on bit 15 of a positive scale.  Both are
exact as long as the scale is positive normal with
``exponent_field + q_max <= 30``.

POTQ file layout (little-endian)::

    magic   b"POTQ"
    u16     version (1)
    u8      n_bits
    u8      flags
    u32     group_size
    u32     d_out
    u32     d_in
    u16     scale bits, column-major: for each column, for each group
    u32     packed code words, column by column (each column starts a new word)
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from . import fp16
from .errors import FormatError, InvariantError
from .quantizer import SUPPORTED_BITS, QuantizedMatrix, UniformQuantized
from .tensor import GroupLayout, Tensor

POTQ_MAGIC = b"POTQ"
POTQ_VERSION = 1
_HEADER = struct.Struct("<4sHBBIII")


def codes_per_word(n: int) -> int:
    return 32 // n


def words_for(count: int, n: int) -> int:
    return math.ceil(count / codes_per_word(n))


def pack(codes, n: int) -> np.ndarray:
    """Pack n-bit slots LSB-first into uint32 words; spare high bits stay zero."""
    codes = np.asarray(codes, dtype=np.uint32).ravel()
    if n not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit-width {n}")
    if np.any(codes >> n):
        raise ValueError(f"code does not fit in {n} bits")
    per = codes_per_word(n)
    nwords = words_for(codes.size, n)
    padded = np.zeros(nwords * per, dtype=np.uint32)
    padded[: codes.size] = codes
    shifts = (np.arange(per, dtype=np.uint32) * n)[None, :]
    return np.bitwise_or.reduce(padded.reshape(nwords, per) << shifts, axis=1).astype(np.uint32)


def unpack(words, count: int, n: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint32).ravel()
    per = codes_per_word(n)
    if words.size < words_for(count, n):
        raise ValueError("not enough words for the requested code count")
    shifts = (np.arange(per, dtype=np.uint32) * n)[None, :]
    slots = (words[:, None] >> shifts) & np.uint32((1 << n) - 1)
    return slots.ravel()[:count].astype(np.uint8)


def encode_slot(sign: int, e: int, n: int) -> int:
    if not 0 <= e < 1 << (n - 1):
        raise ValueError(f"exponent {e} out of range for {n}-bit codes")
    return (sign << (n - 1)) | e


def assemble_signed_exponent(slot: int, n: int) -> int:
    """Map an n-bit slot to the 16-bit addend ``(S << 15) | (E << 10)``.

    Goes through the 6-bit ``S0000E..E`` form: mask off the exponent, move
    the sign to bit 5, OR them, then align to the FP16 exponent field.
    """
    exp_part = slot & ((1 << (n - 1)) - 1)
    sign_part = (slot >> (n - 1)) << 5
    signed = sign_part | exp_part
    return (signed << 10) & 0xFFFF


def assemble_array(slots, n: int) -> np.ndarray:
    slots = np.asarray(slots, dtype=np.uint16)
    exp_part = slots & np.uint16((1 << (n - 1)) - 1)
    sign_part = (slots >> np.uint16(n - 1)) << np.uint16(5)
    return (sign_part | exp_part) << np.uint16(10)


def check_scale_bits(scale_bits, q_max: int) -> None:
    sb = np.asarray(scale_bits, dtype=np.int64)
    field_ = (sb >> 10) & 0x1F
    if np.any(sb & 0x8000) or np.any(field_ == 0) or np.any(field_ + q_max > 30):
        raise InvariantError("scale must be positive normal FP16 with exponent_field + q_max <= 30")


def dequant_code(slot: int, scale_bits: int, n: int, check: bool = True) -> int:
    """One 16-bit integer addition: ``scale_bits + addend``."""
    if check:
        check_scale_bits(scale_bits, 2 ** (n - 1) - 1)
    return (scale_bits + assemble_signed_exponent(slot, n)) & 0xFFFF


def dequant_code_reference(slot: int, scale_bits: int, n: int) -> int:
    """Float route: encode(decode(s) * (-1)**S * 2**E)."""
    sign, e = slot >> (n - 1), slot & ((1 << (n - 1)) - 1)
    return fp16.encode(fp16.decode(scale_bits) * (-1.0) ** sign * 2.0**e)


def dequant_bits(qm: QuantizedMatrix) -> np.ndarray:
    """uint16 FP16 patterns of the dequantized matrix (integer path)."""
    check_scale_bits(qm.scale_bits, qm.q_max)
    scale = qm.layout.expand(qm.scale_bits.astype(np.uint16))
    return scale + assemble_array(qm.codes(), qm.bits)


def dequant_matrix(qm: QuantizedMatrix) -> Tensor:
    return Tensor(dequant_bits(qm).view(np.float16), "f16")


def dequant_matrix_reference(qm: QuantizedMatrix) -> np.ndarray:
    """Same result via decode/multiply/encode, for cross-checking."""
    return fp16.to_bits_array(qm.dequantize_reference())


def dequant_uniform(codes, zeros, scales) -> Tensor:
    """``(codes + Z) * S`` with float add and multiply, emitted as FP16."""
    vals = (np.asarray(codes, dtype=np.float32) + np.asarray(zeros, dtype=np.float32)) * np.asarray(
        scales, dtype=np.float32
    )
    return Tensor(vals.astype(np.float16), "f16")


def dequant_uniform_matrix(uq: UniformQuantized) -> Tensor:
    return dequant_uniform(uq.codes, uq.layout.expand(uq.zeros), uq.layout.expand(uq.scales))


def gemm_dequant(qm: QuantizedMatrix, x) -> np.ndarray:
    """``X @ W`` with W dequantized first; f32 accumulation."""
    x = x.numpy(np.float32) if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    w = dequant_bits(qm).view(np.float16).astype(np.float32)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"inner dimensions differ: {x.shape} @ {w.shape}")
    return np.matmul(x, w, dtype=np.float32)


def potq_to_bytes(qm: QuantizedMatrix) -> bytes:
    qm.validate()
    lay = qm.layout
    out = [_HEADER.pack(POTQ_MAGIC, POTQ_VERSION, qm.bits, qm.flags, lay.group_size, lay.d_out, lay.d_in)]
    # scale_bits is (groups, columns); transpose for column-major order
    out.append(np.ascontiguousarray(qm.scale_bits.T, dtype="<u2").tobytes())
    codes = qm.codes()
    for j in range(lay.d_in):
        out.append(pack(codes[:, j], qm.bits).astype("<u4").tobytes())
    return b"".join(out)


def potq_from_bytes(buf: bytes) -> QuantizedMatrix:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, bits, flags, G, d_out, d_in = _HEADER.unpack_from(buf, 0)
    if magic != POTQ_MAGIC:
        raise FormatError("bad magic")
    if version != POTQ_VERSION:
        raise FormatError(f"unsupported version {version}")
    if bits not in SUPPORTED_BITS:
        raise FormatError(f"unsupported bit-width {bits}")
    if G < 1 or d_out < 1 or d_in < 1:
        raise FormatError("zero dimension in header")
    layout = GroupLayout(d_out, d_in, G)
    ng = layout.groups_per_column
    wpc = words_for(d_out, bits)
    expected = _HEADER.size + 2 * ng * d_in + 4 * wpc * d_in
    if len(buf) < expected:
        raise FormatError("truncated payload")
    if len(buf) > expected:
        raise FormatError("trailing bytes after payload")
    off = _HEADER.size
    scale_bits = np.frombuffer(buf, "<u2", ng * d_in, off).reshape(d_in, ng).T.astype(np.uint16)
    off += 2 * ng * d_in
    words = np.frombuffer(buf, "<u4", wpc * d_in, off).reshape(d_in, wpc)
    per = codes_per_word(bits)
    slack_bits = 32 - per * bits
    codes = np.empty((d_out, d_in), dtype=np.uint8)
    for j in range(d_in):
        if slack_bits and np.any(words[j] >> np.uint32(per * bits)):
            raise FormatError("non-zero padding bits")
        col = unpack(words[j], wpc * per, bits)
        if np.any(col[d_out:]):
            raise FormatError("non-zero padding codes")
        codes[:, j] = col[:d_out]
    qm = QuantizedMatrix(
        layout=layout,
        bits=bits,
        scale_bits=scale_bits,
        signs=(codes >> (bits - 1)).astype(np.uint8),
        exponents=(codes & ((1 << (bits - 1)) - 1)).astype(np.uint8),
        flags=flags,
    )
    try:
        qm.validate()
    except InvariantError as exc:
        raise FormatError(str(exc)) from exc
    return qm


def write_potq(path, qm: QuantizedMatrix) -> None:
    Path(path).write_bytes(potq_to_bytes(qm))


def read_potq(path) -> QuantizedMatrix:
    return potq_from_bytes(Path(path).read_bytes())
