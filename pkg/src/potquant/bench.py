"""Wall-clock comparison of the integer PoT path against float uniform dequantization.

Numbers are CPU throughput for this numpy implementation only; they say
nothing about GPU kernels.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import fp16
from .errors import InvariantError
from .kernel import assemble_array, dequant_bits, dequant_matrix_reference, dequant_uniform
from .quantizer import QuantizedMatrix
from .tensor import GroupLayout


@dataclass
class BenchRow:
    path: str
    bits: int
    rows: int
    cols: int
    threads: int
    seconds: float
    gbps: float
    elements_per_s: float
    ratio: float  # uniform time / this path's time


def random_quantized(rows: int, cols: int, bits: int, group_size: int, rng) -> QuantizedMatrix:
    """Random codes with valid scales (exponent field leaves headroom)."""
    lay = GroupLayout(rows, cols, group_size)
    q_max = 2 ** (bits - 1) - 1
    fields = rng.integers(1, 31 - q_max, (lay.groups_per_column, cols))
    mants = rng.integers(0, 1024, fields.shape)
    return QuantizedMatrix(
        layout=lay,
        bits=bits,
        scale_bits=((fields << 10) | mants).astype(np.uint16),
        signs=rng.integers(0, 2, (rows, cols)).astype(np.uint8),
        exponents=rng.integers(0, q_max + 1, (rows, cols)).astype(np.uint8),
    )


def _row_blocks(rows: int, group_size: int, threads: int) -> list[slice]:
    ngroups = -(-rows // group_size)
    cuts = np.linspace(0, ngroups, min(threads, ngroups) + 1).astype(int) * group_size
    return [slice(a, min(b, rows)) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def _pot_kernel(scale_bits, slots, bits, group_size, out, rows):
    s = np.repeat(scale_bits, group_size, axis=0)[: slots.shape[0]]
    np.add(s, assemble_array(slots, bits), out=out[rows])


def _uniform_kernel(codes, zeros, scales, group_size, out, rows):
    n = codes.shape[0]
    z = np.repeat(zeros, group_size, axis=0)[:n]
    s = np.repeat(scales, group_size, axis=0)[:n]
    out[rows] = dequant_uniform(codes, z, s).data


def _run(kernel, args_for, blocks, out, pool):
    if pool is None:
        for rows in blocks:
            kernel(*args_for(rows), out, rows)
    else:
        list(pool.map(lambda r: kernel(*args_for(r), out, r), blocks))


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_bench(rows=4096, cols=4096, bits=3, threads=1, repeats=5, group_size=128, seed=0) -> list[BenchRow]:
    if repeats < 5:
        raise ValueError("use at least 5 repeats")
    rng = np.random.default_rng(seed)
    qm = random_quantized(rows, cols, bits, group_size, rng)

    # correctness gate: integer path must be bit-identical to the float route
    if not np.array_equal(dequant_bits(qm), dequant_matrix_reference(qm)):
        raise InvariantError("integer dequantization disagrees with the reference path")

    slots = qm.codes()
    levels = 2**bits - 1
    ucodes = rng.integers(0, levels + 1, (rows, cols)).astype(np.uint8)
    uzeros = rng.integers(-levels, 1, qm.scale_bits.shape).astype(np.float32)
    uscales = fp16.round_array(rng.uniform(1e-3, 1.0, qm.scale_bits.shape)).astype(np.float32)

    blocks = _row_blocks(rows, group_size, threads)
    pot_out = np.empty((rows, cols), dtype=np.uint16)
    uni_out = np.empty((rows, cols), dtype=np.float16)

    def grp(r):
        return slice(r.start // group_size, -(-r.stop // group_size))

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        pot_t = _median_time(
            lambda: _run(_pot_kernel, lambda r: (qm.scale_bits[grp(r)], slots[r], bits, group_size), blocks, pot_out, pool),
            repeats,
        )
        uni_t = _median_time(
            lambda: _run(
                _uniform_kernel, lambda r: (ucodes[r], uzeros[grp(r)], uscales[grp(r)], group_size), blocks, uni_out, pool
            ),
            repeats,
        )
    finally:
        if pool is not None:
            pool.shutdown()

    n = rows * cols
    out = []
    for path, t in (("pot-int", pot_t), ("uniform-float", uni_t)):
        out.append(BenchRow(path, bits, rows, cols, threads, t, 2 * n / t / 1e9, n / t, uni_t / t))
    return out


def bench_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["path", "bits", "rows", "cols", "threads", "gbps", "elements_per_s", "ratio"])
    for r in rows:
        wr.writerow([r.path, r.bits, r.rows, r.cols, r.threads, f"{r.gbps:.4f}", f"{r.elements_per_s:.4g}", f"{r.ratio:.3f}"])
    return buf.getvalue()
