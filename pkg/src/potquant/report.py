"""Evaluation metrics, multiplier histograms and the ablation runner."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibrator import BlockWeights, CalibConfig, EpochLoss, block_forward, calibrate, linear_forward
from .errors import InvariantError
from .quantizer import QuantConfig, QuantizedMatrix, base_scale, bits_per_weight, quantize_step1
from .tensor import GroupLayout, padded_groups


@dataclass
class RunReport:
    weight_mse: float
    max_abs_error: float
    bits_per_weight: float
    group_count: int
    output_mse: Optional[float] = None
    histogram: list[tuple[float, int]] = field(default_factory=list)
    loss_series: list[EpochLoss] = field(default_factory=list)
    ablation: dict[str, float] = field(default_factory=dict)

    def check(self) -> None:
        values = [self.weight_mse, self.max_abs_error, self.bits_per_weight]
        values += [] if self.output_mse is None else [self.output_mse]
        values += list(self.ablation.values()) + [e.loss for e in self.loss_series]
        if not all(math.isfinite(v) for v in values):
            raise InvariantError("report contains non-finite metrics")
        if self.histogram and sum(c for _, c in self.histogram) != self.group_count:
            raise InvariantError("histogram counts do not sum to the group count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = [list(b) for b in self.histogram]
        return d


def multiplier_histogram(multipliers, step: float = 0.01, count: int = 200) -> list[tuple[float, int]]:
    """Count multipliers per grid point; bin ``i`` is centred on ``i * step``.

    Returns ``(bin_lower, count)`` for all ``count`` bins.
    """
    b = np.asarray(multipliers, dtype=np.float64).ravel()
    idx = np.clip(np.rint(b / step), 1, count).astype(np.int64)
    counts = np.bincount(idx, minlength=count + 1)[1:]
    return [((i - 0.5) * step, int(c)) for i, c in zip(range(1, count + 1), counts)]


def implied_multipliers(w: np.ndarray, qm: QuantizedMatrix) -> np.ndarray:
    """``scale / s0`` per group, recovered from the original weights.

    All-zero groups (``s0 == 0``) report 0, which lands in the first bin.
    """
    groups, mask = padded_groups(np.asarray(w, dtype=np.float64), qm.layout)
    s0 = base_scale(np.max(np.abs(groups) * mask, axis=2).T, qm.q_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s0 > 0, qm.scales() / s0, 0.0)


def histogram_csv(hist: Sequence[tuple[float, int]]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["bin_lower", "count"])
    for lo, c in hist:
        wr.writerow([f"{lo:.4f}", c])
    return buf.getvalue()


def loss_csv(history: Sequence[EpochLoss]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "loss", "data_term", "reg_term"])
    for h in history:
        wr.writerow([h.epoch, repr(h.loss), repr(h.data_term), repr(h.reg_term)])
    return buf.getvalue()


def split_rows(w: np.ndarray, parts: int) -> list[np.ndarray]:
    if w.shape[0] % parts:
        raise ValueError(f"{w.shape[0]} rows cannot be split into {parts} equal matrices")
    return np.split(w, parts, axis=0)


def split_quantized(qm: QuantizedMatrix, parts: int) -> list[QuantizedMatrix]:
    """Split a row-stacked matrix into ``parts`` matrices along group boundaries."""
    rows = qm.layout.d_out // parts
    G = qm.layout.group_size
    if qm.layout.d_out % parts or rows % G:
        raise ValueError("stacked matrices must split evenly on group boundaries")
    gpp = rows // G
    out = []
    for k in range(parts):
        r = slice(k * rows, (k + 1) * rows)
        out.append(
            QuantizedMatrix(
                layout=GroupLayout(rows, qm.layout.d_in, G),
                bits=qm.bits,
                scale_bits=qm.scale_bits[k * gpp : (k + 1) * gpp].copy(),
                signs=qm.signs[r].copy(),
                exponents=qm.exponents[r].copy(),
                flags=qm.flags,
            )
        )
    return out


def stack_quantized(qms: Sequence[QuantizedMatrix]) -> QuantizedMatrix:
    first = qms[0]
    lay = first.layout
    if lay.d_out % lay.group_size:
        raise ValueError("stacked matrices must end on group boundaries")
    flags = 0
    for q in qms:
        flags |= q.flags
    return QuantizedMatrix(
        layout=GroupLayout(lay.d_out * len(qms), lay.d_in, lay.group_size),
        bits=first.bits,
        scale_bits=np.concatenate([q.scale_bits for q in qms]),
        signs=np.concatenate([q.signs for q in qms]),
        exponents=np.concatenate([q.exponents for q in qms]),
        flags=flags,
    )


def model_output(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Linear ``X @ W`` for 2-D inputs, transformer block for 3-D inputs.

    In block mode ``w`` is the row-stack [W_Q; W_K; W_V; W_1; W_2] of five
    ``d x d`` matrices.
    """
    if x.ndim == 2:
        return linear_forward(w, x)
    if x.ndim == 3:
        return block_forward(BlockWeights.from_list(split_rows(w, 5)), x)
    raise ValueError(f"inputs must be 2-D or 3-D, got shape {x.shape}")


def evaluate(w, qm: QuantizedMatrix, inputs=None, grid_step: float = 0.01, grid_count: int = 200) -> RunReport:
    w = np.asarray(w, dtype=np.float64)
    qm.layout.check(w)
    deq = qm.dequantize_reference()
    err = deq - w
    output_mse = None
    if inputs is not None:
        x = np.asarray(inputs, dtype=np.float64)
        output_mse = float(np.mean((model_output(w, x) - model_output(deq, x)) ** 2))
    mult = qm.multipliers if qm.multipliers is not None else implied_multipliers(w, qm)
    report = RunReport(
        weight_mse=float(np.mean(err**2)),
        max_abs_error=float(np.max(np.abs(err))),
        bits_per_weight=bits_per_weight(qm.bits, qm.layout.group_size),
        group_count=qm.layout.num_groups,
        output_mse=output_mse,
        histogram=multiplier_histogram(mult, grid_step, grid_count),
    )
    report.check()
    return report


def make_batches(x: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split calibration data along its first axis."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [x[i : i + batch_size] for i in range(0, x.shape[0], batch_size)]


def calibrate_stacked(w, qm: QuantizedMatrix, calib, cfg: CalibConfig, batch_size: int):
    """Run calibration on a linear layer (2-D inputs) or stacked block (3-D)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(calib, dtype=np.float64)
    qm.layout.check(w)
    if x.shape[-1] != (w.shape[0] // 5 if x.ndim == 3 else w.shape[0]):
        raise ValueError(f"calibration feature dim {x.shape[-1]} does not match weights {w.shape}")
    batches = make_batches(x, batch_size)
    if x.ndim == 2:
        res = calibrate([w], [qm], batches, cfg, model="linear")
        return res.quantized[0], res
    if x.ndim == 3:
        res = calibrate(split_rows(w, 5), split_quantized(qm, 5), batches, cfg, model="block")
        return stack_quantized(res.quantized), res
    raise ValueError(f"calibration inputs must be 2-D or 3-D, got shape {x.shape}")


def run_ablation(
    w,
    calib,
    eval_inputs,
    qcfg: QuantConfig,
    ccfg: CalibConfig,
    batch_size: int = 8,
) -> dict[str, float]:
    """Output MSE for the four Step1 x Step2 arms."""
    out = {}
    for step1 in (False, True):
        qm = quantize_step1(w, qcfg, skip_search=not step1)
        for step2 in (False, True):
            q = calibrate_stacked(w, qm, calib, ccfg, batch_size)[0] if step2 else qm
            key = f"step1={'on' if step1 else 'off'},step2={'on' if step2 else 'off'}"
            out[key] = evaluate(w, q, eval_inputs, qcfg.grid_step, qcfg.grid_count).output_mse
    return out
