"""``potquant`` command line.

Exit codes: 0 on success, 1 for usage errors, 2 for bad data or a failed
invariant.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import bench_csv, run_bench
from .calibrator import GRAD_MODES, CalibConfig
from .errors import PotQuantError
from .kernel import read_potq, write_potq
from .quantizer import SUPPORTED_BITS, QuantConfig, quantize_step1
from .report import (
    calibrate_stacked,
    evaluate,
    histogram_csv,
    loss_csv,
    run_ablation,
)
from .tensor import Tensor, read_tensor, write_tensor

log = logging.getLogger("potquant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bits(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if n not in SUPPORTED_BITS:
        raise argparse.ArgumentTypeError(f"unsupported bit-width {n}; choose from {SUPPORTED_BITS}")
    return n


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _emit(text: str, path) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _quant_config(a) -> QuantConfig:
    return QuantConfig(bits=a.bits, group_size=a.group_size, grid_step=a.grid_step, grid_count=a.grid_count)


def _add_quant_opts(p, bits_default=3):
    p.add_argument("--bits", type=_bits, default=bits_default, help="code width n (2, 3 or 4)")
    p.add_argument("--group-size", type=_positive, default=128)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--grid-count", type=_positive, default=200)


def _add_calib_opts(p):
    p.add_argument("--epochs", type=int, default=None, help="default: 40 for 2-bit, else 10")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--grad-mode", choices=GRAD_MODES, default="detach-exponent")
    p.add_argument("--batch-size", type=_positive, default=8, help="rows (2-D) or sequences (3-D) per step")


def _calib_config(a, bits) -> CalibConfig:
    epochs = CalibConfig.default_epochs(bits) if a.epochs is None else a.epochs
    return CalibConfig(lr=a.lr, weight_decay=a.weight_decay, epochs=epochs, grad_mode=a.grad_mode)


def cmd_quantize(a) -> int:
    w = read_tensor(a.input)
    if w.data.ndim != 2:
        raise PotQuantError(f"expected a 2-D weight tensor, got dims {w.dims}")
    qm = quantize_step1(w, _quant_config(a), skip_search=a.skip_step1, workers=a.threads)
    write_potq(a.output, qm)
    log.info("wrote %s: %dx%d, %d groups", a.output, *qm.shape, qm.layout.num_groups)
    return 0


def cmd_calibrate(a) -> int:
    qm = read_potq(a.model)
    w = read_tensor(a.weights).numpy()
    x = read_tensor(a.calib).numpy()
    cfg = _calib_config(a, qm.bits)
    out, res = calibrate_stacked(w, qm, x, cfg, a.batch_size)
    write_potq(a.output or a.model, out)
    _emit(loss_csv(res.history), a.loss_csv)
    return 0


def cmd_eval(a) -> int:
    w = read_tensor(a.original).numpy()
    qm = read_potq(a.model)
    x = read_tensor(a.inputs).numpy() if a.inputs else None
    rep = evaluate(w, qm, x, a.grid_step, a.grid_count)
    if a.hist_csv:
        Path(a.hist_csv).write_text(histogram_csv(rep.histogram))
    keys = ("weight_mse", "max_abs_error", "output_mse", "bits_per_weight", "group_count")
    summary = {k: v for k, v in rep.to_dict().items() if k in keys}
    print(json.dumps(summary, indent=2))
    return 0


def cmd_ablate(a) -> int:
    w = read_tensor(a.weights).numpy()
    calib = read_tensor(a.calib).numpy()
    held = read_tensor(a.eval_inputs).numpy() if a.eval_inputs else calib
    qcfg = _quant_config(a)
    res = run_ablation(w, calib, held, qcfg, _calib_config(a, qcfg.bits), a.batch_size)
    print(json.dumps(res, indent=2))
    return 0


def cmd_bench(a) -> int:
    rows = run_bench(a.rows, a.cols, a.bits, a.threads, a.repeats, a.group_size, a.seed)
    _emit(bench_csv(rows), a.csv)
    return 0


def cmd_generate(a) -> int:
    rng = np.random.default_rng(a.seed)
    shape = tuple(a.shape)
    if a.dist == "gaussian":
        data = rng.normal(0.0, a.scale, shape)
    else:
        data = rng.laplace(0.0, a.scale / np.sqrt(2.0), shape)
    if a.channel_spread > 0:
        # log-normal per-feature magnitudes along the last axis
        data = data * np.exp(rng.normal(0.0, a.channel_spread, shape[-1]))
    write_tensor(a.output, Tensor(data, a.dtype))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    p = _Parser(prog="potquant", description="Power-of-two weight quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", parents=[common], help="grid-searched group scales to a POTQ file")
    q.add_argument("input", help="2-D PTEN weights (rows = output dim)")
    q.add_argument("output")
    _add_quant_opts(q)
    q.add_argument("--skip-step1", action="store_true", help="use b = 1 for every group")
    q.add_argument("--threads", type=_positive, default=1)
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("calibrate", parents=[common], help="refine scales of a POTQ file on calibration inputs")
    c.add_argument("model", help="POTQ file")
    c.add_argument("weights", help="original PTEN weights")
    c.add_argument("calib", help="PTEN inputs: 2-D (rows, d) for a linear layer, 3-D (B, T, d) for a block")
    c.add_argument("-o", "--output", help="destination POTQ (default: overwrite MODEL)")
    _add_calib_opts(c)
    c.add_argument("--loss-csv", help="per-epoch loss log (default: stdout)")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("eval", parents=[common], help="error metrics and multiplier histogram")
    e.add_argument("original")
    e.add_argument("model")
    e.add_argument("inputs", nargs="?")
    e.add_argument("--hist-csv")
    e.add_argument("--grid-step", type=float, default=0.01)
    e.add_argument("--grid-count", type=_positive, default=200)
    e.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", parents=[common], help="output MSE with each quantization step on or off")
    ab.add_argument("weights")
    ab.add_argument("calib")
    ab.add_argument("eval_inputs", nargs="?")
    _add_quant_opts(ab)
    _add_calib_opts(ab)
    ab.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", parents=[common], help="dequantization throughput: integer PoT vs float uniform")
    b.add_argument("--rows", type=_positive, default=4096)
    b.add_argument("--cols", type=_positive, default=4096)
    b.add_argument("--bits", type=_bits, default=3)
    b.add_argument("--group-size", type=_positive, default=128)
    b.add_argument("--threads", type=_positive, default=1)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv", help="output path (default: stdout)")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("generate", parents=[common], help="synthetic Gaussian or Laplace tensors")
    g.add_argument("output")
    g.add_argument("--shape", type=_positive, nargs="+", required=True)
    g.add_argument("--dist", choices=("gaussian", "laplace"), default="gaussian")
    g.add_argument("--scale", type=float, default=1.0, help="standard deviation")
    g.add_argument("--channel-spread", type=float, default=0.0, help="sigma of log-normal per-feature magnitudes")
    g.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (PotQuantError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
