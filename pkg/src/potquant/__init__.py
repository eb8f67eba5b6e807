"""Power-of-two weight quantization with FP16 integer-addition dequantization."""

from .calibrator import BlockWeights, CalibConfig, block_forward, calibrate, linear_forward
from .errors import DivergenceError, FormatError, InvariantError, PotQuantError
from .bench import run_bench
from .kernel import dequant_matrix, gemm_dequant, read_potq, write_potq
from .quantizer import QuantConfig, QuantizedMatrix, quantize_rtn_uniform, quantize_step1, search_group_scale
from .report import RunReport, evaluate, run_ablation
from .tensor import GroupLayout, Tensor, read_tensor, write_tensor

__all__ = [
    "BlockWeights",
    "CalibConfig",
    "DivergenceError",
    "FormatError",
    "GroupLayout",
    "InvariantError",
    "PotQuantError",
    "QuantConfig",
    "QuantizedMatrix",
    "RunReport",
    "Tensor",
    "block_forward",
    "calibrate",
    "dequant_matrix",
    "evaluate",
    "gemm_dequant",
    "linear_forward",
    "quantize_rtn_uniform",
    "quantize_step1",
    "read_potq",
    "read_tensor",
    "run_ablation",
    "run_bench",
    "search_group_scale",
    "write_potq",
    "write_tensor",
]

__version__ = "0.1.0"
