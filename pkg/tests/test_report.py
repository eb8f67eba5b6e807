import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potquant.bench import random_quantized, run_bench
from potquant.calibrator import CalibConfig
from potquant.errors import InvariantError
from potquant.kernel import dequant_bits, dequant_matrix_reference
from potquant.quantizer import QuantConfig, quantize_step1
from potquant.report import (
    RunReport,
    evaluate,
    implied_multipliers,
    make_batches,
    multiplier_histogram,
    run_ablation,
    split_quantized,
    stack_quantized,
)


@given(st.lists(st.integers(1, 200), max_size=300))
def test_histogram_counts_grid_indices(idx):
    hist = multiplier_histogram(np.array(idx) * 0.01)
    assert len(hist) == 200
    assert sum(c for _, c in hist) == len(idx)
    expected = np.bincount(np.array(idx, dtype=int), minlength=201)[1:]
    assert [c for _, c in hist] == expected.tolist()
    assert hist[99][0] == pytest.approx(0.995)


def test_implied_multipliers_match_search(rng):
    w = rng.normal(size=(40, 6))
    qm = quantize_step1(w, QuantConfig(bits=3, group_size=8))
    b = implied_multipliers(w, qm)
    # FP16 rounding of the scale perturbs b by well under half a grid step
    assert np.allclose(b, qm.multipliers, atol=0.002)


def test_evaluate_without_stored_multipliers(rng):
    w = rng.normal(size=(32, 4))
    qm = quantize_step1(w, QuantConfig(bits=3, group_size=8))
    direct = evaluate(w, qm)
    qm.multipliers = None
    recovered = evaluate(w, qm)
    assert [c for _, c in direct.histogram] == [c for _, c in recovered.histogram]
    assert recovered.weight_mse == direct.weight_mse


def test_report_check_rejects_bad_metrics():
    RunReport(0.1, 0.2, 3.0, 2, histogram=[(0.005, 2)]).check()
    with pytest.raises(InvariantError):
        RunReport(float("nan"), 0.2, 3.0, 2).check()
    with pytest.raises(InvariantError):
        RunReport(0.1, 0.2, 3.0, 2, histogram=[(0.005, 1)]).check()


def test_split_stack_round_trip(rng):
    w = rng.normal(size=(5 * 8, 8))
    qm = quantize_step1(w, QuantConfig(bits=2, group_size=4))
    qm.multipliers = qm.group_losses = None
    parts = split_quantized(qm, 5)
    assert all(p.shape == (8, 8) for p in parts)
    assert stack_quantized(parts) == qm
    with pytest.raises(ValueError):
        split_quantized(quantize_step1(w, QuantConfig(bits=2, group_size=16)), 5)


def test_make_batches():
    x = np.arange(10)
    assert [b.tolist() for b in make_batches(x, 4)] == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    with pytest.raises(ValueError):
        make_batches(x, 0)


def test_ablation_arms_without_calibration_data_match(rng):
    w = rng.normal(size=(16, 4))
    x = rng.normal(size=(6, 16))
    res = run_ablation(w, x, x, QuantConfig(bits=3, group_size=8), CalibConfig(epochs=0))
    assert res["step1=on,step2=on"] == res["step1=on,step2=off"]
    assert res["step1=off,step2=on"] == res["step1=off,step2=off"]


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 4), st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**31))
def test_random_bench_matrices_are_valid(bits, rows, cols, seed):
    qm = random_quantized(rows, cols, bits, 8, np.random.default_rng(seed))
    qm.validate()
    assert np.array_equal(dequant_bits(qm), dequant_matrix_reference(qm))


def test_bench_rows_and_repeat_floor():
    rows = run_bench(256, 128, 3, threads=2, repeats=5)
    assert [r.path for r in rows] == ["pot-int", "uniform-float"]
    assert rows[1].ratio == 1.0
    assert rows[0].ratio == pytest.approx(rows[1].seconds / rows[0].seconds)
    with pytest.raises(ValueError):
        run_bench(64, 64, 3, repeats=4)
