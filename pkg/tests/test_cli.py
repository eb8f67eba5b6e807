import csv
import json

import numpy as np
import pytest

from potquant.cli import main
from potquant.kernel import read_potq
from potquant.quantizer import FLAG_CALIBRATED, FLAG_GRID_SEARCH
from potquant.tensor import Tensor, read_tensor, write_tensor


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(5)
    w = rng.normal(0, 0.1, (64, 16))
    x = rng.normal(0, 1, (24, 64)) * np.exp(rng.normal(0, 1, 64))
    write_tensor(tmp_path / "w.pten", Tensor(w))
    write_tensor(tmp_path / "x.pten", Tensor(x))
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_quantize_writes_valid_potq(files):
    assert run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16, "--bits", 3) == 0
    qm = read_potq(files / "m.potq")
    assert qm.shape == (64, 16) and qm.bits == 3 and qm.flags == FLAG_GRID_SEARCH
    assert qm.layout.group_size == 16


def test_threads_do_not_change_output(files):
    run("quantize", files / "w.pten", files / "a.potq", "--group-size", 16)
    run("quantize", files / "w.pten", files / "b.potq", "--group-size", 16, "--threads", 3)
    assert (files / "a.potq").read_bytes() == (files / "b.potq").read_bytes()


def test_skip_step1_clears_flag(files):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16, "--skip-step1")
    assert read_potq(files / "m.potq").flags == 0


def test_unsupported_bit_width_is_usage_error(files, capsys):
    assert run("quantize", files / "w.pten", files / "m.potq", "--bits", 5) == 1
    assert "unsupported bit-width" in capsys.readouterr().err
    assert not (files / "m.potq").exists()


@pytest.mark.parametrize("argv", [[], ["quantize"], ["bench", "--rows", "0"], ["nonsense"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_data_errors_exit_2(files, capsys):
    (files / "junk.potq").write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    assert run("eval", files / "w.pten", files / "junk.potq") == 2
    assert "bad magic" in capsys.readouterr().err
    assert run("eval", files / "w.pten", files / "missing.potq") == 2


def test_mismatched_calibration_shape_exit_2(files):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16)
    write_tensor(files / "bad.pten", Tensor(np.ones((4, 7))))
    assert run("calibrate", files / "m.potq", files / "w.pten", files / "bad.pten", "--epochs", 1) == 2


def test_calibrate_loss_log_and_flags(files):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16)
    rc = run(
        "calibrate", files / "m.potq", files / "w.pten", files / "x.pten",
        "-o", files / "c.potq", "--epochs", 4, "--loss-csv", files / "loss.csv",
    )
    assert rc == 0
    rows = read_csv(files / "loss.csv")
    assert rows[0] == ["epoch", "loss", "data_term", "reg_term"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    for r in rows[1:]:
        loss, data, reg = map(float, r[1:])
        assert np.isfinite(loss) and loss == pytest.approx(data + reg)
    qm = read_potq(files / "c.potq")
    assert qm.flags == FLAG_GRID_SEARCH | FLAG_CALIBRATED


def test_default_epochs_follow_bit_width(files):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16, "--bits", 2)
    run("calibrate", files / "m.potq", files / "w.pten", files / "x.pten", "-o", files / "c.potq",
        "--loss-csv", files / "loss.csv", "--batch-size", 24)
    assert len(read_csv(files / "loss.csv")) == 1 + 40


def test_zero_epochs_keeps_scales(files):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16)
    run("calibrate", files / "m.potq", files / "w.pten", files / "x.pten", "-o", files / "c.potq",
        "--epochs", 0, "--loss-csv", files / "loss.csv")
    assert (files / "m.potq").read_bytes() == (files / "c.potq").read_bytes()
    assert read_csv(files / "loss.csv") == [["epoch", "loss", "data_term", "reg_term"]]


def test_calibrate_in_place(files):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16)
    before = read_potq(files / "m.potq")
    run("calibrate", files / "m.potq", files / "w.pten", files / "x.pten", "--epochs", 2, "--loss-csv", files / "l.csv")
    after = read_potq(files / "m.potq")
    assert after.flags & FLAG_CALIBRATED
    assert not np.array_equal(before.scale_bits, after.scale_bits)


def test_eval_report_and_histogram(files, capsys):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16)
    capsys.readouterr()
    assert run("eval", files / "w.pten", files / "m.potq", files / "x.pten", "--hist-csv", files / "h.csv") == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["bits_per_weight"] == pytest.approx(3 + 16 / 16)
    assert rep["group_count"] == 64
    assert rep["weight_mse"] > 0 and rep["output_mse"] > 0
    assert rep["max_abs_error"] >= np.sqrt(rep["weight_mse"])
    hist = read_csv(files / "h.csv")
    assert hist[0] == ["bin_lower", "count"] and len(hist) == 201
    assert sum(int(c) for _, c in hist[1:]) == 64


def test_eval_without_inputs_has_no_output_mse(files, capsys):
    run("quantize", files / "w.pten", files / "m.potq", "--group-size", 16)
    capsys.readouterr()
    run("eval", files / "w.pten", files / "m.potq")
    assert json.loads(capsys.readouterr().out)["output_mse"] is None


def test_block_mode_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    d = 16
    write_tensor(tmp_path / "w.pten", Tensor(rng.normal(0, d**-0.5, (5 * d, d))))
    write_tensor(tmp_path / "x.pten", Tensor(rng.normal(0, 1, (3, 4, d))))
    run("quantize", tmp_path / "w.pten", tmp_path / "m.potq", "--group-size", 8)
    rc = run("calibrate", tmp_path / "m.potq", tmp_path / "w.pten", tmp_path / "x.pten", "-o", tmp_path / "c.potq",
             "--epochs", 2, "--batch-size", 1, "--loss-csv", tmp_path / "l.csv")
    assert rc == 0
    assert len(read_csv(tmp_path / "l.csv")) == 3
    assert read_potq(tmp_path / "c.potq").shape == (5 * d, d)


def test_ablate_reports_four_arms(files, capsys):
    rc = run("ablate", files / "w.pten", files / "x.pten", "--group-size", 16, "--epochs", 2)
    assert rc == 0
    res = json.loads(capsys.readouterr().out)
    assert len(res) == 4 and all(v > 0 for v in res.values())


def test_bench_csv(tmp_path):
    assert run("bench", "--rows", 256, "--cols", 64, "--bits", 2, "--csv", tmp_path / "b.csv") == 0
    rows = read_csv(tmp_path / "b.csv")
    assert rows[0] == ["path", "bits", "rows", "cols", "threads", "gbps", "elements_per_s", "ratio"]
    assert [r[0] for r in rows[1:]] == ["pot-int", "uniform-float"]
    assert float(rows[2][-1]) == pytest.approx(1.0)
    assert all(float(r[5]) > 0 for r in rows[1:])


@pytest.mark.parametrize("dist", ["gaussian", "laplace"])
def test_generate_is_seeded(tmp_path, dist):
    for name in ("a", "b"):
        run("generate", tmp_path / f"{name}.pten", "--shape", 50, 40, "--dist", dist, "--seed", 9)
    assert (tmp_path / "a.pten").read_bytes() == (tmp_path / "b.pten").read_bytes()
    t = read_tensor(tmp_path / "a.pten")
    assert t.dims == (50, 40) and abs(t.data.std() - 1.0) < 0.1
