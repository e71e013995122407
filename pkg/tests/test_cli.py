import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from foldscan.bench import read_csv
from foldscan.cli import main
from foldscan.fold import TuneLUT
from foldscan.model import ModelConfig, ToyConfig, dumps_config


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_verify_scope_and_report(capsys, tmp_path):
    report = tmp_path / "v.json"
    code, out, _ = run(capsys, "verify", "--scope", "divisor", "--scope", "fold", "--quick",
                       "--out", str(report))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines and all(l.startswith("PASS [") for l in lines)
    assert {l.split("]")[0][6:] for l in lines} == {"divisor", "fold"}
    data = json.loads(report.read_text())
    assert data["passed"] and all("max_error" in r for r in data["results"])


def test_verify_scan_only(capsys):
    code, out, _ = run(capsys, "verify", "--scope", "scan", "--quick")
    assert code == 0
    assert all("[scan]" in l for l in out.strip().splitlines())


@pytest.mark.parametrize("scope", ["scan", "conv", "divisor"])
def test_verify_injected_fault_fails(capsys, scope):
    code, out, _ = run(capsys, "verify", "--scope", scope, "--quick", "--inject-fault")
    assert code == 1
    assert "FAIL" in out


@pytest.mark.parametrize("argv", [
    [], ["nope"], ["verify", "--scope", "everything"], ["bench", "--fold", "sometimes"],
    ["bench", "--trials", "2"], ["bench", "--shape", "1,2,3"], ["verify", "--workers", "0"],
    ["erf", "--lut", "/nonexistent.lut"], ["erf", "--config", "/nonexistent.cfg"],
    ["train", "--steps", "-1"], ["tune", "--trials", "0"],
])
def test_usage_errors_exit_2(capsys, argv):
    assert main(argv) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "foldscan", "verify", "--scope", "everything"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


def test_bench_csv_contract(capsys, tmp_path):
    path = tmp_path / "b.csv"
    for _ in range(2):
        code, _, _ = run(capsys, "bench", "--shape", "8,4,2,7", "--trials", "3", "--workers", "1",
                         "--out", str(path), "--precision", "f32")
        assert code == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "B,D,S,L,B1,median_ns,speedup,trials,run_id"
    assert lines.count(lines[0]) == 1
    recs = read_csv(path)
    assert len({r.run_id for r in recs}) == 2
    assert sorted(r.B1 for r in recs) == [1, 1, 2, 2, 4, 4, 8, 8]
    assert all(r.speedup == 1.0 for r in recs if r.B1 == r.B)
    assert all(r.trials == 3 and r.median_ns > 0 for r in recs)


def test_bench_paper_config_rows(capsys, tmp_path):
    # one row per swept B1 for the [128, 640, 8, 49] configuration
    path = tmp_path / "b.csv"
    code, _, _ = run(capsys, "bench", "--shape", "128,640,8,49", "--trials", "3", "--sweep", "pow2",
                     "--fold", "fixed:16", "--out", str(path), "--precision", "f32")
    assert code == 0
    assert sorted(r.B1 for r in read_csv(path)) == [16, 128]


def test_bench_invalid_config_warning_row(capsys, tmp_path):
    path = tmp_path / "b.csv"
    with pytest.warns(UserWarning):
        code, _, _ = run(capsys, "bench", "--shape", "0,4,2,7", "--shape", "4,4,2,3", "--trials", "3",
                         "--out", str(path))
    assert code == 0
    text = path.read_text()
    assert "# warning" in text and "(0, 4, 2, 7)" in text
    assert {r.B for r in read_csv(path)} == {4}


def test_bench_stdout(capsys):
    code, out, _ = run(capsys, "bench", "--shape", "4x4x2x3", "--trials", "3")
    rows = list(csv.DictReader(out.splitlines()))
    assert code == 0 and len(rows) == 3


def test_tune_then_adaptive_bench(capsys, tmp_path):
    lut_path, csv_path = tmp_path / "t.lut", tmp_path / "b.csv"
    shape = "128,32,8,49"
    code, _, _ = run(capsys, "tune", "--shape", shape, "--trials", "9", "--lut", str(lut_path))
    assert code == 0
    lut = TuneLUT.load(lut_path)
    ratio, _ = lut.cells[(128, 32, 8, 49)]
    code, _, err = run(capsys, "bench", "--shape", shape, "--fold", "adaptive", "--lut", str(lut_path),
                       "--trials", "9", "--out", str(csv_path))
    assert code == 0
    assert f"selected B1={round(128 * ratio)}" in err
    code, _, _ = run(capsys, "bench", "--shape", shape, "--trials", "9", "--out", str(csv_path))
    recs = read_csv(csv_path)
    chosen = [r for r in recs if r.B1 == round(128 * ratio)]
    best = min(r.median_ns for r in recs)
    assert min(r.median_ns for r in chosen) <= 1.10 * best


def test_tune_merges(capsys, tmp_path):
    path = tmp_path / "t.lut"
    assert main(["tune", "--shape", "8,4,2,7", "--trials", "3", "--lut", str(path)]) == 0
    assert main(["tune", "--shape", "4,4,2,7", "--trials", "3", "--lut", str(path)]) == 0
    assert set(TuneLUT.load(path).cells) == {(8, 4, 2, 7), (4, 4, 2, 7)}
    assert path.read_text().startswith("foldscan-lut v1 ")


def test_erf_matrix_dims(capsys, tmp_path):
    cfg = tmp_path / "m.cfg"
    cfg.write_text(dumps_config(ModelConfig(image_size=64, width=8)))
    out = tmp_path / "e.txt"
    code, _, _ = run(capsys, "erf", "--config", str(cfg), "--probes", "1", "--out", str(out),
                     "--swap", "off")
    assert code == 0
    heat = np.loadtxt(out)
    assert heat.shape == (64, 64) and heat.max() > 0


def test_erf_stdout(capsys):
    with pytest.warns(UserWarning):
        code, out, _ = run(capsys, "erf", "--probes", "1", "--cut", "full")
    assert code == 0 and np.loadtxt(out.splitlines()).shape == (32, 32)


def test_train_trace_reproducible(capsys, tmp_path):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(dumps_config(ToyConfig(seed=3)))
    outs = []
    for name in ("a.csv", "b.csv"):
        path = tmp_path / name
        assert main(["train", "--config", str(cfg), "--steps", "4", "--eval-every", "2",
                     "--out", str(path)]) == 0
        outs.append(path.read_text())
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(outs[0].splitlines()))
    assert [r["step"] for r in rows] == ["0", "1", "2", "3", "4"]
    assert rows[1]["eval_acc"] == "" and rows[2]["eval_acc"] != ""


def test_train_runtime_failure_exit_1(capsys):
    code, _, err = run(capsys, "train", "--steps", "30", "--lr", "1e6")
    assert code == 1 and "TrainingDiverged" in err
