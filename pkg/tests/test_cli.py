import json
import subprocess
import sys

import pytest

from mxfp4sim.block_quant import deserialize
from mxfp4sim.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, cmd_bench_hadamard, cmd_quant_probe, main


def test_run_smoke(tmp_path, capsys):
    assert main(["run", "--config", "smoke.cfg", "--out", str(tmp_path)]) == EXIT_OK
    table = capsys.readouterr().out
    assert table.splitlines()[0].split() == ["Stabilizer", "Hadamard", "MXFP4", "paths", "Step", "overhead"]
    assert "Baseline" in table and "0.0%" in table
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["rows"]) == 3
    for row in summary["rows"]:
        assert (tmp_path / row["curve_csv"]).exists()
    assert (tmp_path / "table.txt").read_text() == table


def test_run_from_file_with_seed(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "[shared]\nmax_steps = 20\neval_every = 10\n[shared.model]\nhidden = 32\n"
        "[shared.data]\nvocab = 16\ncorpus_tokens = 5000\nval_tokens = 64\n"
        "[shared.optim]\nbatch_size = 32\n[[rows]]\nname = 'F'\nmx_paths = ['fprop']\n"
    )
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == EXIT_OK
    assert json.loads((out / "summary.json").read_text())["seed"] == 4


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["run", "--out", "x"],
        ["probe", "--layout", "diagonal"],
        ["probe", "--hadamard", "det64"],
        ["run", "--config", "missing.cfg", "--out", "x"],
        ["run", "--config", "smoke.cfg", "--out", "x", "--jobs", "0"],
    ],
)
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        sys.exit(main(argv))
    assert exc.value.code == EXIT_USAGE


def test_parse_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[shared]\nhidden_size = 3\n[[rows]]\nname='a'\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "hidden_size" in capsys.readouterr().err


def test_runtime_failure_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    # output directory path runs through a regular file
    assert main(["run", "--config", "smoke.cfg", "--out", str(blocker / "sub")]) == EXIT_RUNTIME


def test_probe_outlier_rotation_helps(tmp_path):
    dump = tmp_path / "q.bin"
    rep = cmd_quant_probe(outlier_scale=100, outliers_per_block=1, hadamard="det16", dump=str(dump))
    assert rep["rotated"]["mse"] < rep["unrotated"]["mse"]
    q = deserialize(dump.read_bytes())
    assert q.shape == (64, 128)


def test_probe_zero_tensor_and_no_rotation():
    rep = cmd_quant_probe(dist="zeros", hadamard="none")
    assert rep["unrotated"]["mse"] == 0.0
    assert "rotated" not in rep


def test_probe_col_layout():
    rep = cmd_quant_probe(layout="col", hadamard="det32", rows=64, cols=32)
    assert rep["rotated"]["mse"] > 0


def test_bench_schema():
    rep = cmd_bench_hadamard(rows=64, cols=64, repeats=1)
    names = {v["name"] for v in rep["variants"]}
    assert names == {"det16-dense", "det16-fast", "det32-dense", "det32-fast"}
    for v in rep["variants"]:
        assert v["seconds"] > 0 and v["tiles_per_second"] > 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mxfp4sim", "probe", "--rows", "32", "--cols", "32"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "unrotated" in json.loads(proc.stdout)


def test_parallel_jobs_match_serial(tmp_path):
    assert main(["run", "--config", "smoke.cfg", "--out", str(tmp_path / "s")]) == EXIT_OK
    assert main(["run", "--config", "smoke.cfg", "--out", str(tmp_path / "p"), "--jobs", "2"]) == EXIT_OK
    assert (tmp_path / "s" / "summary.json").read_bytes() == (tmp_path / "p" / "summary.json").read_bytes()
