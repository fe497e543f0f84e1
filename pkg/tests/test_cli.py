import subprocess
import sys

import numpy as np
import pytest

from superseg.cli import main, read_config_file
from superseg.raster_io import read_label_map, read_raster_stack, write_csv_grid

SMALL = "depth = 1\nbase = 4\niters = 5\n"


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    path = tmp_path_factory.mktemp("toy") / "toy.rsk"
    assert main(["toy", "--size", "32", "--seed", "7", "--out", str(path)]) == 0
    return path


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


def test_toy_command(toy):
    stack = read_raster_stack(toy)
    assert stack.data.shape == (1, 32, 32)
    assert set(np.unique(stack.data)) == {0.0, 1.0}


def test_segment_writes_run_directory(toy, small_cfg, tmp_path, capsys):
    out = tmp_path / "run1"
    code = main(["segment", "--in", str(toy), "--n", "4", "--seed", "7", "--out", str(out),
                 "--config", str(small_cfg)])
    assert code == 0
    for name in ("labels.pgm", "labels.csv", "ih_ch0.png", "overlay.png", "loss.csv", "metrics.txt",
                 "config.resolved"):
        assert (out / name).exists(), name
    assert "realized" in capsys.readouterr().out
    resolved = read_config_file(out / "config.resolved")
    assert resolved["seed"] == "7" and resolved["depth"] == "1" and resolved["c4"] == "50.0"
    labels = read_label_map(out / "labels.pgm")
    assert labels.shape == (32, 32)
    assert len((out / "loss.csv").read_text().splitlines()) == 6


def test_flags_override_config(toy, small_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["segment", "--in", str(toy), "--n", "3", "--seed", "1", "--out", str(out),
                 "--config", str(small_cfg), "--iters", "2", "--no-rcc"]) == 0
    resolved = read_config_file(out / "config.resolved")
    assert resolved["iters"] == "2" and resolved["c4"] == "0.0"


def test_segment_resamples_to_source_grid(tmp_path, small_cfg):
    data = np.random.default_rng(0).normal(size=(20, 20))
    csv = tmp_path / "g.csv"
    write_csv_grid(data, csv)
    out = tmp_path / "run"
    assert main(["segment", "--in", str(csv), "--n", "3", "--seed", "0", "--out", str(out),
                 "--config", str(small_cfg)]) == 0
    assert read_label_map(out / "labels.csv").shape == (20, 20)


def test_missing_seed_exits_one(toy, tmp_path, capsys):
    code = main(["segment", "--in", str(toy), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "seed" in capsys.readouterr().err


def test_bad_config_key_exits_one(toy, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    assert main(["segment", "--in", str(toy), "--seed", "1", "--out", str(tmp_path / "x"),
                 "--config", str(cfg)]) == 1


def test_unreadable_input_exits_one(tmp_path):
    bad = tmp_path / "bad.rsk"
    bad.write_bytes(b"nope")
    assert main(["segment", "--in", str(bad), "--seed", "1", "--out", str(tmp_path / "x")]) == 1


@pytest.mark.parametrize("argv", [["frobnicate"], ["segment", "--bogus"], []])
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 2


def test_slic_and_stats(toy, tmp_path, capsys):
    out = tmp_path / "slic"
    assert main(["slic", "--in", str(toy), "--k", "9", "--out", str(out)]) == 0
    assert (out / "labels.pgm").exists()
    capsys.readouterr()
    assert main(["stats", "--in", str(toy), "--labels", str(out / "labels.pgm"), "--n", "9"]) == 0
    report = capsys.readouterr().out
    assert "target: 9" in report and "realized:" in report


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("sparsemax") for line in lines)
    assert any(line.startswith("r_cc") for line in lines)
    assert lines[-1].startswith("max relative error")


def test_module_entry_point(toy, tmp_path):
    env_out = tmp_path / "t.rsk"
    proc = subprocess.run([sys.executable, "-m", "superseg", "toy", "--seed", "1", "--size", "16",
                           "--out", str(env_out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert env_out.exists()
