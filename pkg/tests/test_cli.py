import subprocess
import sys

import numpy as np
import pytest

from pcnn.cli import _split_variants, run
from pcnn.config import parse_kv
from pcnn.data import read_pgm

TINY = ["--image-size", "16", "--n-synthetic", "28", "--n-train", "21", "--n-test", "7", "--stem-channels", "4",
        "--stage-channels", "4 8", "--stage-strides", "1 2", "--batch-size", "7"]


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "pcnn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "segment-preview" in proc.stdout


def test_unknown_subcommand():
    assert run(["fly"]) == 1


def test_segment_preview(tmp_path, capsys):
    assert run(["segment-preview", "--h", "20", "--w", "20", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert lines[4].split() == ["mouth", "rows", "13:20", "cols", "0:20"]
    img, maxval = read_pgm(tmp_path / "regions.pgm")
    assert maxval == 5 and img.shape == (20, 20) and img[0, 0] == 1 and img[19, 19] == 5
    assert (tmp_path / "regions.txt").read_text().splitlines() == lines


def test_segment_preview_too_small(tmp_path):
    out = tmp_path / "o"
    assert run(["segment-preview", "--h", "6", "--w", "20", "--out", str(out)]) == 1
    assert not out.exists()


def test_gradcheck_passes(tmp_path, capsys):
    assert run(["gradcheck", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
    assert (tmp_path / "gradcheck.txt").read_text().splitlines() == lines


def test_gradcheck_impossible_tolerance(tmp_path):
    assert run(["gradcheck", "--tol", "1e-30", "--out", str(tmp_path)]) == 2


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", *TINY, "--epochs", "2", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "epoch 0:" in text and "epoch 1:" in text and "test accuracy" in text
    for name in ("checkpoint.pcnn", "history.csv", "config.txt", "run.log", "confusion.csv"):
        assert (out / name).is_file(), name
    cfg = parse_kv((out / "config.txt").read_text())
    assert cfg["epochs"] == "2" and cfg["stage_channels"] == "4 8" and cfg["lr"] == "0.001"
    assert len((out / "history.csv").read_text().splitlines()) == 3

    assert run(["eval", "--image-size", "16", "--n-synthetic", "28", "--n-train", "21", "--n-test", "7",
                "--out", str(out)]) == 0
    assert (out / "robustness.txt").read_text().splitlines()[2].startswith("identity")
    counts = np.loadtxt(out / "confusion.csv", delimiter=",", skiprows=1)[:, 1:]
    assert counts.sum() == 7
    assert (out / "eval-config.txt").is_file() and (out / "confusion.pgm").is_file()
    assert parse_kv((out / "config.txt").read_text())["epochs"] == "2"


def test_resume_continues(tmp_path):
    out = tmp_path / "run"
    assert run(["train", *TINY, "--epochs", "1", "--out", str(out)]) == 0
    assert run(["train", *TINY, "--epochs", "2", "--resume", str(out / "checkpoint.pcnn"),
                "--out", str(out)]) == 0
    assert [line.split(",")[0] for line in (out / "history.csv").read_text().splitlines()[1:]] == ["1"]


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 3\nlr = 0.5\nseed = 4\n")
    out = tmp_path / "run"
    assert run(["train", *TINY, "--config", str(cfg), "--epochs", "1", "--out", str(out)]) == 0
    written = parse_kv((out / "config.txt").read_text())
    assert written["epochs"] == "1" and written["lr"] == "0.5" and written["seed"] == "4"
    assert written["momentum"] == "0.9"


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("learning_rate = 0.1\n")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("flags", [["--lr", "-1"], ["--lr", "abc"], ["--variant", "five_crop"],
                                   ["--n-train", "100", "--n-test", "100", "--n-synthetic", "50"],
                                   ["--data", "imagenet"], ["--b1", "0.7"], ["--threads", "0"]])
def test_invalid_train_config_writes_nothing(tmp_path, flags):
    out = tmp_path / "o"
    assert run(["train", *flags, "--out", str(out)]) == 1
    assert not out.exists()


def test_missing_fer_csv_is_runtime_failure(tmp_path, monkeypatch):
    monkeypatch.setenv("PCNN_DATA_DIR", str(tmp_path))
    assert run(["train", "--data", "fer2013", "--out", str(tmp_path / "o")]) == 2


def test_corrupt_checkpoint_is_runtime_failure(tmp_path):
    bad = tmp_path / "bad.pcnn"
    bad.write_bytes(b"PCNN\x01\x00")
    assert run(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_eval_missing_checkpoint(tmp_path):
    assert run(["eval", "--out", str(tmp_path / "o")]) == 1


def test_synth_gen(tmp_path, capsys):
    out = tmp_path / "faces"
    assert run(["synth-gen", "--n-synthetic", "10", "--image-size", "32", "--out", str(out)]) == 0
    assert "02c6322251ae31a4" in capsys.readouterr().out
    assert len(list(out.glob("*.pgm"))) == 10


def test_ablate_tiny(tmp_path, capsys):
    out = tmp_path / "abl"
    assert run(["ablate", *TINY, "--epochs", "1", "--variants", "full,custom_alpha_beta(10,10)", "--seeds", "0",
                "--out", str(out)]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[1].startswith("full,synthetic-clean,0,")
    assert rows[2].startswith("custom_alpha_beta(10,10),synthetic-clean,0,")


def test_split_variants():
    assert _split_variants("full, custom_alpha_beta(4,16),no_crop") == ["full", "custom_alpha_beta(4,16)",
                                                                         "no_crop"]


def test_rerun_reproduces_outputs(tmp_path):
    for name in ("a", "b"):
        assert run(["train", *TINY, "--epochs", "1", "--out", str(tmp_path / name)]) == 0
    files = sorted(f.name for f in (tmp_path / "a").iterdir() if f.name != "run.log")
    assert files == sorted(f.name for f in (tmp_path / "b").iterdir() if f.name != "run.log")
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
