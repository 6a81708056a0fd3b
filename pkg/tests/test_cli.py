import csv
import json
import subprocess
import sys

import pytest

from ballinfer.ablation import RESULT_COLUMNS
from ballinfer.cli import DUMP_COLUMNS, main
from ballinfer.losses import EVAL_COLUMNS

SMALL_GEN = ["--n-players-per-team", "2", "--n-frames", "6", "--crop-dim", "4"]
SMALL_MODEL = ["--d", "8", "--n-heads", "2", "--d-ff", "16", "--batch-size", "4", "--eval-interval", "2"]


@pytest.fixture
def splits(tmp_path):
    out = tmp_path / "data"
    assert main(["generate", "--splits", "12,4,4", "--out", str(out), "--seed", "3", *SMALL_GEN]) == 0
    return out


def test_generate_is_byte_identical(tmp_path, capsys):
    for name in ("a.bin", "b.bin"):
        assert main(["generate", "--count", "10", "--seed", "7", "--out", str(tmp_path / name), *SMALL_GEN]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    out = capsys.readouterr().out
    assert out.startswith("# config: ")
    header = json.loads(out.splitlines()[0][len("# config: "):])
    assert header["seed"] == 7 and header["p_uncontrolled"] == 0.15 and header["count"] == 10
    assert "possession" in out


def test_generate_count_zero_is_usage_error(tmp_path):
    assert main(["generate", "--count", "0", "--out", str(tmp_path / "x.bin")]) == 2
    assert main(["generate", "--bogus-flag", "1"]) == 2


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 3, "seed": 5, "n_frames": 6}))
    assert main(["generate", "--config", str(cfg), "--seed", "6", "--out", str(tmp_path / "x.bin")]) == 0
    header = json.loads(capsys.readouterr().out.splitlines()[0][len("# config: "):])
    assert (header["count"], header["seed"], header["n_frames"]) == (3, 6, 6)
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert main(["generate", "--config", str(cfg)]) == 2


def test_data_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BALLINFER_DATA_DIR", str(tmp_path))
    monkeypatch.chdir(tmp_path.parent)
    assert main(["generate", "--count", "2", "--out", "envdata.bin", *SMALL_GEN]) == 0
    assert (tmp_path / "envdata.bin").exists()


def _train(splits, out, *extra):
    return main(["train", "--train-data", str(splits / "train.bin"), "--val-data", str(splits / "val.bin"),
                 "--out-dir", str(out), "--steps", "4", *SMALL_MODEL, *extra])


def test_pretrain_finetune_eval(tmp_path, splits):
    common = ["--train-data", str(splits / "train.bin"), "--val-data", str(splits / "val.bin"), "--steps", "4",
              "--batch-size", "4", "--eval-interval", "2"]
    assert main(["pretrain", *common, "--out-dir", str(tmp_path / "pre"), "--d", "8", "--n-heads", "2",
                 "--d-ff", "16", "--mask-ratio", "0.5"]) == 0
    assert main(["finetune", *common, "--out-dir", str(tmp_path / "fine"),
                 "--init-checkpoint", str(tmp_path / "pre" / "checkpoint.bin")]) == 0
    csv_path, dump = tmp_path / "eval.csv", tmp_path / "traj.txt"
    assert main(["eval", "--checkpoint", str(tmp_path / "fine" / "checkpoint.bin"), "--data",
                 str(splits / "test.bin"), "--csv", str(csv_path), "--dump-trajectories", str(dump),
                 "--occlude-crops", "0.3"]) == 0
    rows = list(csv.DictReader(csv_path.open()))
    assert list(rows[0].keys()) == ["predictor", "occlude_crops", *EVAL_COLUMNS]
    assert [r["oracle_input"] for r in rows] == ["false", "true"]
    lines = dump.read_text().splitlines()
    assert lines[0].split() == DUMP_COLUMNS
    assert len(lines) == 1 + 4 * 6


def test_finetune_requires_checkpoint(splits):
    assert main(["finetune", "--train-data", str(splits / "train.bin"), "--val-data", str(splits / "val.bin")]) == 2


def test_data_error_exit_code(tmp_path, splits):
    assert _train(splits, tmp_path / "r", "--val-data", str(tmp_path / "missing.bin")) == 3
    bad = tmp_path / "bad.bin"
    bad.write_bytes((splits / "val.bin").read_bytes()[:-7])
    assert _train(splits, tmp_path / "r", "--val-data", str(bad)) == 3


def test_divergence_exit_code(tmp_path, splits, capsys):
    assert _train(splits, tmp_path / "r", "--lr", "inf") == 4
    assert "diverged" in capsys.readouterr().err


def test_ablate_masking_grid_schema(tmp_path, splits):
    out = tmp_path / "abl"
    assert main(["ablate", "--grid", "masking", "--seeds", "1", "--train-data", str(splits / "train.bin"),
                 "--val-data", str(splits / "val.bin"), "--test-data", str(splits / "test.bin"),
                 "--out-dir", str(out), "--steps", "2", *SMALL_MODEL]) == 0
    rows = list(csv.DictReader((out / "masking_results.csv").open()))
    assert list(rows[0].keys()) == RESULT_COLUMNS
    results = [r for r in rows if r["kind"] == "result"]
    ratios = [r for r in rows if r["kind"] == "ratio"]
    assert len(results) == len(ratios) == 14  # 7 configs x (val, test)
    for r in ratios:
        if r["config"] == "none":
            assert all(float(r[m]) == 1.0 for m in ("ade_m", "maxerr_m", "state_acc", "poss_acc"))


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ballinfer", "generate", "--count", "1", "--out",
                           str(tmp_path / "x.bin"), *SMALL_GEN], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("# config: ")
