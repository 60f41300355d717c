import io
import json
import subprocess
import sys

import pytest

from clickintent.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run


def call(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = run([str(a) for a in argv], out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    gen = root / "gen.cfg"
    gen.write_text("n_sessions = 1200\n")
    code, out, _ = call("generate", "--config", gen, "--seed", 5, "--out", root / "data")
    assert code == EXIT_OK and "sessions" in out
    cfg = root / "run.cfg"
    cfg.write_text(
        "clicks = data/clicks.jsonl\n"
        "demographics = data/demographics.jsonl\n"
        "schema = data/schema.txt\n"
        "model = engineered-ffnn\n"
        "hidden_units = 8\n"
        "max_epochs = 3\n"
        "patience = 2\n"
        "grid_hidden_units = 4,8\n"
        "grid_batch_size = 128\n"
        "grid_dropout = 0.2\n"
        "groups = click\n"
        "n_shuffles = 2\n"
    )
    return root, cfg


def test_generate_artifacts(workspace):
    root, _ = workspace
    names = {p.name for p in (root / "data").iterdir()}
    assert names == {"clicks.jsonl", "demographics.jsonl", "labels.jsonl", "schema.txt", "manifest.json"}
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["generator"]["n_sessions"] == 1200


def test_generate_is_reproducible(workspace, tmp_path):
    root, _ = workspace
    gen = tmp_path / "gen.cfg"
    gen.write_text("n_sessions = 1200\n")
    assert call("generate", "--config", gen, "--seed", 5, "--out", tmp_path / "again")[0] == EXIT_OK
    for name in ("clicks.jsonl", "labels.jsonl", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (root / "data" / name).read_bytes()


def test_train_evaluate_report(workspace):
    root, cfg = workspace
    out = root / "train"
    code, text, _ = call("train", "--config", cfg, "--out", out)
    assert code == EXIT_OK and "engineered-ffnn" in text
    run_doc = json.loads((out / "run.json").read_text())
    assert "wall_clock" not in run_doc and run_doc["schema_version"] == 1
    assert (out / "roc_test.csv").read_text().startswith("threshold,fpr,tpr")

    code, text, _ = call("evaluate", "--config", cfg, "--model", out / "model.json", "--out", root / "eval")
    assert code == EXIT_OK
    ev = json.loads((root / "eval" / "eval.json").read_text())
    assert ev["reports"]["test"]["auc"] == pytest.approx(run_doc["reports"]["test"]["auc"], abs=1e-12)
    assert set(ev["baselines"]) == {"most_frequent", "stratified", "length"}

    code, text, _ = call("report", out / "run.json", root / "eval" / "eval.json")
    assert code == EXIT_OK and "length" in text


def test_train_is_byte_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert call("train", "--config", cfg, "--out", tmp_path / "a")[0] == EXIT_OK
    assert call("train", "--config", cfg, "--out", tmp_path / "b")[0] == EXIT_OK
    for name in ("run.json", "model.json", "roc_test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fingerprint_mismatch(workspace, tmp_path):
    root, cfg = workspace
    assert call("train", "--config", cfg, "--out", tmp_path)[0] == EXIT_OK
    other = root / "other.cfg"
    other.write_text(cfg.read_text() + "min_fraction = 0.2\n")
    code, _, err = call("evaluate", "--config", other, "--model", tmp_path / "model.json",
                        "--out", tmp_path / "ev")
    assert code == EXIT_DATA and "vocab-hash mismatch" in err
    assert not (tmp_path / "ev" / "eval.json").exists()


@pytest.mark.parametrize("command", ["gridsearch", "ablate", "shuffle-test", "resample-test"])
def test_analysis_commands(workspace, tmp_path, command):
    _, cfg = workspace
    code, text, _ = call(command, "--config", cfg, "--out", tmp_path)
    assert code == EXIT_OK and text.strip()
    (artifact,) = list(tmp_path.glob("*.json"))
    code, rendered, _ = call("report", artifact)
    assert code == EXIT_OK and rendered.strip()


def test_usage_errors(workspace, tmp_path):
    _, cfg = workspace
    assert call()[0] == EXIT_USAGE
    assert call("frobnicate")[0] == EXIT_USAGE
    assert call("train")[0] == EXIT_USAGE
    assert call("evaluate", "--config", cfg)[0] == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("model = svm\nclicks = x\n")
    code, out, err = call("train", "--config", bad, "--out", tmp_path)
    assert code == EXIT_USAGE and out == "" and "svm" in err


def test_data_errors_leave_no_artifacts(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"clicks = {root / 'missing.jsonl'}\n")
    code, _, err = call("train", "--config", cfg, "--out", tmp_path / "o")
    assert code == EXIT_DATA and "missing" in err
    assert not (tmp_path / "o").exists() or not any((tmp_path / "o").iterdir())
    junk = tmp_path / "junk.json"
    junk.write_text("{}")
    assert call("report", junk)[0] == EXIT_DATA


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clickintent.cli", "report"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and proc.stdout == ""
