from __future__ import annotations

import json
import subprocess
import sys

import pytest

from actsvd.autodiff import certify_gradients
from actsvd.cli import DEFAULTS, main
from actsvd.container import load_container, load_model
from actsvd.models import evaluate, make_dataset, make_toy_model
from actsvd.modes import mode_loss
from actsvd.ranks import RankAllocation, round_ranks


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("DOBI_SEED", raising=False)


def test_eval_dense_matches_library(capsys):
    code, out = run(capsys, "eval", "--kind", "char_lm", "--seed", "0", "--split", "test")
    assert code == 0
    ref = evaluate(make_toy_model("char_lm", 0), make_dataset("char_lm", 0, 64, "test"))
    assert out["task_loss"] == ref["task_loss"]
    assert out["perplexity"] == ref["perplexity"]
    assert out["command"] == "eval" and out["mode"] == "dense"


def test_eval_from_files_matches_library(capsys, tmp_path):
    model_path, data_path = tmp_path / "m.actsvd", tmp_path / "d.bin"
    assert run(capsys, "init-model", "--kind", "teacher_student_regression", "--seed", "2", "--out", str(model_path))[0] == 0
    assert run(capsys, "gen-data", "--kind", "teacher_student_regression", "--seed", "2", "--count", "8", "--out", str(data_path))[0] == 0
    alloc = round_ranks(RankAllocation.uniform(make_toy_model("teacher_student_regression").dims(), 0.5), 0.5)
    alloc_path = tmp_path / "a.json"
    alloc.save(alloc_path)
    code, out = run(capsys, "eval", "--model", str(model_path), "--data", str(data_path), "--mode", "hard", "--alloc", str(alloc_path))
    assert code == 0
    ref = mode_loss(load_model(model_path), make_dataset("teacher_student_regression", 2, 8), "hard", alloc=alloc)
    assert out["task_loss"] == ref


def test_gradcheck_reports_match_library(capsys):
    code, out = run(capsys, "gradcheck", "--degenerate")
    assert code == 0
    assert out["all_finite"] is True and out["passed"] is True and out["matrices"] == 20
    assert out == {"command": "gradcheck"} | certify_gradients(20, 0, degenerate=True).to_dict()
    code, out = run(capsys, "gradcheck", "--matrices", "10")
    assert code == 0 and out["compared"] == 10 and out["max_rel_error"] < 1e-4


def test_numerical_failure_exits_3(capsys):
    assert run(capsys, "gradcheck", "--matrices", "3", "--tolerance", "1e-30")[0] == 3


def test_usage_errors_exit_1(capsys, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--no-such-flag"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1
    assert run(capsys, "eval", "--count", "0")[0] == 1
    bad = tmp_path / "c.json"
    bad.write_text(json.dumps({"bogus_key": 1}))
    assert run(capsys, "eval", "--config", str(bad))[0] == 1
    assert run(capsys, "eval", "--config", str(tmp_path / "missing.json"))[0] == 1
    bad.write_text("{not json")
    assert run(capsys, "eval", "--config", str(bad))[0] == 1


def test_data_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "eval", "--model", str(tmp_path / "missing.actsvd"))[0] == 2
    corrupt = tmp_path / "c.actsvd"
    corrupt.write_bytes(b"NOTAMODEL" * 10)
    assert run(capsys, "eval", "--model", str(corrupt))[0] == 2
    assert run(capsys, "eval", "--mode", "hard")[0] == 2
    assert run(capsys, "pack", "--out", str(tmp_path / "p.actsvd"))[0] == 2
    data_path = tmp_path / "d.bin"
    run(capsys, "gen-data", "--kind", "teacher_student_regression", "--count", "2", "--out", str(data_path))
    assert run(capsys, "eval", "--kind", "char_lm", "--data", str(data_path))[0] == 2


def test_config_precedence(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "count": 4, "kind": "teacher_student_regression"}))
    loss = lambda seed, count: evaluate(make_toy_model("teacher_student_regression", seed), make_dataset("teacher_student_regression", seed, count))["task_loss"]
    monkeypatch.setenv("DOBI_SEED", "7")
    _, out = run(capsys, "eval", "--config", str(cfg))
    assert out["task_loss"] == loss(3, 4) and out["samples"] == 4
    _, out = run(capsys, "eval", "--config", str(cfg), "--seed", "5")
    assert out["task_loss"] == loss(5, 4)
    cfg.write_text(json.dumps({"count": 4, "kind": "teacher_student_regression"}))
    _, out = run(capsys, "eval", "--config", str(cfg))
    assert out["task_loss"] == loss(7, 4)
    monkeypatch.delenv("DOBI_SEED")
    _, out = run(capsys, "eval", "--config", str(cfg))
    assert out["task_loss"] == loss(DEFAULTS["seed"], 4)
    monkeypatch.setenv("DOBI_SEED", "x")
    assert run(capsys, "eval", "--config", str(cfg))[0] == 1


def test_stepwise_commands(capsys, tmp_path):
    common = ["--kind", "teacher_student_regression", "--count", "16"]
    alloc = tmp_path / "alloc.json"
    code, out = run(capsys, "train-ranks", *common, "--epochs", "4", "--target-ratio", "0.5",
                    "--out", str(alloc), "--trajectory", str(tmp_path / "t.csv"), "--figure", str(tmp_path / "t.png"))
    assert code == 0 and out["rounded"] is True
    assert RankAllocation.load(alloc).is_integer()
    assert (tmp_path / "t.csv").read_text().startswith("epoch,layer,k,task_loss,ratio\n")
    assert (tmp_path / "t.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    updated = tmp_path / "u.actsvd"
    code, out = run(capsys, "update-weights", *common, "--alloc", str(alloc), "--out", str(updated), "--records", str(tmp_path / "r.csv"))
    assert code == 0 and all(v["oracle_fraction"] >= 0.9 for v in out["layers"].values())

    packed = tmp_path / "p.actsvd"
    code, out = run(capsys, "pack", "--model", str(updated), "--out", str(packed))
    assert code == 0
    for name, rep in out["layers"].items():
        assert rep["slots"] == rep["k"] * max(make_toy_model("teacher_student_regression").layer(name).shape)
    loaded = load_container(packed)
    assert all(layer.packed is not None for layer in loaded.model.layers)

    code, out = run(capsys, "eval", *common, "--model", str(packed), "--mode", "factored")
    assert code == 0 and out["task_loss"] == mode_loss(loaded.model, make_dataset("teacher_student_regression", 0, 16), "factored")

    code, out = run(capsys, "compare-trunc", *common, "--ratios", "0.4", "0.8", "--csv", str(tmp_path / "c.csv"),
                    "--sweep-csv", str(tmp_path / "s.csv"), "--figure", str(tmp_path / "c.png"))
    assert code == 0 and set(out["ratios"]) == {"0.4", "0.8"}
    assert (tmp_path / "c.png").exists() and (tmp_path / "s.csv").exists()


def test_update_weights_rejects_continuous_alloc(capsys, tmp_path):
    dims = make_toy_model("teacher_student_regression").dims()
    path = tmp_path / "a.json"
    RankAllocation({n: 1.5 for n in dims}, dims).save(path)
    assert run(capsys, "update-weights", "--kind", "teacher_student_regression", "--alloc", str(path), "--out", str(tmp_path / "o"))[0] == 2


def test_gen_data_byte_identical(capsys, tmp_path):
    for name in ("a", "b"):
        run(capsys, "gen-data", "--kind", "char_lm", "--seed", "4", "--count", "6", "--out", str(tmp_path / name))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "actsvd", "eval", "--kind", "teacher_student_regression", "--count", "2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["samples"] == 2
    proc = subprocess.run([sys.executable, "-m", "actsvd", "eval", "--model", str(tmp_path / "nope")], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    runs = []
    for name in ("run1", "run2"):
        out = tmp_path_factory.mktemp(name)
        code = main(["pipeline", "--kind", "char_lm", "--seed", "0", "--target-ratio", "0.6", "--out-dir", str(out), "--log-level", "WARNING"])
        runs.append((code, out))
    return runs


def test_pipeline_hits_target(pipeline_runs):
    code, out = pipeline_runs[0]
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert abs(summary["ratio"] - 0.6) < 0.02
    assert summary["packed_loss"] <= 1.15 * summary["updated_loss"]
    assert summary["packed_loss"] < summary["weight_svd_loss"]
    expected = {"alloc.json", "model.actsvd", "remap.csv", "remap.png", "summary.json", "trajectory.csv", "trajectory.png", "updates.csv"}
    assert {p.name for p in out.iterdir()} == expected


def test_pipeline_artifacts_byte_identical(pipeline_runs):
    (_, a), (_, b) = pipeline_runs
    for path in sorted(a.iterdir()):
        assert path.read_bytes() == (b / path.name).read_bytes(), path.name
