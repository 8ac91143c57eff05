"""End-to-end command-line tests: generate, train, evaluate, verify, bench,
exercised through ``cli.main`` with artifacts under a temporary output root."""

import json
import os

import numpy as np
import pytest

from massflow import cli
from massflow import tasks as tk
from massflow import training as tr
from massflow import verify as vf
from massflow.errors import DivergenceError


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


def _write_config(tmp_path, name="config.json", **fields):
    doc = {"task": "addition", "n_train_valid": 40, "n_test": 10,
           "epochs": 2, "batch_size": 20, "n_cells": 3, "seeds": [0],
           "lr": 0.0, "out_dir": "exp"}
    doc.update(fields)
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "massflow" in capsys.readouterr().out


def test_malformed_arguments_exit_with_the_usage_code(capsys):
    # exit 2 is reserved for verification failures, so bad flags must not
    # reuse it
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--task", "not-a-task", "--out", "x"])
    assert exc.value.code == 1
    assert "invalid choice" in capsys.readouterr().err


def test_gen_writes_addition_splits_and_manifest(tmp_path):
    cfg = _write_config(tmp_path)
    assert cli.main(["gen", "--config", cfg, "--out", "data"]) == 0
    data = tmp_path / "data"
    sizes = {}
    for split in ("train", "valid", "test"):
        ds = tk.read_dataset(str(data / f"addition-{split}.mfds"))
        sizes[split] = ds.n_samples
        assert "config_hash" in ds.descriptor
    assert sizes == {"train": 20, "valid": 20, "test": 10}
    manifest = json.loads((data / "addition-manifest.json").read_text())
    assert len(manifest["files"]) == 3
    assert manifest["config_hash"]


def test_gen_is_reproducible_bytewise(tmp_path):
    cfg = _write_config(tmp_path)
    target = tmp_path / "data" / "addition-train.mfds"
    assert cli.main(["gen", "--config", cfg, "--out", "data"]) == 0
    first = target.read_bytes()
    assert cli.main(["gen", "--config", cfg, "--out", "data"]) == 0
    assert target.read_bytes() == first


def test_gen_emits_the_out_of_distribution_splits(tmp_path):
    cfg = _write_config(tmp_path)
    assert cli.main(["gen", "--config", cfg, "--out", "data",
                     "--generalization"]) == 0
    for name, (n, seq_len, _, _) in tk.ADDITION_GENERALIZATION.items():
        ds = tk.read_dataset(str(tmp_path / "data" / f"addition-{name}.mfds"))
        assert ds.n_samples == n
        assert ds.seq_len == seq_len


def test_gen_pendulum_series(tmp_path):
    cfg = _write_config(tmp_path, task="pendulum", n_steps=40)
    assert cli.main(["gen", "--config", cfg, "--out", "data"]) == 0
    ds = tk.read_dataset(str(tmp_path / "data" / "pendulum-series.mfds"))
    assert ds.descriptor["task"] == "pendulum"
    assert ds.targets.shape == (1, 40, 2)


def test_gen_rejects_unknown_operation(tmp_path, capsys):
    cfg = _write_config(tmp_path, task="static-arithmetic",
                        arithmetic_op="pow")
    assert cli.main(["gen", "--config", cfg, "--out", "data"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exits_with_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"learning_rate": 0.1}), encoding="utf-8")
    assert cli.main(["gen", "--config", str(path)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_train_rejects_impossible_marker_count(tmp_path, capsys):
    cfg = _write_config(tmp_path, n_marked=200)
    assert cli.main(["train", "--config", cfg]) == 1
    assert "error" in capsys.readouterr().err


def test_train_artifacts_and_eval_identity(tmp_path):
    cfg = _write_config(tmp_path)
    assert cli.main(["gen", "--config", cfg, "--out", "data"]) == 0
    assert cli.main(["train", "--config", cfg, "--verify-every-batch"]) == 0

    exp = next((tmp_path / "exp").glob("addition-mclstm-basic-*"))
    run = exp / "seed-0"
    for name in ("checkpoint.json", "metrics.csv", "summary.json"):
        assert (run / name).exists()
    assert (exp / "config.json").exists()
    assert (exp / "experiment.json").exists()

    summary = json.loads((run / "summary.json").read_text())
    assert summary["diverged"] is False
    assert summary["lr"] == 0.0

    # lr = 0 never updates the weights, so the loss is flat epoch over epoch
    # and a post-hoc evaluation of the train split lands on the same number.
    csv_lines = (run / "metrics.csv").read_text().strip().splitlines()
    header = csv_lines[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in csv_lines[1:]]
    losses = [float(row["train_mse"]) for row in rows]
    # Shuffling reorders the per-sample summation, so allow last-ulp wiggle.
    assert max(losses) - min(losses) <= 1e-12 * max(losses)
    assert all(float(row["conservation_max_residual"]) < 1e-10 for row in rows)

    out_json = tmp_path / "metrics.json"
    assert cli.main(["eval",
                     "--checkpoint", str(run / "checkpoint.json"),
                     "--dataset", str(tmp_path / "data" / "addition-train.mfds"),
                     "--out", str(out_json)]) == 0
    metrics = json.loads(out_json.read_text())
    assert abs(metrics["mse"] - summary["final_train_mse"]) <= 1e-12
    assert metrics["split"] == "train"
    assert metrics["seed"] == 0
    assert metrics["config_hash"] == summary["config_hash"]


def test_training_beats_the_untrained_baseline(tmp_path):
    frozen = _write_config(tmp_path, name="frozen.json")
    tuned = _write_config(tmp_path, name="tuned.json", lr=0.01, epochs=30,
                          out_dir="exp2")
    assert cli.main(["gen", "--config", frozen, "--out", "data"]) == 0
    assert cli.main(["train", "--config", frozen]) == 0
    assert cli.main(["train", "--config", tuned]) == 0
    dataset = str(tmp_path / "data" / "addition-test.mfds")

    def eval_mse(exp_root):
        run = next((tmp_path / exp_root).glob("addition-mclstm-basic-*"))
        out = tmp_path / f"{exp_root}-metrics.json"
        assert cli.main(["eval",
                         "--checkpoint", str(run / "seed-0" / "checkpoint.json"),
                         "--dataset", dataset, "--out", str(out)]) == 0
        return json.loads(out.read_text())["mse"]

    assert eval_mse("exp2") < eval_mse("exp")


def test_train_seed_list_creates_per_seed_runs(tmp_path):
    cfg = _write_config(tmp_path, epochs=1, lr=0.01)
    assert cli.main(["train", "--config", cfg, "--seed-list", "3,5"]) == 0
    exp = next((tmp_path / "exp").glob("addition-mclstm-basic-*"))
    assert (exp / "seed-3").is_dir()
    assert (exp / "seed-5").is_dir()
    doc = json.loads((exp / "experiment.json").read_text())
    assert len(doc["runs"]) == 2
    assert doc["n_diverged"] == 0


def test_train_divergence_exit_code(tmp_path, monkeypatch, capsys):
    cfg = _write_config(tmp_path, lr=0.01)

    def boom(*args, **kwargs):
        raise DivergenceError("every learning rate diverged")

    monkeypatch.setattr(tr, "run_experiment", boom)
    assert cli.main(["train", "--config", cfg]) == 3
    assert "diverged" in capsys.readouterr().err


def test_train_pendulum_writes_rollout_summary(tmp_path):
    cfg = _write_config(tmp_path, task="pendulum", n_steps=30, max_updates=10,
                        lr=0.01, out_dir="pend")
    assert cli.main(["train", "--config", cfg]) == 0
    exp = next((tmp_path / "pend").glob("pendulum-*"))
    doc = json.loads((exp / "experiment.json").read_text())
    assert doc["n_diverged"] == 0
    assert np.isfinite(doc["runs"][0]["rollout_mse"])
    assert (exp / "seed-0" / "checkpoint.json").exists()


def test_eval_dimension_mismatch_names_shapes(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    static = _write_config(tmp_path, name="static.json",
                           task="static-arithmetic")
    assert cli.main(["gen", "--config", static, "--out", "sdata"]) == 0
    assert cli.main(["train", "--config", cfg]) == 0
    run = next((tmp_path / "exp").glob("addition-mclstm-basic-*")) / "seed-0"
    code = cli.main(["eval",
                     "--checkpoint", str(run / "checkpoint.json"),
                     "--dataset", str(tmp_path / "sdata" / "static-arithmetic-train.mfds")])
    assert code == 1
    assert "M=" in capsys.readouterr().err


def test_verify_subset_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert cli.main(["verify", "--markov", "--spectral", "--K", "8",
                     "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["failed"] == 0
    assert {row["check"] for row in doc["rows"]} == {"markov-convergence",
                                                     "spectral-K8"}
    assert "PASS" in capsys.readouterr().out


def test_verify_reports_ablations_as_expected_failures(tmp_path, capsys):
    assert cli.main(["verify", "--conservation", "--configs", "8",
                     "--include-ablations"]) == 0
    assert "EXPECTED-FAIL" in capsys.readouterr().out


def test_verify_failure_exit_code(monkeypatch):
    monkeypatch.setattr(vf, "spectral_norm", lambda *a, **k: 5.0)
    assert cli.main(["verify", "--spectral", "--K", "4"]) == 2


def test_bench_quick_emits_table_and_files(tmp_path, capsys):
    assert cli.main(["bench", "--quick", "--scaling", "--out", "bench"]) == 0
    text = capsys.readouterr().out
    assert "ratio time-dependent-vs-lstm" in text
    assert "fitted exponent" in text
    doc = json.loads((tmp_path / "bench" / "bench.json").read_text())
    assert set(doc["bench"]["ratios"]) == {"time-dependent-vs-lstm",
                                           "fixed-routing-vs-lstm",
                                           "fixed-vs-time-dependent"}
    assert doc["scaling"]["exponent"] >= 1.0
    csv_lines = (tmp_path / "bench" / "bench.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + 3 + len(doc["scaling"]["cell_counts"])
