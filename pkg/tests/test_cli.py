import json
import os

import numpy as np
import pytest

from vmr.cli import main


@pytest.fixture()
def exp_config(tmp_path):
    doc = {
        "train": {"d": 8, "num_clips": 4, "feature_dim": 6, "word_dim": 8,
                  "epochs": 2, "batch_size": 8, "lr": 1e-3},
        "synthetic": {"n_train": 12, "n_val": 4, "n_test": 6, "num_clips": 4,
                      "feature_dim": 6,
                      "bias": {"kind": "head_biased", "head_bias": 0.8,
                               "verbs": ["open", "leave"]},
                      "object_vocab": ["door", "bag"]},
        "methods": ["tcn"],
        "ood_rhos": [5.0],
        "seeds": [0],
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    return path


def test_gen_data_writes_splits_and_features(tmp_path, exp_config):
    out = tmp_path / "data"
    rc = main(["gen-data", "--config", str(exp_config), "--out", str(out), "--quiet"])
    assert rc == 0
    assert (out / "train.json").exists()
    assert (out / "val.json").exists()
    assert (out / "test.json").exists()
    assert (out / "features" / "train_00000.vmrt").exists()


def test_train_eval_ood_eval_cycle(tmp_path, exp_config):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(exp_config), "--out", str(data), "--quiet"]) == 0
    run = tmp_path / "run"
    rc = main(["train", "--config", str(exp_config), "--method", "tcn",
               "--out", str(run), "--quiet"])
    assert rc == 0
    ckpts = list((run / "checkpoints").glob("*.ckpt"))
    assert len(ckpts) == 1
    assert (run / "trace.csv").exists()

    ev = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(ckpts[0]),
               "--annotations", str(data / "test.json"),
               "--features", str(data / "features"),
               "--out", str(ev), "--quiet"])
    assert rc == 0
    rec = json.loads((ev / "metrics.json").read_text())
    assert rec["split_tag"] == "iid" and rec["n_queries"] == 6

    ood = tmp_path / "ood"
    rc = main(["ood-eval", "--checkpoint", str(ckpts[0]),
               "--annotations", str(data / "test.json"),
               "--features", str(data / "features"),
               "--rho", "5.0", "--out", str(ood), "--quiet"])
    assert rc == 0
    rec = json.loads((ood / "metrics.json").read_text())
    assert rec["split_tag"] == "ood"


def test_analyze_bias(tmp_path, exp_config):
    data = tmp_path / "data"
    main(["gen-data", "--config", str(exp_config), "--out", str(data), "--quiet"])
    out = tmp_path / "bias"
    rc = main(["analyze-bias", "--annotations", str(data / "train.json"),
               "--clips", "4", "--out", str(out), "--quiet"])
    assert rc == 0
    counts = np.loadtxt(out / "heatmap.csv", delimiter=",")
    assert counts.sum() == 12
    assert (out / "heatmap.png").exists()


def test_report_end_to_end(tmp_path, exp_config):
    out = tmp_path / "report"
    rc = main(["report", "--config", str(exp_config), "--out", str(out), "--quiet"])
    assert rc == 0
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["cells"][0]["status"] == "ok"
    assert (out / "summary.txt").exists()


def test_grad_check_subcommand(tmp_path):
    out = tmp_path / "gc"
    rc = main(["grad-check", "--out", str(out), "--quiet"])
    assert rc == 0
    doc = json.loads((out / "grad_check.json").read_text())
    assert doc["max_rel_err"] < 1e-5


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"methods": ["nonsense"]}))
    assert main(["report", "--config", str(bad), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    missing = tmp_path / "missing.json"
    assert main(["report", "--config", str(missing), "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_partial_failure_exit_code(tmp_path):
    doc = {
        "train": {"d": 8, "num_clips": 4, "feature_dim": 6, "word_dim": 8, "epochs": 1,
                  "batch_size": 4, "lr": 1e-3},
        "annotations": {"train": str(tmp_path / "nope.json"),
                        "test": str(tmp_path / "nope.json")},
        "methods": ["tcn"],
        "seeds": [0],
        "ood_rhos": [],
    }
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(doc))
    assert main(["report", "--config", str(path), "--out", str(tmp_path / "o"), "--quiet"]) == 1
