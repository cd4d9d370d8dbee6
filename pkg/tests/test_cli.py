import json
import os

import pytest

from hopbev.cli import main

TINY_DOC = {
    "grid": {"h": 16, "w": 16, "extent": 16.0},
    "world": {"extent": 16.0, "n_sequences": 5, "n_objects": [1, 3]},
    "model": {"channels": 16},
    "train": {"steps": 3, "eval_every": 2, "eval_holdout": 2, "log_every": 1, "dtype": "float32"},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_DOC))
    return str(path)


@pytest.fixture()
def dataset(tiny_config, tmp_path):
    out = str(tmp_path / "data")
    assert main(["generate", "--config", tiny_config, "--out", out]) == 0
    return out


def test_generate_creates_manifest(dataset):
    assert os.path.exists(os.path.join(dataset, "manifest.json"))
    manifest = json.loads(open(os.path.join(dataset, "manifest.json")).read())
    assert manifest["n_sequences"] == 5


def test_generate_seed_override(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "data2")
    assert main(["generate", "--config", tiny_config, "--out", out, "--seed", "7"]) == 0
    cfg_echo = json.loads(open(os.path.join(out, "config.json")).read())
    assert cfg_echo["seed"] == 7


def test_train_eval_report_cycle(tiny_config, dataset, tmp_path, capsys):
    run_dir = str(tmp_path / "run")
    assert main(["train", "--config", tiny_config, "--data", dataset, "--out", run_dir]) == 0
    assert os.path.exists(os.path.join(run_dir, "checkpoint_final.ckpt"))

    report = str(tmp_path / "report.json")
    code = main([
        "eval", "--checkpoint", os.path.join(run_dir, "checkpoint_final.ckpt"),
        "--data", dataset, "--report", report, "--plots", "--csv",
    ])
    assert code == 0
    doc = json.loads(open(report).read())
    assert {"mAP", "ATE", "AOE", "AVE", "composite"} <= set(doc)
    assert os.path.exists(str(tmp_path / "report.pr.png"))
    assert os.path.exists(str(tmp_path / "report.csv"))
    capsys.readouterr()

    # eval is deterministic on a saved checkpoint
    report2 = str(tmp_path / "report2.json")
    main([
        "eval", "--checkpoint", os.path.join(run_dir, "checkpoint_final.ckpt"),
        "--data", dataset, "--report", report2,
    ])
    d1 = json.loads(open(report).read())
    d2 = json.loads(open(report2).read())
    for key in ("mAP", "ATE", "AOE", "AVE", "composite"):
        assert d1[key] == d2[key]

    out_dir = str(tmp_path / "tables")
    assert main(["report", "--runs", run_dir, "--format", "md", "--out", out_dir]) == 0
    table = capsys.readouterr().out
    for col in ("mAP", "ATE", "AOE", "AVE", "composite"):
        assert col in table
    assert os.path.exists(os.path.join(out_dir, "report.md"))
    assert os.path.exists(os.path.join(out_dir, "report.png"))


def test_ablate_suite(tiny_config, dataset, tmp_path):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({
        "name": "mini",
        "seeds": [0],
        "declared_keys": ["hop.use_short_term", "hop.use_long_term"],
        "cells": [
            {"name": "short_only", "overrides": {"hop.use_long_term": False}},
            {"name": "both", "overrides": {}},
        ],
    }))
    out = str(tmp_path / "suite_out")
    assert main(["ablate", "--suite", str(suite), "--base-config", tiny_config,
                 "--data", dataset, "--out", out]) == 0
    results = json.loads(open(os.path.join(out, "suite_results.json")).read())
    assert [c["name"] for c in results["cells"]] == ["short_only", "both"]
    assert os.path.exists(os.path.join(out, "table.md"))
    assert os.path.exists(os.path.join(out, "table.csv"))
    assert os.path.exists(os.path.join(out, "metrics.png"))
    assert os.path.exists(os.path.join(out, "loss_curves.png"))


def test_ablate_partial_failure_reported(tiny_config, dataset, tmp_path, capsys):
    suite = tmp_path / "suite.json"
    suite.write_text(json.dumps({
        "name": "failing",
        "seeds": [0],
        "declared_keys": ["hop.k"],
        "cells": [
            {"name": "bad_k", "overrides": {"hop.k": 99}},
            {"name": "good", "overrides": {"hop.k": 1}},
        ],
    }))
    out = str(tmp_path / "suite_out")
    assert main(["ablate", "--suite", str(suite), "--base-config", tiny_config,
                 "--data", dataset, "--out", out]) == 0
    results = json.loads(open(os.path.join(out, "suite_results.json")).read())
    bad = results["cells"][0]["runs"][0]
    good = results["cells"][1]["runs"][0]
    assert not bad["ok"] and "error" in bad
    assert good["ok"]


def test_builtin_suites_load():
    from hopbev.ablation import load_suite

    for name in ("component", "temporal_decoder", "obj_decoder", "pred_target", "trunc_index", "connection_form"):
        suite = load_suite(name)
        assert suite["cells"]


def test_unknown_flag_rejected(tiny_config, capsys):
    code = main(["generate", "--config", tiny_config, "--out", "/tmp/x", "--bogus"])
    assert code != 0


def test_error_json_on_failure(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"unknown_key": 1}))
    code = main(["generate", "--config", str(bad_cfg), "--out", str(tmp_path / "d")])
    assert code == 1
    err = capsys.readouterr().err.strip()
    doc = json.loads(err.splitlines()[-1])
    assert doc["error"] == "ConfigError"


def test_suite_undeclared_key_rejected(tmp_path):
    from hopbev.ablation import load_suite
    from hopbev.errors import ConfigError

    suite = tmp_path / "s.json"
    suite.write_text(json.dumps({
        "name": "x", "seeds": [0], "declared_keys": [],
        "cells": [{"name": "c", "overrides": {"hop.k": 2}}],
    }))
    with pytest.raises(ConfigError):
        load_suite(str(suite))
