import json
import subprocess
import sys

import numpy as np
import pytest

from crossview.cli import COMMANDS, run
from crossview.store import load_dataset, load_matrix, load_prompt_set


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds, ck, emb = root / "ds", root / "ckpt", root / "emb"
    assert run(["synth", "--classes", "10", "--per-class", "50", "--dim", "32", "--noise", "0.1",
                "--seed", "7", "--out", str(ds)]) == 0
    assert run(["train", "--data", str(ds), "--pool", "att", "--epochs", "20", "--out", str(ck)]) == 0
    assert run(["embed", "--ckpt", str(ck), "--data", str(ds), "--out", str(emb)]) == 0
    return root


def test_synth_writes_valid_dataset(pipeline):
    ds = load_dataset(pipeline / "ds")
    assert ds.n == 500 and ds.dim == 32
    assert load_prompt_set(pipeline / "ds" / "prompts_clean.json").counts == [10] * 10
    run_doc = json.loads((pipeline / "ds" / "run.json").read_text())
    assert run_doc["command"] == "synth" and run_doc["params"]["seed"] == 7


def test_train_and_embed_outputs(pipeline):
    ck = pipeline / "ckpt"
    assert (ck / "checkpoint.json").exists()
    lines = (ck / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 20 * 15
    assert set(json.loads(lines[0])) == {"epoch", "batch", "loss", "lr"}
    sat = load_matrix(pipeline / "emb" / "sat.emb1").astype(np.float64)
    assert sat.shape == (500, 32)
    np.testing.assert_allclose(np.linalg.norm(sat, axis=1), 1.0, atol=1e-6)
    assert json.loads((pipeline / "emb" / "ids.json").read_text())[0] == "loc00000"


def test_classify_is_byte_identical_and_accurate(pipeline):
    args = ["classify", "--emb", str(pipeline / "emb" / "sat.emb1"),
            "--prompts", str(pipeline / "ds" / "prompts_clean.json"), "--link", "shifted",
            "--ids", str(pipeline / "emb" / "ids.json")]
    assert run(args + ["--out", str(pipeline / "p1.json")]) == 0
    assert run(args + ["--out", str(pipeline / "p2.json")]) == 0
    assert (pipeline / "p1.json").read_bytes() == (pipeline / "p2.json").read_bytes()
    assert run(["evaluate", "--preds", str(pipeline / "p1.json"), "--data", str(pipeline / "ds"),
                "--out", str(pipeline / "eval.json")]) == 0
    report = json.loads((pipeline / "eval.json").read_text())
    assert report["metric"] == "top1" and report["top1"] >= 0.9
    assert (pipeline / "p1.json.run.json").exists()


def test_select_prompts_and_retrieve(pipeline):
    out = pipeline / "best2.json"
    assert run(["select-prompts", "--prompts", str(pipeline / "ds" / "prompts_corrupted.json"),
                "--k", "2", "--mode", "best", "--out", str(out)]) == 0
    assert load_prompt_set(out).counts == [2] * 10
    scores = json.loads((pipeline / "best2.scores.json").read_text())
    assert len(scores["classes"]) == 10
    r = pipeline / "ret.json"
    emb = pipeline / "emb"
    assert run(["retrieve", "--queries", str(emb / "sat.emb1"), "--gallery", str(emb / "ground_pooled.emb1"),
                "--k", "2", "--query-ids", str(emb / "ids.json"), "--gallery-ids", str(emb / "ids.json"),
                "--out", str(r)]) == 0
    doc = json.loads(r.read_text())
    assert len(doc["results"]) == 500 and len(doc["results"][0]["neighbors"]) == 2


def test_training_cli_is_deterministic(tmp_path):
    ds = tmp_path / "ds"
    run(["synth", "--classes", "3", "--per-class", "8", "--dim", "6", "--out", str(ds)])
    for name in ("a", "b"):
        assert run(["train", "--data", str(ds), "--epochs", "2", "--batch-size", "4", "--queue", "8",
                    "--out", str(tmp_path / name)]) == 0
    # run.json records the differing --out path; every other file must match
    for f in sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "run.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"classes": 3, "per_class": 4, "dim": 5, "seed": 2}))
    assert run(["synth", "--config", str(cfg), "--dim", "6", "--out", str(tmp_path / "d")]) == 0
    params = json.loads((tmp_path / "d" / "run.json").read_text())["params"]
    assert (params["classes"], params["dim"], params["seed"]) == (3, 6, 2)
    assert load_dataset(tmp_path / "d").dim == 6


def test_exit_codes(tmp_path, caplog):
    assert run(["synth", "--bogus", "1", "--out", str(tmp_path / "x")]) == 1
    assert run(["classify", "--out", str(tmp_path / "y.json")]) == 1  # missing required flags
    assert run(["nonexistent"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert run(["synth", "--config", str(bad), "--out", str(tmp_path / "z")]) == 1
    assert run(["embed", "--ckpt", str(tmp_path / "missing"), "--data", str(tmp_path / "missing"),
                "--out", str(tmp_path / "e")]) == 2
    assert [r.levelname for r in caplog.records].count("ERROR") == 5
    assert "unrecognized arguments" in caplog.text


def test_gradcheck_command(tmp_path):
    out = tmp_path / "gc.json"
    assert run(["gradcheck", "--configs", "6", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["cases"] == 6 and doc["failed"] == [] and doc["max_rel_error"] < 1e-4
    # an impossible tolerance must gate with a nonzero exit
    assert run(["gradcheck", "--configs", "2", "--tol", "0"]) == 1


def test_every_command_accepts_common_flags():
    from crossview.cli import build_parser

    parser = build_parser()
    for name in COMMANDS:
        sub = parser._subparsers._group_actions[0].choices[name]
        flags = {s for a in sub._actions for s in a.option_strings}
        assert {"--seed", "--config", "--out"} <= flags


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "crossview", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
