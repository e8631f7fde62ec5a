import json

import pytest

from tokenflux.cli import main
from tokenflux.io import load_model, read_csv

MODEL = {"num_layers": 6, "hidden_dim": 16, "ffn_dim": 32, "num_heads": 2}


@pytest.fixture
def files(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps(MODEL))
    spec = {"id": "c", "model": MODEL, "n_v": 10, "n_t": 3, "signal_tokens": 2, "signal_strength": 1.0}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    sched = {"stages": [{"layer": 3, "keep_ratio": 0.5, "strategy": "bypass", "merge_budget": 2},
                        {"layer": 5, "keep_ratio": 0.5, "strategy": "bypass"}]}
    (tmp_path / "sched.json").write_text(json.dumps(sched))
    return tmp_path


def test_gen_model(files):
    assert main(["gen-model", "--config", str(files / "model.json"), "--seed", "3",
                 "--out", str(files / "out" / "m.tflx")]) == 0
    assert load_model(files / "out" / "m.tflx").config.num_layers == 6


def test_gen_scenario(files):
    assert main(["gen-scenario", "--spec", str(files / "spec.json"), "--seed", "7", "--out", str(files / "s")]) == 0
    meta = json.loads((files / "s" / "c.meta.json").read_text())
    assert len(meta["roles"]) == 13 and len(meta["signal_positions"]) == 2
    assert json.loads((files / "s" / "c.json").read_text())["embed_seed"] == 7


def test_profile_and_select(files, capsys):
    main(["gen-model", "--config", str(files / "model.json"), "--out", str(files / "m.tflx")])
    assert main(["profile-layers", "--scenario", str(files / "spec.json"), "--model", str(files / "m.tflx"),
                 "--out", str(files / "p")]) == 0
    rows = read_csv(files / "p" / "profile.csv")
    assert [r["layer"] for r in rows] == ["1", "2", "3", "4", "5", "6"]
    capsys.readouterr()
    assert main(["select-layers", "--profile", str(files / "p" / "profile.csv"), "--budget", "2",
                 "--out", str(files / "p")]) == 0
    printed = json.loads(capsys.readouterr().out)
    sel = json.loads((files / "p" / "selection.json").read_text())
    assert printed == sel and set(sel) == {"layers", "objective", "budget"}
    assert sel["budget"] == 2 and all(l >= 3 for l in sel["layers"])


def test_flops(files, capsys):
    (files / "in.json").write_text(json.dumps({"T": 32, "d": 4096, "m": 11008, "n_v": 576, "n_t": 48}))
    assert main(["flops", "--inputs", str(files / "in.json"), "--out", str(files)]) == 0
    out = json.loads((files / "flops.json").read_text())
    assert out["tera"].startswith("4.14") and isinstance(out["flops"], int)
    assert json.loads(capsys.readouterr().out)["flops"] == out["flops"]


def test_overlap_and_offsets(files):
    assert main(["overlap", "--scenario", str(files / "spec.json"), "--out", str(files / "o")]) == 0
    assert read_csv(files / "o" / "overlap.csv")[0]["layer"]
    assert main(["offsets", "--scenario", str(files / "spec.json"), "--schedule", str(files / "sched.json"),
                 "--out", str(files / "f")]) == 0
    rep = json.loads((files / "f" / "offsets.json").read_text())
    assert rep["groups"] and (files / "f" / "offsets.tflx").exists()


def test_run_exit_codes(files, monkeypatch):
    monkeypatch.setenv("TOKENFLUX_THREADS", "0")
    cfg = {"scenarios": [{"id": "ok", "model": MODEL, "n_v": 8, "n_t": 2}],
           "schedules": {"drop": {"stages": [{"layer": 5, "keep_ratio": 0.5}]}}}
    (files / "run.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(files / "run.json"), "--out", str(files / "r1")]) == 0
    cfg["scenarios"].append({"id": "bad", "model": {**MODEL, "num_layers": 4}, "n_v": 8, "n_t": 2})
    (files / "run.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(files / "run.json"), "--out", str(files / "r2")]) == 1
    assert main(["run", "--config", str(files / "r1" / "manifest.json"), "--out", str(files / "r3")]) == 0
    assert (files / "r1" / "results.csv").read_bytes() == (files / "r3" / "results.csv").read_bytes()


def test_bad_input_exit_code(files):
    (files / "in.json").write_text(json.dumps({"T": 32, "bogus": 1}))
    assert main(["flops", "--inputs", str(files / "in.json")]) == 2
