import json

import numpy as np
import pytest

from tntlab.cli import main
from tntlab.config import ExperimentConfig, parse_override
from tntlab.errors import ConfigError
from tntlab.events import EventStream, decode_aer, encode_aer
from tntlab.experiment import audit, load_model, run_experiment

TINY = {
    "glyphs.n_classes": 3, "glyphs.n_train": 2, "glyphs.n_test": 1,
    "sweep.n_directions": 4, "sweep.speed": 60.0,
    "pipeline.width": 20, "pipeline.height": 20, "pipeline.hidden": 16,
    "pipeline.iterations": 15, "pipeline.batch_size": 4,
}
TINY_ARGS = [f"--{k}={json.dumps(v)}" for k, v in TINY.items()]


def tiny_config(**extra):
    return ExperimentConfig().with_overrides({**TINY, **extra})


def test_config_json_round_trip(tmp_path):
    cfg = tiny_config(seed=3)
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert back.to_json() == cfg.to_json()


def test_hash_tracks_content_but_not_output_dir():
    cfg = tiny_config()
    assert cfg.with_overrides({"output_dir": "elsewhere"}).config_hash() == cfg.config_hash()
    assert cfg.with_overrides({"pipeline.lr": 0.02}).config_hash() != cfg.config_hash()


def test_overrides_and_errors():
    assert parse_override("--pipeline.lr=0.05") == ("pipeline.lr", 0.05)
    assert parse_override("--pipeline.variant=tnt") == ("pipeline.variant", "tnt")
    with pytest.raises(ConfigError) as info:
        ExperimentConfig().with_overrides({"pipeline.nope": 1})
    assert info.value.field == "pipeline.nope"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"pipeline": {"lr": -1}})
    with pytest.raises(ConfigError):
        ExperimentConfig(splits=["1/sideways"]).validate()


def test_output_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv("TNT_OUTPUT_DIR", raising=False)
    assert str(ExperimentConfig().resolved_output_dir()) == "tnt_output"
    monkeypatch.setenv("TNT_OUTPUT_DIR", str(tmp_path))
    assert ExperimentConfig().resolved_output_dir() == tmp_path
    assert ExperimentConfig(output_dir="x").resolved_output_dir().name == "x"


def test_run_experiment_artifacts_and_reproducibility(tmp_path):
    cfg = tiny_config()
    results = run_experiment(cfg, out_dir=tmp_path / "a")
    run_experiment(cfg, out_dir=tmp_path / "b")
    assert set(results) == {"baseline", "tnt"} and set(results["tnt"]) == {"1/all"}
    lines = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert lines[0] == f"# config_hash={cfg.config_hash()}"
    assert lines[1] == "variant,1/all" and len(lines) == 4
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert [str(n) for n in names] == ["config.json", "logs/baseline_1.csv", "logs/tnt_1.csv",
                                        "results/baseline_1-all.json", "results/tnt_1-all.json",
                                        "summary.csv", "summary.json"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert audit(tmp_path / "a") == []
    other = tiny_config(seed=1)
    assert len(audit(tmp_path / "a", other)) == 6


def test_exit_codes(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["run", "--pipeline.nope=1", "--out", str(tmp_path)]) == 1
    assert main(["run", "--simulate=false", "--out", str(tmp_path)]) == 1
    assert main(["decode", str(tmp_path / "missing.aer"), str(tmp_path / "o.txt")]) == 2
    assert main(["run", "--dataset=\"" + str(tmp_path / "nowhere") + "\"", "--out", str(tmp_path)]) == 2
    assert main(["decode", "a", "b", "--pipeline.lr=1"]) == 1


def test_decode_encode_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    n = 50
    s = EventStream(rng.integers(0, 34, n).astype(float), rng.integers(0, 34, n).astype(float),
                    np.sort(rng.integers(0, 2 ** 23, n)).astype(float),
                    rng.choice(np.array([-1, 1], np.int8), n), 34, 34)
    (tmp_path / "in.aer").write_bytes(encode_aer(s))
    assert main(["decode", str(tmp_path / "in.aer"), str(tmp_path / "ev.txt")]) == 0
    assert main(["encode", str(tmp_path / "ev.txt"), str(tmp_path / "out.aer")]) == 0
    assert (tmp_path / "out.aer").read_bytes() == (tmp_path / "in.aer").read_bytes()
    assert decode_aer((tmp_path / "out.aer").read_bytes(), 34, 34) == s


def test_simulate_train_eval_and_audit(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["simulate", "--out", str(out)] + TINY_ARGS) == 0
    manifest = json.loads((out / "dataset" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 3 * 3 * 4
    ds_args = [f"--dataset=\"{out / 'dataset'}\"", "--simulate=false"]
    assert main(["train", "--variant", "baseline", "--out", str(out)] + TINY_ARGS + ds_args) == 0
    model_path = out / "model_baseline_1.tnnw"
    model, _ = load_model(model_path)
    assert model.cfg.variant == "baseline"
    assert main(["eval", "--model", str(model_path), "--result", str(out / "r.json"), "--out", str(out)]
                + TINY_ARGS + ds_args) == 0
    assert json.loads((out / "r.json").read_text())["n"] == 3 * 4
    assert main(["run", "--out", str(tmp_path / "run")] + TINY_ARGS) == 0
    assert main(["audit", str(tmp_path / "run")]) == 0
    summary = tmp_path / "run" / "summary.json"
    summary.write_text(summary.read_text().replace('"config_hash": "', '"config_hash": "x'))
    assert main(["audit", str(tmp_path / "run")]) == 3


def test_output_env_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("TNT_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["simulate"] + TINY_ARGS) == 0
    assert (tmp_path / "env" / "dataset" / "manifest.json").exists()


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "--trials", "10", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert text.count("PASS") == 5
    summary = json.loads((tmp_path / "verify_summary.json").read_text())
    assert all(c["passed"] for c in summary["checks"].values())
    assert len((tmp_path / "verify_trials.jsonl").read_text().splitlines()) == 10
