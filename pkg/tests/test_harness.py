import json

import numpy as np
import pytest
import torch

from lcclab.harness.cli import main
from lcclab.harness.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from lcclab.harness.evaluate import evaluate
from lcclab.harness.pipeline import STAGES, StageError, run_pipeline, sweep
from lcclab.harness.tasks import export_jsonl, gen_synthetic_task
from lcclab.model import ModelConfig, init_params

TINY = {
    "model": {"n_layers": 2, "n_heads": 2, "d_model": 16, "d_head": 8, "d_ffn": 32, "max_seq_len": 32},
    "data": {"n_samples": 200, "max_len": 12, "recovery_samples": 20},
    "train": {"epochs": 2, "lr": 1e-2},
    "prune": {"calib_samples": 16},
    "probe": {"epochs": 10, "fraction": 0.5},
    "lcc": {"epochs": 1},
}


def tiny(tmp_path, **over) -> ExperimentConfig:
    obj = json.loads(json.dumps(TINY))
    for k, v in over.items():
        if isinstance(v, dict):
            obj.setdefault(k, {}).update(v)
        else:
            obj[k] = v
    obj["out"] = str(tmp_path / "runs")
    return config_from_dict(obj)


def write_cfg(tmp_path, **over):
    cfg = tiny(tmp_path, **over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    return p


# -- config ------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    p = write_cfg(tmp_path)
    assert load_config(p) == tiny(tmp_path)


@pytest.mark.parametrize(
    "obj, msg",
    [
        ({"bogus": 1}, "unknown keys"),
        ({"probe": {"k": 1, "fractoin": 0.5}}, "probe: unknown keys"),
        ({"probe": {"fraction": 0.0}}, "fraction"),
        ({"probe": {"fraction": 1.5}}, "fraction"),
        ({"probe": {"selector": "best"}}, "selector"),
        ({"prune": {"matrices": ["wq", "wz"]}}, "unknown names"),
        ({"data": {"probe_jsonl": "/nonexistent.jsonl"}}, "not found"),
        ({"model": {"d_model": 10}}, "model"),
    ],
)
def test_config_errors(obj, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(obj)


def test_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)


# -- evaluate ------------------------------------------------------------------


def test_uniform_model_metrics():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_ffn=16)
    p = init_params(cfg)
    p.tensors["tok_emb"] = torch.zeros_like(p["tok_emb"])
    recs = gen_synthetic_task(0, 200).split("held_out")
    ev = evaluate(p, recs)
    assert ev["accuracy"] == 0.5
    assert ev["perplexity"] == pytest.approx(64.0)


def test_evaluate_bounds_and_determinism():
    p = init_params(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_head=8, d_ffn=16))
    recs = gen_synthetic_task(0, 200).split("held_out")
    a, b = evaluate(p, recs), evaluate(p, recs)
    assert a == b
    assert 0.0 <= a["accuracy"] <= 1.0 and a["perplexity"] >= 1.0
    with pytest.raises(ValueError):
        evaluate(p, [])


# -- pipeline --------------------------------------------------------------------


def test_pipeline_runs_and_caches(tmp_path):
    cfg = tiny(tmp_path)
    pipe = run_pipeline(cfg)
    rep = pipe.results["eval"].value
    assert all(not pipe.results[s].cached for s in STAGES)
    for s in STAGES:
        assert (pipe.results[s].dir / "done.json").is_file()
    assert 0 <= rep["accuracy"] <= 1 and rep["perplexity"] >= 1
    assert rep["sparsity"]["global_sparsity"] == pytest.approx(0.5)
    assert len(rep["selected_sites"]) == 2
    root = tmp_path / "runs"
    assert (root / rep["tables"]["delta_lambda"]).is_file()
    assert (root / rep["tables"]["probe"]).read_text().startswith("layer,head,accuracy,selected")
    before = {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}
    again = run_pipeline(cfg)
    assert all(again.results[s].cached for s in STAGES)
    assert before == {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}


def test_report_byte_identical_across_fresh_runs(tmp_path):
    import shutil

    cfg = tiny(tmp_path)
    first = run_pipeline(cfg).results["eval"]
    blob = (first.dir / "report.json").read_bytes()
    tables = {p.name: p.read_bytes() for p in (tmp_path / "runs").rglob("*.csv")}
    shutil.rmtree(tmp_path / "runs")
    second = run_pipeline(cfg).results["eval"]
    assert not second.cached
    assert (second.dir / "report.json").read_bytes() == blob
    assert {p.name: p.read_bytes() for p in (tmp_path / "runs").rglob("*.csv")} == tables
    other = run_pipeline(tiny(tmp_path / "elsewhere")).results["eval"].value
    assert other["config_hash"] == second.value["config_hash"]


def test_changing_probe_reuses_upstream(tmp_path):
    first = run_pipeline(tiny(tmp_path))
    second = run_pipeline(tiny(tmp_path, probe={"k": 3}))
    for s in ("train", "prune", "capture", "decompose"):
        assert second.results[s].cached and second.results[s].key == first.results[s].key
    assert not second.results["probe"].cached


def test_ratio_zero_matches_dense(tmp_path):
    rep = run_pipeline(tiny(tmp_path, prune={"ratio": 0.0})).results["eval"].value
    assert rep["recovered"] == rep["dense"]
    assert rep["compensated_sites"] == []


@pytest.mark.parametrize("selector", ["random", "mse", "kl"])
def test_ablation_selectors(tmp_path, selector):
    rep = run_pipeline(tiny(tmp_path, probe={"selector": selector})).results["eval"].value
    assert len(rep["selected_sites"]) == 2


def test_other_schemes_and_targets(tmp_path):
    rep = run_pipeline(tiny(tmp_path, prune={"scheme": "semi_structured"})).results["eval"].value
    assert rep["sparsity"]["global_sparsity"] == pytest.approx(0.5)
    rep = run_pipeline(tiny(tmp_path, prune={"scheme": "structured_heads", "ratio": 0.25})).results["eval"].value
    assert rep["sparsity"]["global_sparsity"] > 0
    rep = run_pipeline(tiny(tmp_path, lcc={"target": "ffn_output"})).results["eval"].value
    assert len(rep["compensated_sites"]) == 1 and rep["compensated_sites"][0].endswith(".ffn")


def test_stage_failure_names_stage_and_keeps_artifacts(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = tiny(tmp_path, data={"recovery_jsonl": str(empty)})
    with pytest.raises(StageError) as exc:
        run_pipeline(cfg)
    assert exc.value.stage == "compensate"
    root = tmp_path / "runs"
    for s in ("train", "prune", "capture", "decompose", "probe"):
        assert any((d / "done.json").is_file() for d in root.glob(f"{s}-*"))


def test_jsonl_eval_split(tmp_path):
    recs = gen_synthetic_task(9, 200, max_len=12).split("held_out")
    path = export_jsonl(recs, tmp_path / "other.jsonl")
    rep = run_pipeline(tiny(tmp_path, data={"eval_jsonl": str(path)})).results["eval"].value
    assert rep["dense"]["n_samples"] == len(recs)


def test_sweep_rows(tmp_path):
    cfg = tiny(tmp_path)
    rows = sweep(cfg, "head_fraction", [0.5, 1.0])
    assert [r["value"] for r in rows] == [0.5, 1.0]
    # every head compensated: overhead hits 1 / (2 d_l) exactly
    assert rows[1]["max_overhead"] == 1 / (2 * 16)
    single = sweep(cfg, "k", [1])
    assert single[0]["accuracy"] == run_pipeline(cfg).results["eval"].value["accuracy"]
    with pytest.raises(ValueError):
        sweep(cfg, "k", [])
    with pytest.raises(ValueError):
        sweep(cfg, "lr", [1])


# -- cli -------------------------------------------------------------------------------


def test_cli_stages_and_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["prune", "--config", str(cfg)]) == 0
    assert "prune-" in capsys.readouterr().out
    assert main(["report", "--config", str(cfg), "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "recovered" in out and "report.json" in out
    assert main(["eval", "--config", str(cfg), "--seed", "1"]) == 0
    assert "accuracy" in json.loads(capsys.readouterr().out.splitlines()[0])


def test_cli_sweep(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--axis", "k", "--values", "1,3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3


def test_cli_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"probe": {"nope": 1}}))
    assert main(["train", "--config", str(p)]) == 1
    assert "config" in capsys.readouterr().err


def test_cli_stage_failure(tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = write_cfg(tmp_path, data={"probe_jsonl": str(empty)})
    assert main(["probe", "--config", str(cfg)]) == 1
    assert "stage 'capture' failed" in capsys.readouterr().err


def test_cli_out_override(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "elsewhere")]) == 0
    assert any((tmp_path / "elsewhere").glob("train-*"))
