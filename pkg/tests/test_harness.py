from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import pandas as pd
import pytest

from bridge3d.cli import main
from bridge3d.config_store import (COMPONENT_CLASSES, RunConfig, apply_overrides, from_dict, load_config,
                                   resolved_config, save_config, thread_count, with_updates)
from bridge3d.errors import ContractError, UsageError
from bridge3d.harness.ablations import Arm, feature_source_arms, run_ablation, timestep_arms
from bridge3d.harness.controllability import component_choices, run_controllability, swapped_prompt
from bridge3d.harness.gradsuite import CASES, run_gradcheck_suite
from bridge3d.harness.reports import ABLATION_COLUMNS, CONTROL_COLUMNS, read_report, with_mean_rows, write_report

from .conftest import tiny_config_data


def test_default_config_is_valid():
    cfg = RunConfig()
    assert cfg.bridge.taps == sorted(cfg.bridge.taps)
    assert cfg.gen3d.alpha == 2.0 * cfg.gen3d.lora_rank
    assert cfg.train.lr == 1e-4


def test_config_round_trip(tmp_path, tiny_cfg):
    path = str(tmp_path / "nested" / "cfg.json")
    save_config(tiny_cfg, path)
    assert resolved_config(load_config(path)) == resolved_config(tiny_cfg)


def test_config_rejects_bad_values():
    data = tiny_config_data()
    data["bridge"]["taps"] = [2, 1]
    with pytest.raises(ContractError):
        from_dict(data)
    data = tiny_config_data()
    data["gen3d"]["heads"] = 3
    with pytest.raises(ContractError):
        from_dict(data)
    data = tiny_config_data()
    data["train"]["learning_rate"] = 0.1
    with pytest.raises(ContractError):
        from_dict(data)


def test_missing_or_broken_config_file(tmp_path):
    with pytest.raises(UsageError, match="nope.json"):
        load_config(str(tmp_path / "nope.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(UsageError):
        load_config(str(broken))


def test_overrides(tiny_cfg):
    cfg = apply_overrides(tiny_cfg, ["bridge.tap_time=0.5", "gen3d.feature_source=final_latent"])
    assert cfg.bridge.tap_time == 0.5 and cfg.gen3d.feature_source == "final_latent"
    with pytest.raises(UsageError):
        apply_overrides(tiny_cfg, ["bridge.nope=1"])
    with pytest.raises(UsageError):
        apply_overrides(tiny_cfg, ["tap_time"])
    with pytest.raises(ContractError):
        apply_overrides(tiny_cfg, ["gen3d.feature_source=pixels"])


def test_thread_count(monkeypatch):
    monkeypatch.delenv("K3_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("K3_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("K3_THREADS", "many")
    with pytest.raises(UsageError):
        thread_count()


def test_arms_differ_only_in_the_ablated_field(tiny_cfg):
    arms = timestep_arms(tiny_cfg)
    assert [a.setting for a in arms] == ["0.0", "0.25", "0.5", "0.75"]
    configs = [resolved_config(with_updates(tiny_cfg, **a.updates)) for a in arms]
    for cfg in configs[1:]:
        assert {k: v for k, v in cfg["bridge"].items() if k != "tap_time"} == \
               {k: v for k, v in configs[0]["bridge"].items() if k != "tap_time"}
        assert {s: cfg[s] for s in cfg if s != "bridge"} == {s: configs[0][s] for s in configs[0] if s != "bridge"}
    sources = feature_source_arms(tiny_cfg)
    assert [a.setting for a in sources] == ["final_latent", "reencoded_image", "hidden_states"]
    assert all(set(a.updates) == {"gen3d"} for a in sources)


def test_with_mean_rows():
    rows = pd.DataFrame({"setting": ["a", "a", "b"], "seed": [0, 1, 0], "iou": [0.2, 0.4, 0.5]})
    out = with_mean_rows(rows, "setting", ["iou"])
    means = out[out["seed"] == "mean"].set_index("setting")["iou"]
    assert means["a"] == pytest.approx(0.3) and means["b"] == pytest.approx(0.5)
    assert len(out) == 5


def _digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_write_report_is_reproducible(tmp_path, tiny_cfg):
    rows = pd.DataFrame([{"experiment": "timestep", "setting": "0.0", "seed": 0, "iou": 0.5,
                          "chamfer": float("nan")}])
    cols = ABLATION_COLUMNS
    a = write_report(str(tmp_path / "a"), "r", rows, cols, tiny_cfg, {"k": 1}, timings={"0.0/0": 1.5})
    b = write_report(str(tmp_path / "b"), "r", rows, cols, tiny_cfg, {"k": 1}, timings={"0.0/0": 9.0})
    assert _digest(a["csv"]) == _digest(b["csv"])
    assert _digest(a["json"]) == _digest(b["json"])
    doc = read_report(a["json"])
    assert doc["columns"] == cols and doc["rows"][0]["chamfer"] is None and doc["k"] == 1
    assert "chamfer" in doc["conventions"]

    timed = with_updates(tiny_cfg, report={"include_timing": True})
    c = write_report(str(tmp_path / "c"), "r", rows, cols, timed, timings={"0.0/0": 1.5})
    assert read_report(c["json"])["rows"][0]["wall_time_s"] == 1.5


def test_component_choices_and_swaps():
    choices = component_choices(COMPONENT_CLASSES)
    assert choices[0] == ("none", None) and len(choices) == 9
    assert swapped_prompt("spike", "small", COMPONENT_CLASSES) == ["BACK", "WINGS", "SMALL"]
    assert swapped_prompt("handle", "large", COMPONENT_CLASSES) == ["BACK", "PLAIN"]
    assert swapped_prompt("none", None, COMPONENT_CLASSES) == ["BACK", "SLAB", "LARGE"]


def test_gradcheck_suite_passes():
    rows = run_gradcheck_suite(seed=0)
    assert list(rows.columns) == ["case", "max_rel_error", "passed"]
    assert len(rows) == len(CASES)
    assert rows["passed"].all(), rows.to_string()


def test_ablation_end_to_end(tmp_path, tiny_dataset, bridge_ckpt, session_cfg):
    cfg = with_updates(session_cfg, ablation={"feature_sources": ["final_latent", "hidden_states"]})
    report = run_ablation("feature-source", feature_source_arms(cfg), tiny_dataset, cfg, bridge_ckpt,
                          str(tmp_path))
    assert list(report.columns) == ABLATION_COLUMNS
    assert list(report["setting"]) == ["final_latent", "hidden_states"] * 2
    assert list(report["seed"]) == [0, 0, "mean", "mean"]
    assert report["iou"].between(0.0, 1.0).all()
    doc = read_report(str(tmp_path / "feature_source.json"))
    assert doc["arms"]["hidden_states"]["gen3d"]["feature_source"] == "hidden_states"
    assert doc["reference_values"]["hidden_states"]["iou"] == 0.352
    assert os.path.exists(tmp_path / "timings.json")

    again = tmp_path / "again"
    run_ablation("feature-source", feature_source_arms(cfg), tiny_dataset, cfg, bridge_ckpt, str(again))
    assert _digest(str(again / "feature_source.csv")) == _digest(str(tmp_path / "feature_source.csv"))


def test_ablation_needs_a_bridge(tmp_path, tiny_dataset, tiny_cfg):
    with pytest.raises(ContractError):
        run_ablation("timestep", [Arm("0.0", {"bridge": {"tap_time": 0.0}})], tiny_dataset, tiny_cfg,
                     str(tmp_path / "missing.k3ckpt"), str(tmp_path))


def test_controllability_end_to_end(tmp_path, tiny_dataset, bridge_ckpt, session_cfg):
    report = run_controllability(tiny_dataset, session_cfg, bridge_ckpt, str(tmp_path))
    assert list(report.columns) == CONTROL_COLUMNS
    row = report.iloc[0]
    assert row["gap"] == pytest.approx(row["injected"] - row["baseline"])
    assert 0.0 <= row["prompt_blind_bound"] <= 1.0
    doc = read_report(str(tmp_path / "controllability.json"))
    assert doc["arms"]["injected"]["gen3d"]["inject"] is True
    assert doc["arms"]["baseline"]["gen3d"]["inject"] is False
    assert len(doc["swapped_prompts"]) == len(doc["eval_items"])


def test_controllability_swapped_arm_uses_configured_mode(tmp_path, tiny_dataset, bridge_ckpt, session_cfg,
                                                          monkeypatch):
    from bridge3d.harness import controllability
    seen = []
    real = controllability.compute_features

    def recording(*args, **kwargs):
        seen.append(kwargs["mode"])
        return real(*args, **kwargs)
    monkeypatch.setattr(controllability, "compute_features", recording)
    cfg = with_updates(session_cfg, bridge={"hidden_mode": "teacher_forced"})
    report = run_controllability(tiny_dataset, cfg, bridge_ckpt, str(tmp_path))
    assert seen == ["teacher_forced"]
    assert np.isfinite(report.loc[0, "injected_swapped"])


def test_plots(tmp_path):
    import matplotlib
    matplotlib.use("Agg")
    from bridge3d.analytics.plots import plot_ablation, plot_loss_curve, save_figure

    rows = pd.DataFrame({"setting": ["a", "a", "b"], "seed": [0, 1, 0], "back_region_iou": [0.2, 0.4, 0.5]})
    save_figure(plot_ablation(rows), str(tmp_path / "ablation.png"))
    records = [{"phase": "bridge", "step": i, "loss": 1.0 / i} for i in range(1, 20)]
    save_figure(plot_loss_curve(records, window=5), str(tmp_path / "loss.png"))
    assert (tmp_path / "ablation.png").stat().st_size > 0
    assert (tmp_path / "loss.png").stat().st_size > 0


# command line

def test_cli_unknown_subcommand(config_file):
    assert main(["--config", config_file, "fly"]) == 2


def test_cli_missing_config(tmp_path, capsys):
    missing = str(tmp_path / "absent.json")
    assert main(["--config", missing, "gradcheck"]) == 2
    assert missing in capsys.readouterr().err


def test_cli_bad_override(config_file, tmp_path):
    assert main(["--config", config_file, "--set", "dataset.colour=1", "gen-data", "--seed", "1",
                 "--out", str(tmp_path / "d")]) == 2


def test_cli_gen_data_is_byte_reproducible(config_file, tmp_path):
    for name in ("a", "b"):
        assert main(["--config", config_file, "--set", "dataset.n_assets=2", "gen-data", "--seed", "3",
                     "--out", str(tmp_path / name)]) == 0
    a_files = sorted(os.listdir(tmp_path / "a"))
    assert a_files == sorted(os.listdir(tmp_path / "b"))
    for name in a_files:
        path = tmp_path / "a" / name
        if path.is_file():
            assert _digest(str(path)) == _digest(str(tmp_path / "b" / name))


def test_cli_gradcheck(config_file, capsys):
    assert main(["--config", config_file, "gradcheck", "--seed", "1"]) == 0
    assert "max_rel_error" in capsys.readouterr().out


def test_cli_eval_voxels(config_file, tmp_path, capsys):
    from bridge3d.data.formats import write_voxels
    grid = np.zeros((4, 4, 4), dtype=bool)
    grid[1:3, 1:3, 1:3] = True
    for d in ("pred", "gt"):
        (tmp_path / d).mkdir()
        write_voxels(str(tmp_path / d / "x.k3vox"), grid)
    out = str(tmp_path / "scores.json")
    assert main(["--config", config_file, "eval", "--pred", str(tmp_path / "pred"), "--gt",
                 str(tmp_path / "gt"), "--out", out]) == 0
    with open(out, encoding="utf-8") as f:
        assert json.load(f)["aggregate"]["iou"] == 1.0
    assert main(["--config", config_file, "eval", "--pred", str(tmp_path / "pred")]) == 2


def test_cli_contract_failure_exits_one(config_file, tmp_path):
    assert main(["--config", config_file, "train-bridge", "--data", str(tmp_path), "--out",
                 str(tmp_path / "b.k3ckpt")]) == 1


def test_cli_sample(config_file, bridge_ckpt, tiny_dataset, tmp_path, session_cfg, monkeypatch):
    from bridge3d.data.formats import write_image
    gen_path = str(tmp_path / "gen" / "gen.k3ckpt")
    os.makedirs(os.path.dirname(gen_path))
    assert main(["--config", config_file, "train-3d", "--data", tiny_dataset.root, "--bridge", bridge_ckpt,
                 "--out", gen_path, "--sparse-only"]) == 0
    front = str(tmp_path / "front.k3img")
    write_image(front, tiny_dataset.gen3d_items(split="holdout")[0].front)
    out = tmp_path / "sample"
    from bridge3d.fusion3d import train as gen_train
    loads = []
    real_load = gen_train.load_generator

    def counting_load(path):
        loads.append(path)
        return real_load(path)
    monkeypatch.setattr(gen_train, "load_generator", counting_load)
    assert main(["--config", config_file, "sample", "--bridge", bridge_ckpt, "--gen3d", gen_path,
                 "--front", front, "--prompt", "BACK SPIKE LARGE", "--out", str(out)]) == 0
    assert loads == [gen_path]
    assert sorted(os.listdir(out)) == ["run.json", "v_ss.k3vox"]
    with open(out / "run.json", encoding="utf-8") as f:
        assert json.load(f)["prompt"] == ["BACK", "SPIKE", "LARGE"]
