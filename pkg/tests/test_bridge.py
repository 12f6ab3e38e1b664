from __future__ import annotations

import json
import os

import numpy as np
import pytest

from bridge3d.bridge.flow import cfm_interpolate, cfm_loss, euler_integrate, nearest_step, step_times
from bridge3d.bridge.hidden import (HiddenStateBundle, dump_bundle, euler_sample, extract_hidden, parse_bundle,
                                    read_bundle, tap_hidden, write_bundle)
from bridge3d.bridge.model import BridgeModel
from bridge3d.bridge.prompt import MAX_PROMPT, make_prompt, sample_prompt
from bridge3d.bridge.train import codec_for, load_bridge, train_bridge
from bridge3d.config_store import from_dict, with_updates
from bridge3d.data.annotate import VIEW_TOKENS, describe
from bridge3d.errors import ContractError, DimensionError, FormatError, NumericError
from bridge3d.numerics.random import RandomStream
from bridge3d.numerics.tensor import Tensor

from .conftest import tiny_config_data


def _model(cfg, seed=0):
    return BridgeModel.from_config(cfg, seed=seed)


def _inputs(cfg, model, seed=0, prompt=("BACK", "SLAB")):
    codec = codec_for(cfg)
    rng = RandomStream(seed)
    size = cfg.dataset.image_size
    z_front = codec.encode_tokens(rng.uniform((2, size, size)).astype(np.float32))[None]
    z_back = codec.encode_tokens(rng.uniform((2, size, size)).astype(np.float32))[None]
    cond = model.encode_condition(z_front, make_prompt(prompt).ids()[None])
    eps = rng.normal(z_front.shape).astype(np.float32)
    return z_front, z_back, cond, eps


def test_cfm_interpolate_endpoints(rng_np):
    z0, eps = rng_np.normal(size=(3, 4)), rng_np.normal(size=(3, 4))
    np.testing.assert_array_equal(cfm_interpolate(z0, eps, 0.0), z0)
    np.testing.assert_array_equal(cfm_interpolate(z0, eps, 1.0), eps)
    np.testing.assert_allclose(cfm_interpolate(np.zeros(2), np.full(2, 2.0), 0.5), [1.0, 1.0])
    with pytest.raises(ContractError):
        cfm_interpolate(z0, eps, 1.5)


def test_cfm_loss_values(rng_np):
    z0, eps = rng_np.normal(size=(2, 3)), rng_np.normal(size=(2, 3))
    assert cfm_loss(Tensor(eps - z0), eps, z0).item() == pytest.approx(0.0, abs=1e-15)
    assert cfm_loss(Tensor(eps - z0 + 1.0), eps, z0).item() == pytest.approx(1.0)


@pytest.mark.parametrize("steps", [1, 4, 32])
def test_euler_recovers_data_under_the_exact_field(steps, rng_np):
    x0, eps = rng_np.normal(size=(5, 3)), rng_np.normal(size=(5, 3))
    z = euler_integrate(lambda z, tk: (z - x0) / tk, eps, steps)
    np.testing.assert_allclose(z, x0, atol=1e-6)


def test_step_grid_and_nearest_step():
    assert step_times(4) == [1.0, 0.75, 0.5, 0.25]
    assert [nearest_step(t, 4) for t in (1.0, 0.75, 0.6, 0.25, 0.0)] == [0, 1, 2, 3, 3]
    assert nearest_step(0.625, 4) == 1
    assert [nearest_step(t, 32) for t in (0.0, 0.25, 0.5, 0.75, 1.0)] == [31, 24, 16, 8, 0]
    with pytest.raises(ContractError):
        step_times(0)


def test_prompt_inclusion_rate():
    annotation = describe("spike", "large")
    rng = RandomStream(2024)
    draws = [sample_prompt(annotation, rng, 0.5) for _ in range(10_000)]
    rate = np.mean([bool(d.back_tokens) for d in draws])
    assert abs(rate - 0.5) <= 0.015
    assert all(d.view_tokens == VIEW_TOKENS for d in draws)
    assert {d.back_tokens for d in draws if d.back_tokens} == set(annotation.descriptions)


def test_single_description_is_always_chosen():
    annotation = describe("none", None)
    rng = RandomStream(1)
    assert {sample_prompt(annotation, rng, 1.0).back_tokens for _ in range(50)} == {("BACK", "PLAIN")}


def test_prompt_vocabulary():
    assert make_prompt(["BACK", "WINGS"]).tokens == VIEW_TOKENS + ("BACK", "WINGS")
    with pytest.raises(ContractError):
        make_prompt(["BACK", "TAIL"])


def test_condition_encoding(tiny_cfg):
    model = _model(tiny_cfg)
    z_front, _, cond, _ = _inputs(tiny_cfg, model)
    again = model.encode_condition(z_front, make_prompt(["BACK", "SLAB"]).ids()[None])
    assert cond.shape == (1, 5 + 16, tiny_cfg.bridge.d_model)
    np.testing.assert_array_equal(cond.data, again.data)
    with pytest.raises(ContractError):
        model.encode_condition(z_front, np.zeros((1, MAX_PROMPT + 1), dtype=np.int64))


def test_forward_shapes(tiny_cfg):
    model = _model(tiny_cfg)
    z_front, z_back, cond, _ = _inputs(tiny_cfg, model)
    v, hidden = model.forward(z_back, 0.3, cond, z_front)
    assert v.shape == z_back.shape
    assert len(hidden) == tiny_cfg.bridge.layers
    assert all(h.shape == (1, 16, tiny_cfg.bridge.d_model) for h in hidden)
    with pytest.raises(DimensionError):
        model.forward(z_back[:, :8], 0.3, cond, z_front)


@pytest.mark.parametrize("case", ["bridge_forward", "cfm_loss"])
def test_whole_bridge_gradients(case):
    from bridge3d.harness.gradsuite import CASES, run_gradcheck_suite
    from bridge3d.numerics.tensor import Tape, backward
    f, params = CASES[case](RandomStream(11))
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    # encoder, time embedding, prompt embedding and head all receive gradient
    assert len(params) > 30
    assert all(np.abs(grads[p]).sum() > 0 for p in params)
    for seed in range(3):
        rows = run_gradcheck_suite(seed=seed, names=[case])
        assert rows["passed"].all(), rows.to_string()


@pytest.mark.parametrize("n_taps,d_model", [(1, 4), (2, 8), (3, 8), (3, 12)])
def test_hidden_width_is_taps_times_width(n_taps, d_model):
    data = tiny_config_data()
    data["dataset"]["image_size"] = 8
    data["bridge"].update({"d_model": d_model, "layers": 3, "taps": list(range(1, n_taps + 1)), "heads": 2})
    cfg = from_dict(data)
    model = _model(cfg)
    z_front, _, cond, eps = _inputs(cfg, model)
    bundle = extract_hidden(model, z_front, cond, cfg.bridge.taps, 0.5, eps=eps, steps=4)
    assert bundle.h.shape == (4, n_taps * d_model)
    assert bundle.width == n_taps * d_model


def test_teacher_forced_at_zero_is_a_clean_forward(tiny_cfg):
    model = _model(tiny_cfg)
    z_front, z_back, cond, eps = _inputs(tiny_cfg, model)
    h = tap_hidden(model, z_front, cond, [1, 2], 0.0, "teacher_forced", eps=eps, z_back=z_back)
    _, hidden = model.forward(z_back, 0.0, cond, z_front)
    np.testing.assert_array_equal(h, np.concatenate([hidden[0].data, hidden[1].data], axis=-1))


def test_trajectory_at_one_taps_the_first_step(tiny_cfg):
    model = _model(tiny_cfg)
    z_front, _, cond, eps = _inputs(tiny_cfg, model)
    h = tap_hidden(model, z_front, cond, [2], 1.0, "trajectory", eps=eps, steps=8)
    _, hidden = model.forward(eps, 1.0, cond, z_front)
    np.testing.assert_array_equal(h, hidden[1].data)


def test_tap_errors(tiny_cfg):
    model = _model(tiny_cfg)
    z_front, _, cond, eps = _inputs(tiny_cfg, model)
    with pytest.raises(ContractError):
        tap_hidden(model, z_front, cond, [], 0.5, eps=eps)
    with pytest.raises(ContractError):
        tap_hidden(model, z_front, cond, [3], 0.5, eps=eps)
    with pytest.raises(ContractError):
        tap_hidden(model, z_front, cond, [1], 0.5, "teacher_forced", eps=eps)


def test_euler_sample_single_step(tiny_cfg):
    model = _model(tiny_cfg)
    z_front, _, cond, eps = _inputs(tiny_cfg, model)
    expected = eps - model.velocity(eps, 1.0, cond, z_front)
    np.testing.assert_allclose(euler_sample(model, z_front, cond, 1, eps), expected, atol=1e-6)


def test_hidden_bundle_format(tmp_path, rng_np):
    bundle = HiddenStateBundle(h=rng_np.normal(size=(4, 6)).astype(np.float32), tap_layers=(2, 4),
                               tap_time=0.25, mode="trajectory", pair_id="a00001/clean/3")
    path = str(tmp_path / "h.k3hid")
    write_bundle(path, bundle)
    back = read_bundle(path)
    np.testing.assert_array_equal(back.h, bundle.h)
    assert (back.tap_layers, back.tap_time, back.mode, back.source_tag, back.pair_id) == \
        ((2, 4), 0.25, "trajectory", "hidden_states", "a00001/clean/3")
    buf = dump_bundle(bundle)
    with pytest.raises(FormatError):
        parse_bundle(b"K3CK" + buf[4:])
    with pytest.raises(FormatError):
        parse_bundle(buf[:4] + (9).to_bytes(4, "little") + buf[8:])


def test_zero_steps_checkpoint_is_the_initialization(tmp_path, tiny_dataset, tiny_cfg):
    cfg = with_updates(tiny_cfg, train={"bridge_steps": 0})
    path = train_bridge(tiny_dataset, cfg, str(tmp_path / "b.k3ckpt"))
    model, loaded_cfg = load_bridge(path)
    assert loaded_cfg == cfg
    init = BridgeModel.from_config(cfg).state_dict()
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, init[name])


def test_training_is_reproducible_and_logged(tmp_path, tiny_dataset, tiny_cfg):
    paths = [train_bridge(tiny_dataset, tiny_cfg, str(tmp_path / run / "b.k3ckpt")) for run in ("x", "y")]
    blobs = [open(p, "rb").read() for p in paths]
    assert blobs[0] == blobs[1]
    with open(os.path.join(tmp_path, "x", "loss_log.jsonl"), encoding="utf-8") as f:
        records = [json.loads(line) for line in f]
    assert [r["step"] for r in records] == [1, 2, 3]
    assert set(records[0]) == {"step", "loss", "grad_norm", "lr", "phase"}


def test_nan_loss_aborts_training(tmp_path, tiny_dataset, tiny_cfg, monkeypatch):
    import bridge3d.bridge.train as bridge_train
    monkeypatch.setattr(bridge_train, "bridge_step_loss", lambda *a, **k: Tensor(np.array(np.nan)))
    with pytest.raises(NumericError, match="step 1"):
        train_bridge(tiny_dataset, tiny_cfg, str(tmp_path / "b.k3ckpt"))


def test_load_rejects_other_kinds(tmp_path):
    from bridge3d.numerics.checkpoint import save_checkpoint
    path = str(tmp_path / "g.k3ckpt")
    save_checkpoint(path, {}, {"kind": "gen3d"})
    with pytest.raises(FormatError):
        load_bridge(path)


@pytest.mark.slow
def test_single_pair_memorization(tmp_path):
    from bridge3d.data.dataset import Dataset, build_dataset
    cfg = from_dict({"dataset": {"n_assets": 1, "holdout_fraction": 0.0}, "train": {"bridge_steps": 2000, "lr": 1e-3}})
    build_dataset(cfg.dataset, 0, str(tmp_path / "ds"))
    dataset = Dataset(str(tmp_path / "ds"))
    pair = dataset.pairs("clean")[0]
    path = train_bridge(dataset, with_updates(cfg, bridge={"prompt_prob": 1.0}), str(tmp_path / "b.k3ckpt"),
                        pair_ids=[pair["id"]])
    with open(tmp_path / "loss_log.jsonl", encoding="utf-8") as f:
        losses = [json.loads(line)["loss"] for line in f]
    assert np.mean(losses[-50:]) < 0.05

    model, cfg = load_bridge(path)
    codec = codec_for(cfg)
    z_front = codec.encode_tokens(dataset.image(pair["front"]))[None]
    prompt = make_prompt(dataset.annotation(pair["asset_id"]).descriptions[0])
    cond = model.encode_condition(z_front, prompt.ids()[None])
    eps = RandomStream(0).normal(z_front.shape).astype(np.float32)
    z = euler_sample(model, z_front, cond, 32, eps)
    assert np.mean((codec.decode(z[0]) - dataset.image(pair["back"])) ** 2) < 1e-2
