from __future__ import annotations

import json
import os

import numpy as np
import pytest

from bridge3d.bridge.train import load_bridge
from bridge3d.config_store import with_updates
from bridge3d.errors import ContractError, DimensionError, FormatError
from bridge3d.fusion3d.generate import generate_3d, generate_batch, generate_with, stage_noise, write_generation
from bridge3d.fusion3d.layers import (FrontImageEncoder, FusedBlock, InjectionAdapter, LoRAAdapter, attach_lora,
                                      encode_front_image, fused_block, lora_apply, project_hidden)
from bridge3d.fusion3d.stage import StageDims
from bridge3d.fusion3d.train import (build_feature_cache, build_stage, expected_feature_width, finetune_stage,
                                     item_key, load_generator, loss_3d, pretrain_backbone, stage_data, train_3d)
from bridge3d.fusion3d.voxel_latent import devoxelize, downsample_to, patchify, unpatchify, voxelize
from bridge3d.numerics.random import RandomStream
from bridge3d.numerics.tensor import Tensor


def _block_inputs(rng: RandomStream, b=2, n=5, d=8, t_img=4, t_feat=3, w=6):
    x = Tensor(rng.normal((b, n, d)).astype(np.float32))
    temb = Tensor(rng.normal((b, d)).astype(np.float32))
    f_img = Tensor(rng.normal((b, t_img, d)).astype(np.float32))
    feats = Tensor(rng.normal((b, t_feat, w)).astype(np.float32))
    return x, temb, f_img, feats


def _twin_blocks(seed: int):
    # identical backbone parameters, one with an injection branch
    plain = FusedBlock(8, 8, 2, RandomStream(seed), d_feature=None)
    injected = FusedBlock(8, 8, 2, RandomStream(seed), d_feature=6, d_inj=4)
    return plain, injected


def test_injected_block_equals_backbone_at_init():
    for trial in range(100):
        plain, injected = _twin_blocks(trial % 5)
        x, temb, f_img, feats = _block_inputs(RandomStream(1000 + trial))
        assert fused_block(injected, x, temb, f_img, feats).data.tobytes() == plain(x, temb, f_img).data.tobytes()


def test_injected_stage_equals_backbone_at_init(tiny_cfg):
    plain = build_stage(tiny_cfg, "sparse", None, seed=3)
    injected = build_stage(tiny_cfg, "sparse", 16, seed=3)
    shared = injected.state_dict()
    for name, arr in plain.state_dict().items():
        np.testing.assert_array_equal(shared[name], arr)
    rng = RandomStream(4)
    size = tiny_cfg.dataset.image_size
    for _ in range(100):
        x = rng.normal((2, plain.dims.tokens, 1))
        front = rng.uniform((2, 2, size, size)).astype(np.float32)
        feats = rng.normal((2, 16, 16)).astype(np.float32)
        tau = rng.uniform(2)
        assert injected(x, tau, front, feats).data.tobytes() == plain(x, tau, front).data.tobytes()


def test_zero_branch_has_nonzero_gradient_path():
    from bridge3d.numerics import ops
    from bridge3d.numerics.tensor import Tape, backward
    _, block = _twin_blocks(0)
    x, temb, f_img, feats = _block_inputs(RandomStream(5))
    with Tape() as tape:
        loss = ops.mean(ops.square(block(x, temb, f_img, feats)))
    grads = backward(tape, loss)
    assert np.abs(grads[block.injection.zero.weight]).sum() > 0


def test_single_feature_token_attention_is_a_broadcast():
    rng = RandomStream(6)
    adapter = InjectionAdapter(6, 4, 8, 2, rng)
    q = Tensor(rng.normal((1, 5, 8)).astype(np.float32))
    feats = Tensor(rng.normal((1, 1, 6)).astype(np.float32))
    out = adapter.attn(q, adapter.project(feats)).data
    np.testing.assert_allclose(out, np.repeat(out[:, :1], 5, axis=1), atol=1e-6)


def test_project_hidden_normalizes_and_checks_width(rng_np):
    adapter = InjectionAdapter(6, 4, 8, 2, RandomStream(7))
    h = project_hidden(rng_np.normal(size=(3, 6)), adapter).data
    np.testing.assert_allclose(h.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(h.var(axis=-1), 1.0, atol=1e-3)
    with pytest.raises(DimensionError):
        project_hidden(rng_np.normal(size=(3, 5)), adapter)


def test_front_encoder_zero_image_is_bias_only():
    enc = FrontImageEncoder(2, 4, 8, RandomStream(0))
    enc.embed.bias.data = np.arange(8, dtype=np.float32)
    out = encode_front_image(enc, np.zeros((2, 16, 16))).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(8, dtype=np.float32), out.shape))


def test_lora_identity_and_full_rank(rng_np):
    w = rng_np.normal(size=(4, 3))
    adapter = LoRAAdapter(4, 3, 2, 4.0, RandomStream(1), dtype=np.float64)
    assert lora_apply(w, adapter).tobytes() == w.astype(np.float64).tobytes()

    delta = rng_np.normal(size=(3, 3))
    full = LoRAAdapter(3, 3, 3, 3.0, RandomStream(1), dtype=np.float64)
    full.A.data, full.B.data = np.eye(3), delta
    np.testing.assert_allclose(lora_apply(w[:3], full), w[:3] + delta, atol=1e-12)

    one = LoRAAdapter(2, 2, 1, 1.0, RandomStream(1), dtype=np.float64)
    one.A.data, one.B.data = np.array([[1.0], [2.0]]), np.array([[3.0, -1.0]])
    np.testing.assert_allclose(lora_apply(np.zeros((2, 2)), one), [[3.0, -1.0], [6.0, -2.0]], atol=1e-7)

    with pytest.raises(ContractError):
        LoRAAdapter(3, 3, 0, 1.0, RandomStream(1))


def test_attach_lora_keeps_outputs_and_skips_zero_layers(tiny_cfg):
    stage = build_stage(tiny_cfg, "sparse", 16, seed=0)
    rng = RandomStream(8)
    x = rng.normal((1, stage.dims.tokens, 1))
    front = rng.uniform((1, 2, 16, 16)).astype(np.float32)
    feats = rng.normal((1, 16, 16)).astype(np.float32)
    before = stage(x, 0.5, front, feats).data
    adapters = attach_lora(stage, 2, 4.0, RandomStream(9))
    assert adapters
    assert all(b.injection.zero.lora is None for b in stage.blocks)
    assert stage(x, 0.5, front, feats).data.tobytes() == before.tobytes()


def test_voxel_latents():
    empty = np.zeros((4, 4, 4), dtype=bool)
    assert (voxelize(empty) == -1.0).all()
    grid = np.random.default_rng(0).random((4, 4, 4)) > 0.5
    np.testing.assert_array_equal(devoxelize(voxelize(grid)), grid)
    assert downsample_to(np.ones((32, 32, 32), dtype=bool), 8).all()
    one = np.zeros((32, 32, 32), dtype=bool)
    one[31, 0, 17] = True
    small = downsample_to(one, 8)
    assert small.sum() == 1 and small[7, 0, 4]
    vol = np.random.default_rng(1).random((8, 8, 8, 1))
    np.testing.assert_array_equal(unpatchify(patchify(vol, 2), 8, 2, 1), vol)


def test_stage_dims_follow_config(tiny_cfg):
    sparse = StageDims.from_config(tiny_cfg, "sparse", None)
    fine = StageDims.from_config(tiny_cfg, "fine", 16)
    assert (sparse.tokens, sparse.value_channels, sparse.cond_channels) == (64, 1, 0)
    assert (fine.tokens, fine.value_channels, fine.cond_channels) == (64, 8, 8)
    with pytest.raises(ContractError):
        StageDims.from_config(tiny_cfg, "coarse", None)


def test_stage_condition_contract(tiny_cfg):
    sparse = build_stage(tiny_cfg, "sparse", None, seed=0)
    fine = build_stage(tiny_cfg, "fine", None, seed=0)
    front = np.zeros((1, 2, 16, 16), dtype=np.float32)
    v_ss = np.zeros((1, 4, 4, 4), dtype=bool)
    with pytest.raises(ContractError):
        sparse(np.zeros((1, 64, 1)), 0.5, front, None, v_ss)
    with pytest.raises(ContractError):
        fine(np.zeros((1, 64, 8)), 0.5, front)
    assert fine(np.zeros((1, 64, 8)), 0.5, front, None, v_ss).shape == (1, 64, 8)
    with pytest.raises(DimensionError):
        sparse(np.zeros((1, 63, 1)), 0.5, front)
    with pytest.raises(DimensionError, match="structure batch 2"):
        fine(np.zeros((1, 64, 8)), 0.5, front, None, np.zeros((2, 4, 4, 4), dtype=bool))


def test_loss_3d_optimum(rng_np):
    eps, x0 = rng_np.normal(size=(2, 4, 1)), np.sign(rng_np.normal(size=(2, 4, 1)))
    assert loss_3d(Tensor(eps - x0), eps, x0).item() == pytest.approx(0.0, abs=1e-15)


def _fake_features(items, width=16, tokens=16):
    return {item_key(it): RandomStream(3).fork(item_key(it)).normal((tokens, width)).astype(np.float32)
            for it in items}


def test_missing_cache_entry_is_a_contract_error(tiny_dataset, tiny_cfg):
    items = tiny_dataset.gen3d_items(split="train")
    features = _fake_features(items[1:])
    stage = build_stage(tiny_cfg, "sparse", 16, seed=0)
    with pytest.raises(ContractError, match="missing"):
        stage_data(stage, tiny_dataset, items, features)
    with pytest.raises(ContractError):
        train_3d(tiny_dataset, tiny_cfg, None, inject=True, features=None)


def test_injected_and_plain_arms_start_from_the_same_loss(tiny_dataset, tiny_cfg):
    cfg = with_updates(tiny_cfg, train={"finetune_steps": 1})
    items = tiny_dataset.gen3d_items(split="train")
    backbone = pretrain_backbone(cfg, tiny_dataset, "sparse", seed=0, items=items)
    _, inj_losses = finetune_stage(cfg, tiny_dataset, "sparse", backbone, _fake_features(items), 0, items=items)
    _, plain_losses = finetune_stage(cfg, tiny_dataset, "sparse", backbone, None, 0, items=items)
    assert inj_losses[0] == plain_losses[0]


def test_finetuning_freezes_the_backbone(tiny_dataset, tiny_cfg):
    items = tiny_dataset.gen3d_items(split="train")
    backbone = pretrain_backbone(tiny_cfg, tiny_dataset, "sparse", seed=0, items=items)
    stage, _ = finetune_stage(tiny_cfg, tiny_dataset, "sparse", backbone, _fake_features(items), 0, items=items)
    state = stage.state_dict()
    for name, arr in backbone.items():
        np.testing.assert_array_equal(state[name], arr)
    assert any(".lora." in name for name in state)
    assert any(".injection." in name and not np.array_equal(arr, 0) for name, arr in state.items())


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_dataset, bridge_ckpt, session_cfg):
    root = tmp_path_factory.mktemp("gen3d")
    bridge, _ = load_bridge(bridge_ckpt)
    items = tiny_dataset.gen3d_items(split="train")
    features = build_feature_cache(bridge, session_cfg, tiny_dataset, items, str(root / "features"))
    path = str(root / "gen.k3ckpt")
    gen = train_3d(tiny_dataset, session_cfg, path, inject=True, features=features)
    return {"root": root, "path": path, "gen": gen, "features": features, "items": items}


def test_feature_cache_round_trip(trained, tiny_dataset, bridge_ckpt, session_cfg):
    width = expected_feature_width(session_cfg, "hidden_states")
    assert all(h.shape == (16, width) for h in trained["features"].values())
    bridge, _ = load_bridge(bridge_ckpt)
    again = build_feature_cache(bridge, session_cfg, tiny_dataset, trained["items"],
                                str(trained["root"] / "features"))
    for key, h in trained["features"].items():
        np.testing.assert_array_equal(again[key], h)
    files = os.listdir(trained["root"] / "features" / "hidden_states-trajectory-t0.2500-s0")
    assert len(files) == len(trained["items"])


def test_checkpoint_groups_and_reload(trained):
    from bridge3d.numerics.checkpoint import load_checkpoint
    entries, meta = load_checkpoint(trained["path"])
    assert meta["kind"] == "gen3d" and meta["stages"] == ["fine", "sparse"]
    assert set(meta["groups"]) == {"backbone", "lora", "injection"}
    assert any(k.startswith("injection/sparse.blocks.0.injection.") for k in entries)
    gen = load_generator(trained["path"])
    for tag, stage in trained["gen"].stages.items():
        loaded = gen.stages[tag].state_dict()
        for name, arr in stage.state_dict().items():
            np.testing.assert_array_equal(loaded[name], arr)
    with open(os.path.join(trained["root"], "loss_log.jsonl"), encoding="utf-8") as f:
        phases = {json.loads(line)["phase"] for line in f}
    assert phases == {"sparse/pretrain", "sparse/finetune", "fine/pretrain", "fine/finetune"}


def test_training_is_reproducible(trained, tiny_dataset, session_cfg, tmp_path):
    path = str(tmp_path / "gen.k3ckpt")
    train_3d(tiny_dataset, session_cfg, path, inject=True, features=trained["features"])
    with open(path, "rb") as a, open(trained["path"], "rb") as b:
        assert a.read() == b.read()


def test_generation_is_deterministic_and_batch_independent(trained):
    gen = trained["gen"]
    items = trained["items"][:3]
    keys = [item_key(it) for it in items]
    fronts = np.stack([it.front for it in items])
    feats = np.stack([trained["features"][k] for k in keys])
    v_ss, v_geo = generate_batch(gen, fronts, feats, 5, keys)
    again, _ = generate_batch(gen, fronts, feats, 5, keys)
    single, _ = generate_batch(gen, fronts[1:2], feats[1:2], 5, keys[1:2])
    assert v_ss.shape == (3, 4, 4, 4) and v_geo.shape == (3, 8, 8, 8)
    np.testing.assert_array_equal(v_ss, again)
    np.testing.assert_array_equal(v_ss[1], single[0])
    assert not np.array_equal(stage_noise(gen.stages["sparse"], 5, keys[:1]),
                              stage_noise(gen.stages["sparse"], 6, keys[:1]))


def test_generate_3d_end_to_end(trained, bridge_ckpt, tmp_path):
    front = trained["items"][0].front
    first = generate_3d(bridge_ckpt, trained["path"], front, ["BACK", "SPIKE", "LARGE"], seed=2)
    second = generate_3d(bridge_ckpt, trained["path"], front, ["BACK", "SPIKE", "LARGE"], seed=2)
    unprompted = generate_3d(bridge_ckpt, trained["path"], front, [], seed=2)
    np.testing.assert_array_equal(first[0], second[0])
    np.testing.assert_array_equal(first[1], second[1])
    bridge, bridge_cfg = load_bridge(bridge_ckpt)
    loaded = generate_with(bridge, bridge_cfg, load_generator(trained["path"]), front, ["BACK", "SPIKE", "LARGE"], 2)
    np.testing.assert_array_equal(loaded[0], first[0])
    assert unprompted[0].shape == (4, 4, 4)
    meta = write_generation(str(tmp_path / "out"), *first, seed=2, prompt=["BACK", "SPIKE", "LARGE"],
                            bridge_ckpt=bridge_ckpt, gen3d_ckpt=trained["path"], cfg=trained["gen"].cfg)
    assert sorted(os.listdir(tmp_path / "out")) == ["run.json", "v_geo.k3vox", "v_ss.k3vox"]
    assert meta["seed"] == 2 and meta["taps"] == [1, 2]


def test_generator_checkpoint_without_metadata(tmp_path):
    from bridge3d.numerics.checkpoint import save_checkpoint
    path = str(tmp_path / "bad.k3ckpt")
    save_checkpoint(path, {}, {"kind": "gen3d"})
    with pytest.raises(FormatError):
        load_generator(path)
