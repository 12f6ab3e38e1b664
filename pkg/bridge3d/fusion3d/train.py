"""Two-stage voxel generator training: backbone pretraining, then LoRA + injection fine-tuning."""
from __future__ import annotations

import logging
import os
import typing as t
from dataclasses import dataclass, field

import numpy as np

from ..bridge.flow import cfm_interpolate, cfm_target
from ..bridge.hidden import (
    HiddenStateBundle, ImageReencoder, extract_features, feature_width, read_bundle, write_bundle,
)
from ..bridge.model import BridgeModel
from ..bridge.prompt import make_prompt
from ..bridge.train import codec_for
from ..config_store import RunConfig, from_dict, resolved_config
from ..data.dataset import Dataset, GenItem
from ..errors import ContractError, FormatError, NumericError
from ..logs import LossLog
from ..numerics import ops
from ..numerics.checkpoint import expect_kind, load_checkpoint, module_state, save_module
from ..numerics.layers import Module
from ..numerics.optim import AdamState, adam_step
from ..numerics.random import RandomStream
from ..numerics.tensor import Tape, Tensor, backward
from .layers import attach_lora
from .stage import GenStage, StageDims
from .voxel_latent import downsample_to

logger = logging.getLogger(__name__)

FEATURE_BATCH = 16


def loss_3d(v_pred: Tensor, eps: np.ndarray, x0: np.ndarray) -> Tensor:
    """Mean over all elements of (v_pred - (eps - x0))²."""
    return ops.mse(v_pred, cfm_target(x0, eps).astype(v_pred.dtype))


@dataclass
class StageData:
    keys: list[str]
    fronts: np.ndarray                 # [N, 2, H, W]
    x0: np.ndarray                     # [N, T, C]
    v_ss: np.ndarray | None = None     # [N, g, g, g] ground-truth sparse structure
    features: np.ndarray | None = None  # [N, T_f, width]

    def __len__(self) -> int:
        return len(self.keys)


def item_key(item: GenItem) -> str:
    return f"{item.asset_id}/{item.index}"


def stage_data(stage: GenStage, dataset: Dataset, items: t.Sequence[GenItem],
               features: t.Mapping[str, np.ndarray] | None = None) -> StageData:
    if not items:
        raise ContractError("no 3D training items (check split and front cone)")
    keys = [item_key(it) for it in items]
    grids = [dataset.grid(it.asset_id) for it in items]
    feats = None
    if features is not None:
        missing = [k for k in keys if k not in features]
        if missing:
            raise ContractError(f"conditioning cache is missing {len(missing)} item(s), e.g. {missing[:3]}")
        feats = np.stack([features[k] for k in keys]).astype(stage.dtype)
    v_ss = None
    if stage.dims.tag == "fine":
        v_ss = np.stack([downsample_to(g, stage.dims.sparse_grid) for g in grids])
    return StageData(keys=keys, fronts=np.stack([it.front for it in items]),
                     x0=np.stack([stage.targets(g) for g in grids]).astype(stage.dtype), v_ss=v_ss, features=feats)


def stage_loss(stage: GenStage, data: StageData, rng: RandomStream, batch: int, inject: bool) -> Tensor:
    idx = rng.integers(len(data), size=batch)
    tau = rng.uniform(batch)
    eps = rng.normal((batch,) + data.x0.shape[1:]).astype(stage.dtype)
    x0 = data.x0[idx]
    x_tau = cfm_interpolate(x0, eps, tau)
    features = data.features[idx] if inject and data.features is not None else None
    v_ss = data.v_ss[idx] if data.v_ss is not None else None
    v = stage(x_tau, tau, data.fronts[idx], features, v_ss)
    return loss_3d(v, eps, x0)


def fit_stage(stage: GenStage, data: StageData, params: t.Sequence[Tensor], cfg: RunConfig, steps: int,
              rng: RandomStream, log: LossLog, phase: str, inject: bool) -> list[float]:
    state = AdamState(lr=cfg.train.lr)
    losses = []
    for step in range(1, steps + 1):
        with Tape() as tape:
            loss = stage_loss(stage, data, rng, cfg.train.batch, inject)
        grads = backward(tape, loss)
        value, gnorm = loss.item(), grads.norm()
        if not (np.isfinite(value) and np.isfinite(gnorm)):
            raise NumericError(f"{phase} diverged at step {step}: loss={value} lr={state.lr} grad_norm={gnorm}")
        for p in params:
            if p not in grads:
                grads[p] = np.zeros_like(p.data)
        adam_step(params, grads, state)
        losses.append(value)
        log.write(step=step, loss=value, grad_norm=gnorm, lr=state.lr, phase=phase)
        if step % cfg.train.log_every == 0 or step == steps:
            logger.info("%s step %d/%d loss %.5f grad_norm %.4f", phase, step, steps, value, gnorm)
    return losses


@dataclass
class Generator3D:
    cfg: RunConfig
    inject: bool
    feature_source: str
    d_feature: int | None
    stages: dict[str, GenStage] = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)

    def parameter_group(self, name: str) -> str:
        if ".lora." in name:
            return "lora"
        if ".injection." in name:
            return "injection"
        return "backbone"


class _Stages(Module):
    def __init__(self, stages: t.Mapping[str, GenStage]):
        for tag, stage in stages.items():
            setattr(self, tag, stage)


def build_stage(cfg: RunConfig, tag: str, d_feature: int | None, seed: int) -> GenStage:
    dims = StageDims.from_config(cfg, tag, d_feature)
    return GenStage(dims, RandomStream(seed).fork(f"{tag}-init"), np.dtype(cfg.train.dtype))


def pretrain_backbone(cfg: RunConfig, dataset: Dataset, tag: str, seed: int, log: LossLog | None = None,
                      items: t.Sequence[GenItem] | None = None) -> dict[str, np.ndarray]:
    """Backbone-only training without injection; the state is shared by every arm of a seed."""
    stage = build_stage(cfg, tag, None, seed)
    items = items if items is not None else dataset.gen3d_items(split="train")
    data = stage_data(stage, dataset, items)
    steps = cfg.train.pretrain_steps if tag == "sparse" else cfg.train.fine_steps
    fit_stage(stage, data, stage.parameters(), cfg, steps, RandomStream(seed).fork(f"{tag}-pretrain"),
              log or LossLog(None), f"{tag}/pretrain", inject=False)
    return stage.state_dict()


def finetune_stage(cfg: RunConfig, dataset: Dataset, tag: str, backbone: t.Mapping[str, np.ndarray],
                   features: t.Mapping[str, np.ndarray] | None, seed: int, log: LossLog | None = None,
                   items: t.Sequence[GenItem] | None = None) -> tuple[GenStage, list[float]]:
    """Freeze the pretrained backbone, attach LoRA, and train LoRA (plus injection when ``features`` is given)."""
    inject = features is not None
    if inject and not features:
        raise ContractError("conditioning cache is empty")
    d_feature = int(next(iter(features.values())).shape[-1]) if inject else None
    stage = build_stage(cfg, tag, d_feature, seed)
    state = dict(backbone)
    for name, p in stage.named_parameters():
        if ".injection." in f".{name}":
            state.setdefault(name, p.data)
    stage.load_state_dict(state)
    stage.set_trainable(False)
    lora = attach_lora(stage, cfg.gen3d.lora_rank, cfg.gen3d.alpha, RandomStream(seed).fork(f"{tag}-lora"))
    params = [p for a in lora for p in a.parameters()]
    for a in stage.injection_adapters():
        a.set_trainable(True)
        params += a.parameters()
    items = items if items is not None else dataset.gen3d_items(split="train")
    data = stage_data(stage, dataset, items, features)
    losses = fit_stage(stage, data, params, cfg, cfg.train.finetune_steps,
                       RandomStream(seed).fork(f"{tag}-finetune"), log or LossLog(None),
                       f"{tag}/finetune", inject=inject)
    return stage, losses


def train_3d(dataset: Dataset, cfg: RunConfig, out_path: str | None, *, inject: bool | None = None,
             features: t.Mapping[str, np.ndarray] | None = None, feature_source: str | None = None,
             fine_stage: bool = True, backbones: t.MutableMapping[str, dict[str, np.ndarray]] | None = None,
             seed: int | None = None, items: t.Sequence[GenItem] | None = None) -> Generator3D:
    """Train stage 1 (and optionally stage 2); writes one checkpoint holding both when ``out_path`` is set.

    ``backbones`` maps stage tag to a pretrained state; missing tags are pretrained and stored back
    into the mapping so later arms reuse them.
    """
    seed = cfg.train.seed if seed is None else seed
    inject = cfg.gen3d.inject if inject is None else inject
    if inject and features is None:
        raise ContractError("train_3d with injection needs the conditioning cache")
    log = LossLog(os.path.join(os.path.dirname(os.path.abspath(out_path)), "loss_log.jsonl") if out_path else None)
    gen = Generator3D(cfg=cfg, inject=inject, feature_source=feature_source or cfg.gen3d.feature_source,
                      d_feature=None)
    backbones = backbones if backbones is not None else {}
    for tag in ("sparse", "fine") if fine_stage else ("sparse",):
        if tag not in backbones:
            backbones[tag] = pretrain_backbone(cfg, dataset, tag, seed, log, items)
        stage, losses = finetune_stage(cfg, dataset, tag, backbones[tag], features if inject else None,
                                       seed, log, items)
        gen.stages[tag] = stage
        gen.losses[tag] = losses
        gen.d_feature = stage.dims.d_feature
    if out_path:
        save_generator(out_path, gen)
    return gen


def save_generator(path: str, gen: Generator3D) -> None:
    meta = {"kind": "gen3d", "config": resolved_config(gen.cfg), "inject": gen.inject,
            "feature_source": gen.feature_source, "d_feature": gen.d_feature,
            "stages": sorted(gen.stages)}
    save_module(path, _Stages(gen.stages), meta, gen.parameter_group)


def load_generator(path: str) -> Generator3D:
    entries, meta = load_checkpoint(path)
    expect_kind(meta, "gen3d", path)
    try:
        cfg = from_dict(meta["config"])
        gen = Generator3D(cfg=cfg, inject=bool(meta["inject"]), feature_source=meta["feature_source"],
                          d_feature=meta["d_feature"])
        tags = list(meta["stages"])
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint metadata lacks {exc.args[0]!r}") from None
    for tag in tags:
        stage = build_stage(cfg, tag, gen.d_feature, cfg.train.seed)
        attach_lora(stage, cfg.gen3d.lora_rank, cfg.gen3d.alpha, RandomStream(cfg.train.seed).fork(f"{tag}-lora"))
        gen.stages[tag] = stage
    _Stages(gen.stages).load_state_dict(module_state(entries))
    return gen


# conditioning features from the bridge

def item_prompt(dataset: Dataset, asset_id: str) -> list[str]:
    """The most specific true back description of an asset."""
    return list(dataset.annotation(asset_id).descriptions[0])


def compute_features(bridge: BridgeModel, cfg: RunConfig, items: t.Sequence[GenItem],
                     prompts: t.Sequence[t.Sequence[str]], *, source: str, mode: str, tap_time: float,
                     seed: int) -> dict[str, np.ndarray]:
    """Features for each item, batched over items whose prompts share a length."""
    codec = codec_for(cfg)
    reencoder = ImageReencoder(codec, bridge.dims.d_model) if source == "reencoded_image" else None
    out: dict[str, np.ndarray] = {}
    groups: dict[int, list[int]] = {}
    for i, prompt in enumerate(prompts):
        groups.setdefault(len(make_prompt(prompt)), []).append(i)
    for length in sorted(groups):
        rows = groups[length]
        for start in range(0, len(rows), FEATURE_BATCH):
            chunk = rows[start:start + FEATURE_BATCH]
            z_front = np.stack([codec.encode_tokens(items[i].front) for i in chunk])
            z_back = np.stack([codec.encode_tokens(items[i].back) for i in chunk])
            ids = np.stack([make_prompt(prompts[i]).ids() for i in chunk])
            eps = np.stack([RandomStream(seed).fork(f"features/{item_key(items[i])}").normal(z_front.shape[1:])
                            for i in chunk]).astype(bridge.dtype)
            cond = bridge.encode_condition(z_front, ids)
            feats = extract_features(source, bridge, codec, z_front, cond, tap_layers=cfg.bridge.taps,
                                     tap_time=tap_time, mode=mode, eps=eps, steps=cfg.bridge.sample_steps,
                                     z_back=z_back, reencoder=reencoder)
            for row, i in enumerate(chunk):
                out[item_key(items[i])] = feats[row]
    return out


def build_feature_cache(bridge: BridgeModel, cfg: RunConfig, dataset: Dataset, items: t.Sequence[GenItem],
                        cache_dir: str | None = None, *, source: str | None = None, mode: str | None = None,
                        tap_time: float | None = None, seed: int | None = None) -> dict[str, np.ndarray]:
    """True-prompt conditioning features for ``items``, read from / written to K3HID files when cached."""
    source = source or cfg.gen3d.feature_source
    mode = mode or cfg.bridge.hidden_mode
    tap_time = cfg.bridge.tap_time if tap_time is None else tap_time
    seed = cfg.train.seed if seed is None else seed
    taps = tuple(cfg.bridge.taps) if source == "hidden_states" else ()
    out: dict[str, np.ndarray] = {}
    todo = []
    for item in items:
        key = item_key(item)
        path = _cache_path(cache_dir, key, source, mode, tap_time, seed) if cache_dir else None
        if path and os.path.exists(path):
            bundle = read_bundle(path)
            if (bundle.tap_layers, bundle.mode, bundle.source_tag) == (taps, mode, source):
                out[key] = bundle.h
                continue
        todo.append(item)
    if todo:
        fresh = compute_features(bridge, cfg, todo, [item_prompt(dataset, it.asset_id) for it in todo],
                                 source=source, mode=mode, tap_time=tap_time, seed=seed)
        for key, h in fresh.items():
            out[key] = h
            if cache_dir:
                write_bundle(_cache_path(cache_dir, key, source, mode, tap_time, seed),
                             HiddenStateBundle(h=h, tap_layers=taps, tap_time=tap_time, mode=mode,
                                               source_tag=source, pair_id=key))
        logger.info("features: computed %d, cached %d (%s, %s, t=%.2f)",
                    len(todo), len(items) - len(todo), source, mode, tap_time)
    return out


def _cache_path(cache_dir: str, key: str, source: str, mode: str, tap_time: float, seed: int) -> str:
    return os.path.join(cache_dir, f"{source}-{mode}-t{tap_time:.4f}-s{seed}", key.replace("/", "_") + ".k3hid")


def expected_feature_width(cfg: RunConfig, source: str) -> int:
    return feature_width(source, cfg.bridge.d_model, len(cfg.bridge.taps), 2 * cfg.codec.patch ** 2)
