"""Bridge training loop and checkpoint I/O."""
from __future__ import annotations

import logging
import os
import typing as t
from dataclasses import dataclass

import numpy as np

from ..codec import PatchCodec
from ..config_store import RunConfig, from_dict, resolved_config
from ..data.annotate import Annotation
from ..data.dataset import Dataset
from ..errors import ContractError, NumericError
from ..logs import LossLog
from ..numerics import ops
from ..numerics.checkpoint import expect_kind, load_checkpoint, module_state, save_module
from ..numerics.optim import AdamState, adam_step
from ..numerics.random import RandomStream
from ..numerics.tensor import Tape, backward
from .flow import cfm_interpolate, cfm_loss
from .model import BridgeModel
from .prompt import sample_prompt

logger = logging.getLogger(__name__)


@dataclass
class LatentPairs:
    """Encoded front/back latents of a set of pairs with each pair's annotation."""
    ids: list[str]
    front: np.ndarray           # [N, T, C]
    back: np.ndarray            # [N, T, C]
    annotations: list[Annotation]

    def __len__(self) -> int:
        return len(self.ids)


def codec_for(cfg: RunConfig) -> PatchCodec:
    return PatchCodec(cfg.codec.patch, channels=2, seed=cfg.codec.seed)


def encode_pairs(dataset: Dataset, codec: PatchCodec, pairs: t.Sequence[t.Mapping[str, t.Any]]) -> LatentPairs:
    if not pairs:
        raise ContractError("no view pairs to encode")
    front = np.stack([codec.encode_tokens(dataset.image(p["front"])) for p in pairs])
    back = np.stack([codec.encode_tokens(dataset.image(p["back"])) for p in pairs])
    return LatentPairs(ids=[p["id"] for p in pairs], front=front, back=back,
                       annotations=[dataset.annotation(p["asset_id"]) for p in pairs])


def training_pairs(dataset: Dataset, pair_ids: t.Sequence[str] | None = None) -> list[dict[str, t.Any]]:
    pairs = dataset.pairs(set_name=None, split="train")
    if pair_ids is not None:
        wanted = set(pair_ids)
        pairs = [p for p in dataset.manifest["pairs"] if p["id"] in wanted]
        missing = wanted - {p["id"] for p in pairs}
        if missing:
            raise ContractError(f"unknown pair ids: {sorted(missing)[:5]}")
    return pairs


def bridge_step_loss(model: BridgeModel, data: LatentPairs, rng: RandomStream, batch: int, prompt_prob: float):
    """One minibatch of the flow-matching objective; items are grouped by prompt length."""
    idx = rng.integers(len(data), size=batch)
    prompts = [sample_prompt(data.annotations[i], rng, prompt_prob) for i in idx]
    eps = rng.normal((batch,) + data.back.shape[1:]).astype(model.dtype)
    tv = rng.uniform(batch)
    groups: dict[int, list[int]] = {}
    for j, prompt in enumerate(prompts):
        groups.setdefault(len(prompt), []).append(j)
    total = None
    for length in sorted(groups):
        rows = np.asarray(groups[length])
        items = idx[rows]
        z0 = data.back[items].astype(model.dtype)
        ids = np.stack([prompts[j].ids() for j in rows])
        cond = model.encode_condition(data.front[items], ids)
        z_t = cfm_interpolate(z0, eps[rows], tv[rows])
        v, _ = model.forward(z_t, tv[rows], cond, data.front[items])
        part = ops.scale(cfm_loss(v, eps[rows], z0), len(rows) / batch)
        total = part if total is None else ops.add(total, part)
    return total


def train_bridge(dataset: Dataset, cfg: RunConfig, out_path: str, *, pair_ids: t.Sequence[str] | None = None,
                 log_path: str | None = None) -> str:
    """Train the bridge from scratch with Adam on the flow-matching loss; returns the checkpoint path."""
    codec = codec_for(cfg)
    data = encode_pairs(dataset, codec, training_pairs(dataset, pair_ids))
    model = BridgeModel.from_config(cfg)
    params = model.trainable()
    state = AdamState(lr=cfg.train.lr)
    rng = RandomStream(cfg.train.seed).fork("bridge-train")
    log = LossLog(log_path or os.path.join(os.path.dirname(os.path.abspath(out_path)), "loss_log.jsonl"))
    steps = cfg.train.bridge_steps
    logger.info("bridge: %d pairs, %d parameters, %d steps", len(data),
                sum(p.data.size for p in params), steps)

    for step in range(1, steps + 1):
        with Tape() as tape:
            loss = bridge_step_loss(model, data, rng, cfg.train.batch, cfg.bridge.prompt_prob)
        grads = backward(tape, loss)
        value, gnorm = loss.item(), grads.norm()
        if not (np.isfinite(value) and np.isfinite(gnorm)):
            raise NumericError(f"bridge training diverged at step {step}: loss={value} "
                               f"lr={state.lr} grad_norm={gnorm}")
        adam_step(params, grads, state)
        log.write(step=step, loss=value, grad_norm=gnorm, lr=state.lr, phase="bridge")
        if step % cfg.train.log_every == 0 or step == steps:
            logger.info("bridge step %d/%d loss %.5f grad_norm %.4f", step, steps, value, gnorm)
        if cfg.train.checkpoint_every and step % cfg.train.checkpoint_every == 0 and step < steps:
            save_bridge(out_path, model, cfg, step)
    save_bridge(out_path, model, cfg, steps)
    return out_path


def save_bridge(path: str, model: BridgeModel, cfg: RunConfig, step: int) -> None:
    save_module(path, model, {"kind": "bridge", "step": step, "config": resolved_config(cfg)})


def load_bridge(path: str) -> tuple[BridgeModel, RunConfig]:
    entries, meta = load_checkpoint(path)
    expect_kind(meta, "bridge", path)
    cfg = from_dict(meta["config"])
    model = BridgeModel.from_config(cfg)
    model.load_state_dict(module_state(entries))
    return model, cfg
