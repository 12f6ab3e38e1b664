"""Front image + back prompt -> sparse structure and fine geometry."""
from __future__ import annotations

import json
import logging
import os
import typing as t

import numpy as np

from .. import __version__
from ..bridge.flow import euler_integrate
from ..bridge.hidden import ImageReencoder, extract_features
from ..bridge.model import BridgeModel
from ..bridge.prompt import make_prompt
from ..bridge.train import codec_for, load_bridge
from ..config_store import RunConfig, resolved_config
from ..data.formats import write_voxels
from ..errors import ContractError
from ..numerics.random import RandomStream
from ..numerics.tensor import paused
from .stage import GenStage
from .train import Generator3D, load_generator

logger = logging.getLogger(__name__)


def sample_stage(stage: GenStage, fronts: np.ndarray, noise: np.ndarray, steps: int,
                 features: np.ndarray | None = None, v_ss: np.ndarray | None = None) -> np.ndarray:
    """Euler-integrate one stage from ``noise`` [B, T, C]; returns binary grids [B, g, g, g]."""
    def field(x: np.ndarray, tk: float) -> np.ndarray:
        return stage(x, tk, fronts, features, v_ss).data

    with paused():
        tokens = euler_integrate(field, noise.astype(stage.dtype), steps)
    return np.stack([stage.decode(tok) for tok in tokens])


def stage_noise(stage: GenStage, seed: int, keys: t.Sequence[str]) -> np.ndarray:
    """Per-item starting noise, independent of how items are batched."""
    shape = (stage.dims.tokens, stage.dims.value_channels)
    return np.stack([RandomStream(seed).fork(f"{stage.dims.tag}-noise/{k}").normal(shape) for k in keys])


def generate_batch(gen: Generator3D, fronts: np.ndarray, features: np.ndarray | None, seed: int,
                   keys: t.Sequence[str], *, fine: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Stage 1 then (when trained and requested) stage 2 for a batch of front images."""
    if "sparse" not in gen.stages:
        raise ContractError("generator checkpoint has no sparse stage")
    steps = gen.cfg.gen3d.sample_steps
    feats = features if gen.inject else None
    sparse = gen.stages["sparse"]
    v_ss = sample_stage(sparse, fronts, stage_noise(sparse, seed, keys), steps, feats)
    v_geo = None
    if fine and "fine" in gen.stages:
        stage = gen.stages["fine"]
        v_geo = sample_stage(stage, fronts, stage_noise(stage, seed, keys), steps, feats, v_ss)
    return v_ss, v_geo


def conditioning_features(bridge: BridgeModel, cfg: RunConfig, gen: Generator3D, front: np.ndarray,
                          prompt: t.Sequence[str], seed: int) -> np.ndarray | None:
    """Trajectory-mode features of one front image under ``prompt``, in the generator's feature source."""
    if not gen.inject:
        return None
    codec = codec_for(cfg)
    z_front = codec.encode_tokens(front)[None]
    ids = make_prompt(prompt).ids()[None]
    eps = RandomStream(seed).fork("bridge-noise").normal(z_front.shape).astype(bridge.dtype)
    with paused():
        cond = bridge.encode_condition(z_front, ids)
        reencoder = ImageReencoder(codec, bridge.dims.d_model) if gen.feature_source == "reencoded_image" else None
        return extract_features(gen.feature_source, bridge, codec, z_front, cond, tap_layers=gen.cfg.bridge.taps,
                                tap_time=gen.cfg.bridge.tap_time, mode="trajectory", eps=eps,
                                steps=gen.cfg.bridge.sample_steps, reencoder=reencoder)


def generate_3d(bridge_ckpt: str, gen3d_ckpt: str, front_image: np.ndarray, prompt: t.Sequence[str],
                seed: int) -> tuple[np.ndarray, np.ndarray | None]:
    """(V_ss, V_geo) for one front image; ``prompt`` holds the back tokens only (may be empty)."""
    bridge, bridge_cfg = load_bridge(bridge_ckpt)
    return generate_with(bridge, bridge_cfg, load_generator(gen3d_ckpt), front_image, prompt, seed)


def generate_with(bridge: BridgeModel, bridge_cfg: RunConfig, gen: Generator3D, front_image: np.ndarray,
                  prompt: t.Sequence[str], seed: int) -> tuple[np.ndarray, np.ndarray | None]:
    """``generate_3d`` over models that are already loaded."""
    features = conditioning_features(bridge, bridge_cfg, gen, front_image, prompt, seed)
    v_ss, v_geo = generate_batch(gen, np.asarray(front_image)[None], features, seed, ["sample"])
    return v_ss[0], (v_geo[0] if v_geo is not None else None)


def write_generation(out_dir: str, v_ss: np.ndarray, v_geo: np.ndarray | None, *, seed: int,
                     prompt: t.Sequence[str], bridge_ckpt: str, gen3d_ckpt: str, cfg: RunConfig) -> dict[str, t.Any]:
    os.makedirs(out_dir, exist_ok=True)
    write_voxels(os.path.join(out_dir, "v_ss.k3vox"), v_ss)
    if v_geo is not None:
        write_voxels(os.path.join(out_dir, "v_geo.k3vox"), v_geo)
    meta = {
        "version": __version__,
        "seed": seed,
        "prompt": list(prompt),
        "bridge_checkpoint": os.path.abspath(bridge_ckpt),
        "gen3d_checkpoint": os.path.abspath(gen3d_ckpt),
        "taps": list(cfg.bridge.taps),
        "tap_time": cfg.bridge.tap_time,
        "bridge_steps": cfg.bridge.sample_steps,
        "gen3d_steps": cfg.gen3d.sample_steps,
        "occupied": {"v_ss": int(v_ss.sum()), "v_geo": int(v_geo.sum()) if v_geo is not None else None},
        "config": resolved_config(cfg),
    }
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    logger.info("sample: wrote %s (%d sparse voxels)", out_dir, meta["occupied"]["v_ss"])
    return meta
