from __future__ import annotations

import os

import numpy as np
import pytest

from bridge3d.config_store import RunConfig, from_dict, resolved_config


def tiny_config_data() -> dict:
    """Smallest configuration that still exercises every stage end to end."""
    return {
        "dataset": {"n_assets": 6, "grid": 32, "image_size": 16, "holdout_fraction": 0.34},
        "codec": {"patch": 4},
        "bridge": {"d_model": 8, "layers": 2, "heads": 2, "encoder_layers": 1, "taps": [1, 2],
                   "tap_time": 0.25, "sample_steps": 4},
        "gen3d": {"d_model": 8, "layers": 2, "heads": 2, "lora_rank": 2, "sparse_grid": 4,
                  "fine_grid": 8, "fine_patch": 2, "sample_steps": 3},
        "train": {"lr": 1e-3, "batch": 4, "bridge_steps": 3, "pretrain_steps": 2, "finetune_steps": 2, "fine_steps": 2,
                  "log_every": 1, "checkpoint_every": 0},
        "ablation": {"seeds": [0], "eval_assets": 1},
    }


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return from_dict(tiny_config_data())


@pytest.fixture(scope="session")
def session_cfg() -> RunConfig:
    return from_dict(tiny_config_data())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, session_cfg):
    from bridge3d.data.dataset import Dataset, build_dataset
    root = tmp_path_factory.mktemp("data") / "ds"
    build_dataset(session_cfg.dataset, 7, str(root))
    return Dataset(str(root))


@pytest.fixture(scope="session")
def bridge_ckpt(tmp_path_factory, tiny_dataset, session_cfg) -> str:
    from bridge3d.bridge.train import train_bridge
    path = tmp_path_factory.mktemp("bridge") / "bridge.k3ckpt"
    return train_bridge(tiny_dataset, session_cfg, str(path))


@pytest.fixture
def rng_np() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def config_file(tmp_path, tiny_cfg) -> str:
    import json
    path = os.path.join(tmp_path, "run_config.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved_config(tiny_cfg), f)
    return path
