"""Tap-time and feature-source ablations of the injected stage-1 generator.

Every arm of one seed fine-tunes from the same pretrained backbone and sees the
same data order; arms differ only in the ablated config field.
"""
from __future__ import annotations

import logging
import os
import time
import typing as t
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..analytics.evaluator import aggregate, evaluate_batch
from ..bridge.model import BridgeModel
from ..bridge.train import load_bridge
from ..config_store import RunConfig, from_dict, resolved_config, thread_count, with_updates
from ..data.dataset import Dataset, GenItem
from ..errors import ContractError
from ..fusion3d.generate import generate_batch
from ..fusion3d.train import Generator3D, build_feature_cache, item_key, train_3d
from .reports import ABLATION_COLUMNS, REFERENCE_VALUES, with_mean_rows, write_report

logger = logging.getLogger(__name__)

METRICS = ("iou", "chamfer", "back_region_iou")


@dataclass(frozen=True)
class Arm:
    """One grid point: its label and the config section updates that define it."""
    setting: str
    updates: dict[str, dict[str, t.Any]]


def timestep_arms(cfg: RunConfig) -> list[Arm]:
    return [Arm(setting=str(tt), updates={"bridge": {"tap_time": tt}, "gen3d": {"feature_source": "hidden_states"}})
            for tt in cfg.ablation.tap_times]


def feature_source_arms(cfg: RunConfig) -> list[Arm]:
    return [Arm(setting=src, updates={"gen3d": {"feature_source": src}}) for src in cfg.ablation.feature_sources]


def require_bridge(path: str | None) -> tuple[BridgeModel, RunConfig]:
    if not path or not os.path.isfile(path):
        raise ContractError(f"a trained bridge checkpoint is required, none at {path!r}")
    return load_bridge(path)


def eval_items(dataset: Dataset, cfg: RunConfig) -> list[GenItem]:
    """Held-out front views, limited to the first ``ablation.eval_assets`` assets when set."""
    items = dataset.gen3d_items(split="holdout")
    if cfg.ablation.eval_assets is not None:
        keep = set(dataset.asset_ids("holdout")[:cfg.ablation.eval_assets])
        items = [it for it in items if it.asset_id in keep]
    if not items:
        raise ContractError("no held-out front views to evaluate on")
    return items


def evaluate_generator(gen: Generator3D, dataset: Dataset, items: t.Sequence[GenItem],
                       features: t.Mapping[str, np.ndarray] | None, seed: int) -> pd.DataFrame:
    """Stage-1 predictions scored against max-pooled ground truth, one row per item."""
    keys = [item_key(it) for it in items]
    fronts = np.stack([it.front for it in items])
    feats = np.stack([features[k] for k in keys]) if gen.inject and features is not None else None
    v_ss, _ = generate_batch(gen, fronts, feats, seed, keys, fine=False)
    return evaluate_batch(list(v_ss), [dataset.grid(it.asset_id) for it in items],
                          [it.front_camera.azimuth for it in items], keys)


def _arm_config(cfg: RunConfig, arm: Arm, seed: int) -> RunConfig:
    return with_updates(cfg, **arm.updates, train={"seed": seed})


def run_seed(dataset_root: str, bridge_path: str, cfg_data: dict[str, t.Any], arms: t.Sequence[Arm],
             seed: int, out_dir: str, experiment: str) -> tuple[list[dict[str, t.Any]], dict[str, float]]:
    """All arms of one seed; module-level so it can run in a worker process."""
    cfg = from_dict(cfg_data)
    dataset = Dataset(dataset_root)
    bridge, _ = require_bridge(bridge_path)
    train_items = dataset.gen3d_items(split="train")
    test_items = eval_items(dataset, cfg)
    backbones: dict[str, dict[str, np.ndarray]] = {}
    cache_dir = os.path.join(out_dir, "features")
    mode = cfg.ablation.hidden_mode
    rows, timings = [], {}
    for arm in arms:
        started = time.perf_counter()
        arm_cfg = _arm_config(cfg, arm, seed)
        source = arm_cfg.gen3d.feature_source
        kw = dict(source=source, mode=mode, tap_time=arm_cfg.bridge.tap_time, seed=seed)
        train_feats = build_feature_cache(bridge, arm_cfg, dataset, train_items, cache_dir, **kw)
        gen = train_3d(dataset, arm_cfg, None, inject=True, features=train_feats, feature_source=source,
                       fine_stage=cfg.ablation.fine_stage, backbones=backbones, seed=seed, items=train_items)
        test_feats = build_feature_cache(bridge, arm_cfg, dataset, test_items, cache_dir, **kw)
        scores = aggregate(evaluate_generator(gen, dataset, test_items, test_feats, seed))
        rows.append({"experiment": experiment, "setting": arm.setting, "seed": seed, "source_tag": source,
                     "tap_time": arm_cfg.bridge.tap_time, "hidden_mode": mode, "n_eval": scores["items"],
                     **{m: scores[m] for m in METRICS}})
        timings[f"{arm.setting}/{seed}"] = time.perf_counter() - started
        logger.info("%s arm %s seed %d: iou %.4f back_region_iou %.4f", experiment, arm.setting, seed,
                    scores["iou"], scores["back_region_iou"])
    return rows, timings


def run_ablation(experiment: str, arms: t.Sequence[Arm], dataset: Dataset, cfg: RunConfig, bridge_path: str,
                 out_dir: str) -> pd.DataFrame:
    """Run every arm for every seed and write ``<experiment>.csv/json``; returns the report rows."""
    require_bridge(bridge_path)
    seeds = list(cfg.ablation.seeds)
    cfg_data = resolved_config(cfg)
    jobs = [(dataset.root, bridge_path, cfg_data, list(arms), s, out_dir, experiment) for s in seeds]
    workers = min(thread_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, *zip(*jobs)))
    else:
        results = [run_seed(*job) for job in jobs]
    rows = pd.DataFrame([r for part, _ in results for r in part], columns=ABLATION_COLUMNS)
    timings = {k: v for _, part in results for k, v in part.items()}
    report = with_mean_rows(rows, "setting", METRICS)
    meta = {
        "experiment": experiment,
        "seeds": seeds,
        "hidden_mode": cfg.ablation.hidden_mode,
        "arms": {a.setting: resolved_config(_arm_config(cfg, a, seeds[0])) for a in arms},
        "reference_values": REFERENCE_VALUES.get(experiment, {}),
        "reference_note": "large-scale published results; not a desk-scale target",
    }
    write_report(out_dir, experiment.replace("-", "_"), report, ABLATION_COLUMNS, cfg, meta, timings)
    if cfg.report.plot:
        _plot(rows, out_dir, experiment)
    return report


def ablate_timestep(dataset: Dataset, cfg: RunConfig, bridge_path: str, out_dir: str) -> pd.DataFrame:
    return run_ablation("timestep", timestep_arms(cfg), dataset, cfg, bridge_path, out_dir)


def ablate_feature_source(dataset: Dataset, cfg: RunConfig, bridge_path: str, out_dir: str) -> pd.DataFrame:
    return run_ablation("feature-source", feature_source_arms(cfg), dataset, cfg, bridge_path, out_dir)


def _plot(rows: pd.DataFrame, out_dir: str, experiment: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from ..analytics.plots import plot_ablation, save_figure
    for metric in METRICS:
        fig, ax = plt.subplots(figsize=(8, 5))
        plot_ablation(rows, metric, ax=ax)
        save_figure(ax, os.path.join(out_dir, f"{experiment}_{metric}.png"))
