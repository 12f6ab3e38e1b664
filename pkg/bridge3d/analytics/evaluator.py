import glob
import json
import os
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from ..bridge.hidden import euler_sample
from ..bridge.model import BridgeModel
from ..bridge.prompt import make_prompt
from ..bridge.train import codec_for
from ..config_store import RunConfig
from ..data.dataset import Dataset
from ..data.formats import read_voxels
from ..errors import ContractError
from ..fusion3d.voxel_latent import downsample_to
from ..numerics.random import RandomStream
from ..numerics.tensor import paused
from .metrics import psnr, voxel_scores

VOXEL_COLUMNS = ["item", "front_azimuth", "iou", "chamfer", "back_region_iou"]
AZIMUTHS_FILE = "azimuths.json"


def evaluate_batch(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], azimuths: Sequence[float],
                   items: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Per-item voxel scores; ground truth is max-pooled down to the prediction's extent when larger."""
    if not (len(preds) == len(gts) == len(azimuths)):
        raise ContractError(f"evaluate_batch: {len(preds)} predictions, {len(gts)} targets, {len(azimuths)} azimuths")
    items = list(items) if items is not None else [str(i) for i in range(len(preds))]
    rows = []
    for name, pred, gt, az in zip(items, preds, gts, azimuths):
        pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
        if gt.shape[0] > pred.shape[0]:
            gt = downsample_to(gt, pred.shape[0])
        rows.append({"item": name, "front_azimuth": float(az), **voxel_scores(pred, gt, az)})
    return pd.DataFrame(rows, columns=VOXEL_COLUMNS)


def aggregate(df: pd.DataFrame, columns: Sequence[str] = ("iou", "chamfer", "back_region_iou")) -> Dict[str, Any]:
    """Mean of each column over items (NaN Chamfer entries from empty grids are skipped)."""
    out: Dict[str, Any] = {"items": int(len(df))}
    for col in columns:
        value = df[col].mean() if len(df) else float("nan")
        out[col] = None if pd.isna(value) else float(value)
    return out


def evaluate_dirs(pred_dir: str, gt_dir: str) -> Dict[str, Any]:
    """Score every ``*.k3vox`` in ``pred_dir`` against the same-named file in ``gt_dir``.

    Front azimuths come from an optional ``azimuths.json`` (file name -> degrees) in
    ``pred_dir``; items without an entry use the canonical front (0).
    """
    names = sorted(os.path.basename(p) for p in glob.glob(os.path.join(pred_dir, "*.k3vox")))
    if not names:
        raise ContractError(f"no .k3vox predictions in {pred_dir}")
    missing = [n for n in names if not os.path.isfile(os.path.join(gt_dir, n))]
    if missing:
        raise ContractError(f"ground truth missing for: {', '.join(missing)}")
    az_path = os.path.join(pred_dir, AZIMUTHS_FILE)
    azimuths: Mapping[str, float] = {}
    if os.path.exists(az_path):
        with open(az_path, "r", encoding="utf-8") as f:
            azimuths = json.load(f)
    df = evaluate_batch(
        [read_voxels(os.path.join(pred_dir, n)) for n in names],
        [read_voxels(os.path.join(gt_dir, n)) for n in names],
        [float(azimuths.get(n, 0.0)) for n in names],
        names,
    )
    return {"items": _records(df), "aggregate": aggregate(df)}


def evaluate_bridge(model: BridgeModel, cfg: RunConfig, dataset: Dataset, *, split: str = "holdout",
                    seed: int = 0, limit: Optional[int] = None) -> pd.DataFrame:
    """Back-view PSNR of sampled bridge outputs on clean pairs, with and without the true prompt."""
    codec = codec_for(cfg)
    pairs = dataset.pairs("clean", split)[:limit]
    if not pairs:
        raise ContractError(f"no clean pairs in split {split!r}")
    rows: List[Dict[str, Any]] = []
    for p in pairs:
        z_front = codec.encode_tokens(dataset.image(p["front"]))[None]
        truth = dataset.image(p["back"])
        description = list(dataset.annotation(p["asset_id"]).descriptions[0])
        eps = RandomStream(seed).fork(f"bridge-eval/{p['id']}").normal(z_front.shape).astype(model.dtype)
        row: Dict[str, Any] = {"pair": p["id"], "asset_id": p["asset_id"]}
        for label, prompt in (("psnr_prompt", description), ("psnr_view_only", [])):
            with paused():
                cond = model.encode_condition(z_front, make_prompt(prompt).ids()[None])
                z = euler_sample(model, z_front, cond, cfg.bridge.sample_steps, eps)
            image = np.clip(codec.decode(z[0]), 0.0, 1.0)
            row[label] = psnr(image, truth)
        rows.append(row)
    return pd.DataFrame(rows, columns=["pair", "asset_id", "psnr_prompt", "psnr_view_only"])


def _records(df: pd.DataFrame) -> List[Dict[str, Any]]:
    return [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()}
            for row in df.to_dict(orient="records")]
