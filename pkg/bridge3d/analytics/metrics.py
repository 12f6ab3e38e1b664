"""Voxel and image metrics: IoU, Chamfer distance, rear-region IoU, PSNR."""
from __future__ import annotations

import math
import typing as t

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import ContractError, DimensionError

CHAMFER_CONVENTION = "mean squared nearest-neighbour distance, summed over both directions, unit-cube coordinates"
IOU_CONVENTION = "|a & b| / |a | b|; 1 when both grids are empty"
PSNR_SENTINEL = 99.0

CONVENTIONS = {
    "iou": IOU_CONVENTION,
    "back_region_iou": "iou restricted to voxels behind the grid centre along the front view direction; " + IOU_CONVENTION,
    "chamfer": CHAMFER_CONVENTION,
    "psnr": f"10 log10(1 / mse) on [0, 1] images; {PSNR_SENTINEL} when mse = 0",
}


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"grid extents differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def occupancy_to_points(grid: np.ndarray) -> np.ndarray:
    """Centres of occupied voxels, normalized by the grid extent: [N, 3] in [0, 1]³."""
    grid = np.asarray(grid, dtype=bool)
    return (np.argwhere(grid) + 0.5) / np.asarray(grid.shape, dtype=np.float64)


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric sum of mean squared nearest-neighbour distances (exact, brute force)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        raise ContractError(f"chamfer needs two nonempty point sets, got {len(p)} and {len(q)} points")
    d = cdist(p, q, metric="sqeuclidean")
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def grid_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    return chamfer(occupancy_to_points(a), occupancy_to_points(b))


def rear_mask(extent: int, front_azimuth: float) -> np.ndarray:
    """Voxels whose centre lies strictly behind the grid centre, seen from ``front_azimuth``."""
    a = math.radians(front_azimuth)
    forward = np.array([-math.sin(a), 0.0, math.cos(a)])
    centres = np.indices((extent,) * 3).transpose(1, 2, 3, 0) + 0.5 - extent / 2.0
    return centres @ forward > 1e-9


def back_region_iou(pred: np.ndarray, gt: np.ndarray, front_azimuth: float) -> float:
    pred, gt = _pair(pred, gt)
    mask = rear_mask(gt.shape[0], front_azimuth)
    return iou(pred & mask, gt & mask)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def voxel_scores(pred: np.ndarray, gt: np.ndarray, front_azimuth: float) -> dict[str, float]:
    """IoU, Chamfer and rear-region IoU of one prediction; Chamfer is NaN when either grid is empty."""
    pred, gt = _pair(pred, gt)
    cd = grid_chamfer(pred, gt) if pred.any() and gt.any() else float("nan")
    return {"iou": iou(pred, gt), "chamfer": cd, "back_region_iou": back_region_iou(pred, gt, front_azimuth)}


def metric_record(metric: str, value: float, inputs: t.Mapping[str, t.Any] | None = None) -> dict[str, t.Any]:
    if metric not in CONVENTIONS:
        raise ContractError(f"unknown metric {metric!r}")
    return {"metric": metric, "value": value, "convention": CONVENTIONS[metric], "inputs": dict(inputs or {})}
