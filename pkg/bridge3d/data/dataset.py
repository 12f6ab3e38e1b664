"""Dataset building (assets, rendered pairs, annotations, manifest) and loading."""
from __future__ import annotations

import json
import logging
import os
import shutil
import typing as t
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..config_store import DatasetConfig, thread_count
from ..errors import ContractError, FormatError
from ..numerics.random import RandomStream
from .annotate import VOCAB, Annotation, annotate
from .formats import read_image, read_voxels, write_image, write_voxels
from .pairs import Rig, ViewPair, build_pairs, build_perturbed_pairs, front_azimuths, in_front_cone, sample_rig
from .render import Camera, render_ortho
from .voxels import make_asset

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


def asset_seed(master_seed: int, index: int) -> int:
    return RandomStream(master_seed).fork(index).seed


def _camera(d: t.Mapping[str, float]) -> Camera:
    return Camera(float(d["azimuth"]), float(d["elevation"]), float(d["scale"]))


def _pair_record(pair: ViewPair, set_name: str, root: str | None) -> dict[str, t.Any]:
    rec: dict[str, t.Any] = {
        "id": pair.pair_id,
        "asset_id": pair.asset_id,
        "set": set_name,
        "front_camera": pair.front_camera.to_dict(),
        "back_camera": pair.back_camera.to_dict(),
    }
    if root is not None:
        stem = pair.pair_id.replace("/", "_")
        rec["front"] = f"images/{stem}_front.k3img"
        rec["back"] = f"images/{stem}_back.k3img"
        write_image(os.path.join(root, rec["front"]), pair.front)
        write_image(os.path.join(root, rec["back"]), pair.back)
    return rec


def _build_asset(job: tuple[int, int, dict[str, t.Any], str, int]) -> tuple[dict[str, t.Any], list[dict[str, t.Any]]]:
    index, seed, cfg_data, root, n_holdout = job
    cfg = DatasetConfig(**cfg_data)
    asset_id = f"a{index:05d}"
    asset = make_asset(seed, "random", grid=cfg.grid, classes=cfg.classes)
    rng = RandomStream(seed)
    rig = sample_rig(rng.fork("rig"), cfg.scales, tuple(cfg.elevation_range))
    kw = dict(asset_id=asset_id, size=cfg.image_size, step=cfg.render_step, rig=rig)
    clean = build_pairs(asset, rng.fork("clean"), cfg.spacing_deg, **kw)
    perturbed = build_perturbed_pairs(asset, rng.fork("gen3d"), cfg.gen3d_spacing_deg,
                                      scale_jitter=cfg.perturb_scale, angle_jitter_deg=cfg.perturb_angle_deg, **kw)
    gen3d_fronts = front_azimuths(rng.fork("gen3d"), cfg.gen3d_spacing_deg)

    voxel_path = f"assets/{asset_id}.k3vox"
    write_voxels(os.path.join(root, voxel_path), asset.grid)
    record = {
        "id": asset_id,
        "seed": seed,
        "back_component": asset.back_component,
        "size_variant": asset.size_variant,
        "front_decoration": asset.front_decoration,
        "voxels": voxel_path,
        "rig": {"elevation": rig.elevation, "scale": rig.scale},
        "annotation": annotate(asset).token_ids(),
        "split": "holdout" if index >= cfg.n_assets - n_holdout else "train",
        "gen3d_pairs": [
            {"front_camera": Camera(az, rig.elevation, rig.scale).to_dict(),
             "back_camera": Camera(az, rig.elevation, rig.scale).opposite().to_dict()}
            for az in gen3d_fronts
        ],
    }
    pairs = [_pair_record(p, "clean", root) for p in clean]
    pairs += [_pair_record(p, "perturbed", root) for p in perturbed]
    return record, pairs


def build_dataset(cfg: DatasetConfig, seed: int, out_dir: str) -> dict[str, t.Any]:
    """Write assets, images and ``manifest.json`` under ``out_dir``; returns the manifest.

    Output is assembled in a sibling temp directory and renamed into place; on
    failure the partial output is removed.
    """
    out_dir = os.path.abspath(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not os.path.exists(os.path.join(out_dir, MANIFEST)):
        raise ContractError(f"refusing to overwrite non-dataset directory {out_dir}")
    tmp = f"{out_dir}.partial"
    shutil.rmtree(tmp, ignore_errors=True)
    n_holdout = int(round(cfg.n_assets * cfg.holdout_fraction))
    jobs = [(i, asset_seed(seed, i), cfg.model_dump(mode="json"), tmp, n_holdout) for i in range(cfg.n_assets)]
    try:
        os.makedirs(os.path.join(tmp, "assets"))
        os.makedirs(os.path.join(tmp, "images"))
        workers = thread_count()
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_build_asset, jobs, chunksize=4))
        else:
            results = [_build_asset(job) for job in jobs]
        manifest = {
            "format": "k3-dataset",
            "version": MANIFEST_VERSION,
            "seed": seed,
            "config": cfg.model_dump(mode="json"),
            "vocab": list(VOCAB),
            "assets": [rec for rec, _ in results],
            "pairs": [p for _, pairs in results for p in pairs],
        }
        with open(os.path.join(tmp, MANIFEST), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
        if os.path.isdir(out_dir):
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info("dataset: %d assets, %d pairs -> %s", len(manifest["assets"]), len(manifest["pairs"]), out_dir)
    return manifest


@dataclass
class GenItem:
    """One 3D-generation training/eval view: an asset seen from a front camera."""
    asset_id: str
    index: int
    front_camera: Camera
    front: np.ndarray
    back: np.ndarray


class Dataset:
    """Read-side view over a built dataset directory."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        path = os.path.join(self.root, MANIFEST)
        try:
            with open(path, "r", encoding="utf-8") as f:
                self.manifest = json.load(f)
        except FileNotFoundError:
            raise ContractError(f"no dataset manifest at {path}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest {path} is not valid JSON") from exc
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise FormatError(f"manifest {path}: unsupported version {self.manifest.get('version')}")
        self.config = DatasetConfig(**self.manifest["config"])
        self.assets = {a["id"]: a for a in self.manifest["assets"]}
        self._images: dict[str, np.ndarray] = {}
        self._grids: dict[str, np.ndarray] = {}

    def asset_ids(self, split: str | None = None) -> list[str]:
        return [a["id"] for a in self.manifest["assets"] if split is None or a["split"] == split]

    def pairs(self, set_name: str | None = "clean", split: str | None = None) -> list[dict[str, t.Any]]:
        keep = set(self.asset_ids(split))
        return [p for p in self.manifest["pairs"]
                if (set_name is None or p["set"] == set_name) and p["asset_id"] in keep]

    def image(self, rel: str) -> np.ndarray:
        if rel not in self._images:
            self._images[rel] = read_image(os.path.join(self.root, rel))
        return self._images[rel]

    def grid(self, asset_id: str) -> np.ndarray:
        if asset_id not in self._grids:
            self._grids[asset_id] = read_voxels(os.path.join(self.root, self.assets[asset_id]["voxels"]))
        return self._grids[asset_id]

    def annotation(self, asset_id: str) -> Annotation:
        return Annotation(tuple(tuple(VOCAB[i] for i in d) for d in self.assets[asset_id]["annotation"]))

    def rig(self, asset_id: str) -> Rig:
        r = self.assets[asset_id]["rig"]
        return Rig(float(r["elevation"]), float(r["scale"]))

    def gen3d_items(self, split: str | None = None, cone_deg: float | None = None) -> list[GenItem]:
        """Front views from the 45-degree lattice within the front cone, rendered on demand."""
        cone = self.config.front_cone_deg if cone_deg is None else cone_deg
        items = []
        for asset_id in self.asset_ids(split):
            for k, rec in enumerate(self.assets[asset_id]["gen3d_pairs"]):
                cam = _camera(rec["front_camera"])
                if not in_front_cone(cam, cone):
                    continue
                grid = self.grid(asset_id)
                items.append(GenItem(
                    asset_id=asset_id, index=k, front_camera=cam,
                    front=render_ortho(grid, cam, self.config.image_size, self.config.render_step),
                    back=render_ortho(grid, cam.opposite(), self.config.image_size, self.config.render_step),
                ))
        return items
