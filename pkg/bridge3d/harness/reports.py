"""CSV + JSON report emission with fixed column order and embedded provenance."""
from __future__ import annotations

import json
import logging
import math
import os
import subprocess
import typing as t

import pandas as pd

from .. import __version__
from ..analytics.metrics import CONVENTIONS
from ..config_store import RunConfig, resolved_config

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["experiment", "setting", "seed", "source_tag", "tap_time", "hidden_mode",
                    "n_eval", "iou", "chamfer", "back_region_iou"]
CONTROL_COLUMNS = ["experiment", "seed", "n_eval", "injected", "baseline", "gap", "injected_swapped",
                   "prompt_blind_bound"]

# large-scale published numbers for the same two ablations; metadata only
REFERENCE_VALUES: dict[str, dict[str, dict[str, float]]] = {
    "timestep": {
        "0.0": {"iou": 0.343, "chamfer": 2.376},
        "0.25": {"iou": 0.352, "chamfer": 2.262},
        "0.5": {"iou": 0.349, "chamfer": 2.272},
        "0.75": {"iou": 0.336, "chamfer": 2.452},
    },
    "feature-source": {
        "final_latent": {"iou": 0.308, "chamfer": 2.803},
        "reencoded_image": {"iou": 0.342, "chamfer": 2.385},
        "hidden_states": {"iou": 0.352, "chamfer": 2.262},
    },
}


def artifact_version() -> str:
    """``git describe`` of the working tree when available, else the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10, check=True)
        return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _clean(value: t.Any) -> t.Any:
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_clean(v) for v in value]
    return value


def with_mean_rows(rows: pd.DataFrame, by: str | None, metrics: t.Sequence[str]) -> pd.DataFrame:
    """Append one aggregate row (seed = "mean") per group, the mean over that group's seeds."""
    rows = rows.copy()
    rows["seed"] = rows["seed"].astype(object)
    groups = rows.groupby(by, sort=False) if by else [(None, rows)]
    means = []
    for _, part in groups:
        mean = part.iloc[0].copy()
        mean["seed"] = "mean"
        for m in metrics:
            mean[m] = part[m].mean()
        means.append(mean)
    return pd.concat([rows, pd.DataFrame(means)], ignore_index=True)


def write_report(out_dir: str, name: str, rows: pd.DataFrame, columns: t.Sequence[str], cfg: RunConfig,
                 meta: t.Mapping[str, t.Any] | None = None, timings: t.Mapping[str, float] | None = None) -> dict[str, str]:
    """Write ``<name>.csv`` and ``<name>.json`` (plus ``timings.json`` when timings are given)."""
    os.makedirs(out_dir, exist_ok=True)
    columns = list(columns)
    if cfg.report.include_timing and timings is not None:
        rows = rows.copy()
        rows["wall_time_s"] = [timings.get(_row_key(r), float("nan")) for _, r in rows.iterrows()]
        columns.append("wall_time_s")
    rows = rows.reindex(columns=columns)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    rows.to_csv(csv_path, index=False, float_format="%.6f")
    doc = {
        "report": name,
        "version": artifact_version(),
        "columns": columns,
        "conventions": CONVENTIONS,
        "config": resolved_config(cfg),
        **(meta or {}),
        "rows": rows.to_dict(orient="records"),
    }
    json_path = os.path.join(out_dir, f"{name}.json")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(_clean(doc), f, indent=2, sort_keys=True)
        f.write("\n")
    paths = {"csv": csv_path, "json": json_path}
    if timings is not None:
        paths["timings"] = os.path.join(out_dir, "timings.json")
        with open(paths["timings"], "w", encoding="utf-8") as f:
            json.dump(dict(timings), f, indent=2, sort_keys=True)
    logger.info("report %s: %d rows -> %s", name, len(rows), out_dir)
    return paths


def _row_key(row: pd.Series) -> str:
    return f"{row.get('setting', '')}/{row['seed']}"


def read_report(path: str) -> dict[str, t.Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
