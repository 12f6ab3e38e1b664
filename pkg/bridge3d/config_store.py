"""Run configuration: one pydantic tree, persisted as UTF-8 JSON."""
from __future__ import annotations

import json
import os
import typing as t

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ContractError, UsageError

CONFIG_PATH = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir, "config", "run_config.json"))

COMPONENT_CLASSES = ("none", "slab", "spike", "wings", "handle")
FEATURE_SOURCES = ("final_latent", "reencoded_image", "hidden_states")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Section):
    n_assets: int = Field(200, ge=1)
    grid: int = Field(32, ge=32)
    image_size: int = Field(32, ge=4)
    classes: list[str] = Field(default_factory=lambda: list(COMPONENT_CLASSES))
    spacing_deg: float = 30.0
    gen3d_spacing_deg: float = 45.0
    elevation_range: tuple[float, float] = (-15.0, 45.0)
    scales: list[float] = Field(default_factory=lambda: [0.7, 0.85, 1.0, 1.15, 1.3])
    perturb_scale: float = Field(0.1, ge=0.0, lt=1.0)
    perturb_angle_deg: float = Field(5.0, ge=0.0)
    front_cone_deg: float = Field(60.0, gt=0.0, le=90.0)
    render_step: float = Field(0.5, gt=0.0, le=0.5)
    holdout_fraction: float = Field(0.2, ge=0.0, lt=1.0)

    @field_validator("classes")
    @classmethod
    def _known_classes(cls, v: list[str]) -> list[str]:
        unknown = [c for c in v if c not in COMPONENT_CLASSES]
        if unknown or not v:
            raise ValueError(f"unknown component classes {unknown}; allowed {COMPONENT_CLASSES}")
        return v

    @field_validator("spacing_deg", "gen3d_spacing_deg")
    @classmethod
    def _even_lattice(cls, v: float) -> float:
        views = 360.0 / v
        if v <= 0 or abs(views - round(views)) > 1e-9 or round(views) % 2:
            raise ValueError(f"spacing {v} must divide 360 into an even number of views")
        return v


class CodecConfig(_Section):
    patch: int = Field(4, ge=1)
    seed: int = 20240611


class BridgeConfig(_Section):
    d_model: int = Field(64, ge=2)
    layers: int = Field(6, ge=1)
    heads: int = Field(4, ge=1)
    encoder_layers: int = Field(2, ge=0)
    taps: list[int] = Field(default_factory=lambda: [2, 4, 6])
    tap_time: float = Field(0.25, ge=0.0, le=1.0)
    hidden_mode: t.Literal["trajectory", "teacher_forced"] = "trajectory"
    sample_steps: int = Field(32, ge=1)
    prompt_prob: float = Field(0.5, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _taps_in_range(self) -> "BridgeConfig":
        taps = self.taps
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ValueError(f"taps must be non-empty and strictly increasing, got {taps}")
        if taps[0] < 1 or taps[-1] > self.layers:
            raise ValueError(f"taps {taps} outside [1, {self.layers}]")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        return self


class Gen3DConfig(_Section):
    d_model: int = Field(64, ge=2)
    layers: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    d_inj: int | None = None
    inject: bool = True
    inject_blocks: list[int] | None = None
    lora_rank: int = Field(8, ge=1)
    lora_alpha: float | None = None
    sparse_grid: int = Field(8, ge=2)
    fine_grid: int = Field(16, ge=2)
    fine_patch: int = Field(2, ge=1)
    sample_steps: int = Field(16, ge=1)
    feature_source: t.Literal["final_latent", "reencoded_image", "hidden_states"] = "hidden_states"

    @model_validator(mode="after")
    def _grids(self) -> "Gen3DConfig":
        if self.fine_grid % self.fine_patch:
            raise ValueError(f"fine_grid {self.fine_grid} not divisible by fine_patch {self.fine_patch}")
        if self.fine_grid % self.sparse_grid:
            raise ValueError(f"fine_grid {self.fine_grid} not a multiple of sparse_grid {self.sparse_grid}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        return self

    @property
    def injection_width(self) -> int:
        return self.d_inj or self.d_model

    @property
    def alpha(self) -> float:
        return self.lora_alpha if self.lora_alpha is not None else 2.0 * self.lora_rank


class TrainConfig(_Section):
    seed: int = 0
    lr: float = Field(1e-4, gt=0.0)
    batch: int = Field(16, ge=1)
    bridge_steps: int = Field(3000, ge=0)
    pretrain_steps: int = Field(1500, ge=0)
    finetune_steps: int = Field(1500, ge=0)
    fine_steps: int = Field(1500, ge=0)
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(500, ge=0)
    dtype: t.Literal["float32", "float64"] = "float32"


class AblationConfig(_Section):
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    tap_times: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    feature_sources: list[str] = Field(default_factory=lambda: list(FEATURE_SOURCES))
    hidden_mode: t.Literal["trajectory", "teacher_forced"] = "trajectory"
    eval_assets: int | None = None
    fine_stage: bool = False

    @field_validator("feature_sources")
    @classmethod
    def _known_sources(cls, v: list[str]) -> list[str]:
        unknown = [s for s in v if s not in FEATURE_SOURCES]
        if unknown:
            raise ValueError(f"unknown feature sources {unknown}; allowed {FEATURE_SOURCES}")
        return v


class ReportConfig(_Section):
    include_timing: bool = False
    plot: bool = False


class RunConfig(_Section):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    bridge: BridgeConfig = Field(default_factory=BridgeConfig)
    gen3d: Gen3DConfig = Field(default_factory=Gen3DConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)


def _ensure_dir(path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(d):
        os.makedirs(d, exist_ok=True)


def from_dict(data: t.Mapping[str, t.Any]) -> RunConfig:
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        raise ContractError(f"invalid configuration: {exc}") from exc


def load_config(path: str | None = None) -> RunConfig:
    path = path or CONFIG_PATH
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def save_config(cfg: RunConfig, path: str | None = None) -> None:
    path = path or CONFIG_PATH
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(resolved_config(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def resolved_config(cfg: RunConfig) -> dict[str, t.Any]:
    """Canonical plain-JSON form embedded in checkpoints and reports."""
    return json.loads(json.dumps(cfg.model_dump(mode="json"), sort_keys=True))


def apply_overrides(cfg: RunConfig, overrides: t.Sequence[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
    data = resolved_config(cfg)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node: t.Any = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise UsageError(f"override {item!r}: unknown section {part!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise UsageError(f"override {item!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return from_dict(data)


def with_updates(cfg: RunConfig, **sections: t.Mapping[str, t.Any]) -> RunConfig:
    """Copy of ``cfg`` with per-section field updates, re-validated."""
    data = resolved_config(cfg)
    for section, fields in sections.items():
        data[section].update(fields)
    return from_dict(data)


def thread_count() -> int:
    """Parallelism cap from K3_THREADS (default 1, which keeps runs bitwise deterministic)."""
    raw = os.getenv("K3_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"K3_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)
