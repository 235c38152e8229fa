"""Static pipeline configuration.

One JSON file drives every stage; CLI flags override individual values.
Unknown keys are rejected anywhere in the file, and values shared across
stages (k_max, diffusion step count) must agree or loading fails, so a saved
config is a complete, unambiguous experiment record.

Layout::

    {
      "page": {"width": 48, "height": 64},
      "k_max": 4,
      "seed": 0,
      "model": {"d_model": 64, "depth": 2, "heads": 4, ...},
      "schedule": {"timesteps": 1000, "beta_start": 1e-4, "beta_end": 2e-2},
      "optimizer": {"lr": 1e-4, "weight_decay": 0.01, "betas": [0.9, 0.999]},
      "training": {"steps": 2000, "batch_size": 8},
      "paths": {"data": "...", "out": "..."}
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

__all__ = [
    "ScheduleConfig",
    "OptimizerConfig",
    "TrainingConfig",
    "PipelineConfig",
    "desk_config",
    "full_scale_config",
    "load_pipeline_config",
    "save_pipeline_config",
]


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: str = "linear"


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 2000
    batch_size: int = 8


@dataclass(frozen=True)
class PipelineConfig:
    page_width: int = 48
    page_height: int = 64
    k_max: int = 4
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.k_max != self.model.k_max:
            raise ConfigError(
                f"k_max disagrees: pipeline says {self.k_max}, model says {self.model.k_max}"
            )
        if self.model.num_timesteps != self.schedule.timesteps:
            raise ConfigError(
                f"diffusion steps disagree: model says {self.model.num_timesteps}, "
                f"schedule says {self.schedule.timesteps}"
            )
        stride = 8 * self.model.patch  # codec downsample x patch size
        if self.page_width % stride or self.page_height % stride:
            raise ConfigError(
                f"page {self.page_width}x{self.page_height} must be divisible by {stride}"
            )
        if self.training.steps < 1 or self.training.batch_size < 1:
            raise ConfigError("training steps and batch_size must be >= 1")

    @property
    def page_size(self) -> tuple[int, int]:
        return (self.page_width, self.page_height)


def desk_config(seed: int = 0) -> PipelineConfig:
    """Small profile that trains in minutes on a CPU.

    The learning rate is raised to 3e-4: the micro model needs proportionally
    larger steps to overfit in a 2000-step budget.  The protocol value 1e-4
    remains the general default and the full-scale profile's setting.
    """
    return PipelineConfig(seed=seed, optimizer=OptimizerConfig(lr=3e-4))


def full_scale_config(seed: int = 0) -> PipelineConfig:
    """Protocol-scale profile: 512x384 pages, 8 panel slots, 300 text tokens.

    The transformer width/depth here is a placeholder sized for a single GPU,
    not a reproduction of any pretrained backbone.
    """
    model = ModelConfig(
        d_model=384,
        depth=6,
        heads=6,
        k_max=8,
        d_text=64,
        max_text_tokens=300,
    )
    return PipelineConfig(
        page_width=384,
        page_height=512,
        k_max=8,
        seed=seed,
        model=model,
    )


def _build_strict(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad {where} config: {e}") from None


_TOP_KEYS = {"page", "k_max", "seed", "model", "schedule", "optimizer", "training", "paths"}


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    """Parse and cross-validate a pipeline config file."""
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None

    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    page = data.get("page", {})
    if set(page) - {"width", "height"}:
        raise ConfigError(f"unknown page keys: {sorted(set(page) - {'width', 'height'})}")

    schedule = _build_strict(ScheduleConfig, data.get("schedule", {}), "schedule")

    model_data = dict(data.get("model", {}))
    k_max = data.get("k_max", model_data.get("k_max", PipelineConfig.k_max))
    if "k_max" in model_data and model_data["k_max"] != k_max:
        raise ConfigError(
            f"k_max disagrees: pipeline says {k_max}, model says {model_data['k_max']}"
        )
    model_data["k_max"] = k_max
    if (
        "num_timesteps" in model_data
        and model_data["num_timesteps"] != schedule.timesteps
    ):
        raise ConfigError(
            f"diffusion steps disagree: model says {model_data['num_timesteps']}, "
            f"schedule says {schedule.timesteps}"
        )
    model_data["num_timesteps"] = schedule.timesteps
    model = ModelConfig.from_dict(model_data)

    paths = data.get("paths", {})
    if set(paths) - {"data", "out"}:
        raise ConfigError(f"unknown paths keys: {sorted(set(paths) - {'data', 'out'})}")

    return PipelineConfig(
        page_width=page.get("width", PipelineConfig.page_width),
        page_height=page.get("height", PipelineConfig.page_height),
        k_max=k_max,
        seed=data.get("seed", 0),
        model=model,
        schedule=schedule,
        optimizer=_build_strict(OptimizerConfig, data.get("optimizer", {}), "optimizer"),
        training=_build_strict(TrainingConfig, data.get("training", {}), "training"),
        data_dir=paths.get("data"),
        out_dir=paths.get("out"),
    )


def save_pipeline_config(cfg: PipelineConfig, path: str | Path) -> None:
    data = {
        "page": {"width": cfg.page_width, "height": cfg.page_height},
        "k_max": cfg.k_max,
        "seed": cfg.seed,
        "model": cfg.model.to_dict(),
        "schedule": dataclasses.asdict(cfg.schedule),
        "optimizer": dataclasses.asdict(cfg.optimizer),
        "training": dataclasses.asdict(cfg.training),
    }
    if cfg.data_dir or cfg.out_dir:
        data["paths"] = {}
        if cfg.data_dir:
            data["paths"]["data"] = cfg.data_dir
        if cfg.out_dir:
            data["paths"]["out"] = cfg.out_dir
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")
