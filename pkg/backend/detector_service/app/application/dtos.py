"""
Application Layer: Configuration Schemas

Pydantic models for the JSON run configuration. Every section forbids
unknown keys; validation failures surface as ConfigError naming the dotted
path of the offending key.
"""

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.domain.entities import Family, HeadType
from app.domain.exceptions import ConfigError, DataError, InvalidArgumentError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ============ Synthetic data ============

class GeneratorConfig(StrictModel):
    """Synthetic dataset generator settings. Per-class lists default to a surgical-video-like imbalance."""
    num_videos: int = Field(8, ge=1)
    frames_per_video: int = Field(120, ge=1)
    num_classes: int = Field(6, ge=2)
    image_width: int = Field(64, ge=32)
    image_height: int = Field(64, ge=32)
    prevalence: Optional[list[float]] = Field(None, description="Target fraction of all frames showing each class")
    coverage: Optional[list[int]] = Field(None, description="Number of videos each class may appear in")
    episode_mean_length: Optional[list[float]] = Field(None, description="Mean frames per tool-use episode")
    max_simultaneous_tools: int = Field(3, ge=1)
    annotator_noise: float = Field(0.0, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_lengths(self):
        for name in ("prevalence", "coverage", "episode_mean_length"):
            values = getattr(self, name)
            if values is not None and len(values) != self.num_classes:
                raise ValueError(f"{name} must list {self.num_classes} values, got {len(values)}")
        return self

    def resolved_prevalence(self) -> list[float]:
        if self.prevalence is not None:
            return list(self.prevalence)
        # Decreasing prevalence: a few common tools, a long tail of rare ones
        return [round(0.30 / (1.0 + 0.9 * i), 4) for i in range(self.num_classes)]

    def resolved_coverage(self) -> list[int]:
        if self.coverage is not None:
            return list(self.coverage)
        return [max(2, self.num_videos - i) if self.num_videos >= 2 else 1 for i in range(self.num_classes)]

    def resolved_episode_means(self) -> list[float]:
        if self.episode_mean_length is not None:
            return list(self.episode_mean_length)
        return [max(3.0, self.frames_per_video / (6.0 + 2.0 * i)) for i in range(self.num_classes)]


# ============ Data pipeline ============

class AugmentationParams(StrictModel):
    """Scale -> crop -> flip -> color shift -> rotation geometry and randomness."""
    scale_width: int = Field(68, ge=1)
    scale_height: int = Field(40, ge=1)
    crop_width: int = Field(64, ge=1)
    crop_height: int = Field(36, ge=1)
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    color_alpha_std: float = Field(1.0, ge=0.0)
    max_rotation_degrees: float = Field(15.0, ge=0.0)
    enabled: bool = True

    @classmethod
    def full_resolution(cls) -> "AugmentationParams":
        return cls(scale_width=1024, scale_height=604, crop_width=960, crop_height=540)

    def scaled_to(self, factor: float) -> "AugmentationParams":
        """Same augmentation at a different resolution (low-resolution experiment)."""
        return self.model_copy(update={
            "scale_width": max(1, round(self.scale_width * factor)),
            "scale_height": max(1, round(self.scale_height * factor)),
            "crop_width": max(1, round(self.crop_width * factor)),
            "crop_height": max(1, round(self.crop_height * factor)),
        })


class DatasetConfig(StrictModel):
    manifest: Optional[str] = None
    source_manifest: Optional[str] = None
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    frame_stride: int = Field(6, ge=1)
    undersample_ratio: float = Field(0.4, gt=0.0, le=1.0)
    undersample_after_stride: bool = True
    min_tools_per_frame: int = Field(0, ge=0)
    augmentation: AugmentationParams = Field(default_factory=AugmentationParams)
    pca_max_pixels: int = Field(10_000, ge=3)
    seed: int = 0


class SplitConfig(StrictModel):
    mode: Literal["video", "none", "file"] = "video"
    n_val_videos: int = Field(2, ge=1)
    seed: int = 0
    exhaustive_limit: int = Field(50_000, ge=1)
    restarts: int = Field(64, ge=1)
    plan_file: Optional[str] = None


# ============ Model ============

class ModelSpec(StrictModel):
    """Declarative description of one network instance."""
    family: Family = Family.FT
    k: int = 0
    head: HeadType = HeadType.AVG_FC
    include_custom_part: bool = True
    num_classes: int = Field(6, ge=1)
    backbone_widths: list[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    backbone_strides: list[int] = Field(default_factory=lambda: [1, 2, 2, 2])
    blocks_per_stage: int = Field(2, ge=1)
    custom_features: int = Field(32, ge=1)
    custom_repetitions: int = Field(3, ge=1)
    custom_pool: int = Field(2, ge=1)
    conv_max_kernel: Literal[1, 3] = 1
    input_height: int = Field(36, ge=1)
    input_width: int = Field(64, ge=1)
    ffe_cut_points: list[int] = Field(default_factory=lambda: [7, 10, 14, 17])

    @property
    def backbone_layers_total(self) -> int:
        return 1 + 2 * self.blocks_per_stage * len(self.backbone_widths)

    @property
    def name(self) -> str:
        if self.family is Family.FT:
            return f"FT{self.k}"
        return f"FFE{self.k}" + ("" if self.include_custom_part else "NC")

    def validate_structure(self) -> None:
        """Raise InvalidArgumentError when k does not fit the family."""
        total = self.backbone_layers_total
        if len(self.backbone_widths) != len(self.backbone_strides):
            raise InvalidArgumentError("backbone_widths and backbone_strides must have the same length")
        if self.family is Family.FT and not 0 <= self.k < total:
            raise InvalidArgumentError(f"FT needs 0 <= k < {total}, got k={self.k}")
        if self.family is Family.FFE:
            if self.k not in self.ffe_cut_points:
                raise InvalidArgumentError(f"FFE k={self.k} is not a configured cut point {self.ffe_cut_points}")
            if not 1 <= self.k <= total:
                raise InvalidArgumentError(f"FFE cut point {self.k} outside [1, {total}]")


# ============ Training ============

class TrainConfig(StrictModel):
    lr0: float = Field(0.05, gt=0.0)
    decay: float = Field(0.000125, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(8, ge=1)
    iterations: int = Field(2000, ge=0)
    l2: float = Field(0.0, ge=0.0)
    weighted: bool = False
    frequency_source: Literal["frames", "videos"] = "frames"
    init: Literal["random", "pretrained"] = "random"
    pretrained_checkpoint: Optional[str] = None
    val_every: int = Field(500, ge=1)
    log_every: int = Field(50, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_init(self):
        if self.init == "pretrained" and not self.pretrained_checkpoint:
            raise ValueError("pretrained_checkpoint is required when init is 'pretrained'")
        return self

    @classmethod
    def fine_tuning(cls, **overrides) -> "TrainConfig":
        """Fine-tuning defaults: d=0.000125, batch 8, desk-scale analog of 60k iterations."""
        return cls(**{"decay": 0.000125, "batch_size": 8, "iterations": 2000, **overrides})

    @classmethod
    def feature_extractor(cls, **overrides) -> "TrainConfig":
        """FFE defaults: d=0.001, batch 32, desk-scale analog of 20k iterations."""
        return cls(**{"decay": 0.001, "batch_size": 32, "iterations": 800, **overrides})


class EvalConfig(StrictModel):
    batch_size: int = Field(32, ge=1)


class ExperimentConfig(StrictModel):
    plan: str = "table1"
    repeats: int = Field(5, ge=1)
    workers: int = Field(1, ge=1)
    iteration_scale: float = Field(1.0, gt=0.0)
    seed: int = 0


class AppConfig(StrictModel):
    """The whole run configuration document."""
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)

    def with_seed(self, seed: int) -> "AppConfig":
        """Override every seed in the document."""
        return self.model_copy(update={
            "dataset": self.dataset.model_copy(update={
                "seed": seed, "generator": self.dataset.generator.model_copy(update={"seed": seed}),
            }),
            "split": self.split.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
            "experiment": self.experiment.model_copy(update={"seed": seed}),
        })


# ============ Experiments ============

class ExperimentRun(StrictModel):
    """One fully specified configuration of an experiment plan."""
    name: str
    model: ModelSpec
    train: TrainConfig
    dataset: DatasetConfig
    split: SplitConfig
    repeats: int = Field(5, ge=1)
    # Cell of the rendered results grid; runs without a column are listed one per line
    row: str = ""
    column: str = ""


class ExperimentPlan(StrictModel):
    name: str
    runs: list[ExperimentRun]
    focus_tool: Optional[str] = Field(None, description="Tool whose AUC is reported next to the macro AUC")

    @field_validator("runs")
    @classmethod
    def _unique_names(cls, runs: list[ExperimentRun]) -> list[ExperimentRun]:
        names = [r.name for r in runs]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"run names must be unique, duplicated: {duplicates}")
        return runs


# ============ Loading ============

def _error_path(error: ValidationError) -> tuple[str, str]:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"]), first["msg"]


def parse_config(data: dict, model: type[BaseModel] = AppConfig) -> BaseModel:
    """Validate a decoded JSON document; ConfigError carries the offending key path."""
    try:
        parsed = model.model_validate(data)
    except ValidationError as exc:
        key_path, message = _error_path(exc)
        raise ConfigError(message, key_path=key_path) from exc
    if isinstance(parsed, AppConfig):
        try:
            parsed.model.validate_structure()
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), key_path="model.k") from exc
    return parsed


def load_config(path: Optional[Path], model: type[BaseModel] = AppConfig) -> BaseModel:
    """Read and validate a JSON config file; no path means all defaults."""
    if path is None:
        return parse_config({}, model)
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError("top-level JSON value must be an object")
    return parse_config(data, model)
