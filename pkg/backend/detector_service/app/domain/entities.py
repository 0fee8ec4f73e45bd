"""
Domain Layer: Core Entities

Plain dataclasses and enums for datasets, splits, preprocessing state and
evaluation results. No framework or file-format dependencies.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from app.domain.exceptions import InvalidArgumentError


class Mode(str, Enum):
    """Forward-pass mode; decides batch-norm statistics."""
    TRAIN = "train"
    INFERENCE = "inference"


class Family(str, Enum):
    """Network family: fine-tuning or fixed feature extractor."""
    FT = "FT"
    FFE = "FFE"


class HeadType(str, Enum):
    """Classification head."""
    AVG_FC = "AVG_FC"
    CONV_MAX = "CONV_MAX"


@dataclass(frozen=True)
class LabelVector:
    """Tool presence bits plus an evaluate(1)/ignore(0) mask per class."""
    present: tuple[int, ...]
    ignore_mask: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.ignore_mask:
            object.__setattr__(self, "ignore_mask", (1,) * len(self.present))
        if len(self.ignore_mask) != len(self.present):
            raise InvalidArgumentError("present and ignore_mask must have the same length")

    @property
    def num_tools(self) -> int:
        return sum(self.present)

    @property
    def is_empty(self) -> bool:
        return self.num_tools == 0

    def select(self, indices: list[int]) -> "LabelVector":
        """Restrict to a subset of classes (e.g. tools active after a split)."""
        return LabelVector(
            present=tuple(self.present[i] for i in indices),
            ignore_mask=tuple(self.ignore_mask[i] for i in indices),
        )


@dataclass(frozen=True)
class FrameEntry:
    """One annotated frame; provenance (video id, frame index) travels with it."""
    video_id: str
    frame_index: int
    image_path: Path
    labels: LabelVector

    @property
    def key(self) -> str:
        return f"{self.video_id}:{self.frame_index}"


@dataclass
class VideoRecord:
    """A video and its frames, ordered by frame index."""
    video_id: str
    frames: list[FrameEntry] = field(default_factory=list)

    def __post_init__(self):
        indices = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InvalidArgumentError(f"frame indices of video {self.video_id} are not strictly increasing")


@dataclass
class DatasetManifest:
    """Videos -> frames -> labels, plus the ordered tool names."""
    tool_names: list[str]
    videos: list[VideoRecord] = field(default_factory=list)

    def __post_init__(self):
        c = len(self.tool_names)
        for video in self.videos:
            for frame in video.frames:
                if len(frame.labels.present) != c:
                    raise InvalidArgumentError(
                        f"frame {frame.key} has {len(frame.labels.present)} labels, expected {c}"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.tool_names)

    @property
    def video_ids(self) -> list[str]:
        return [v.video_id for v in self.videos]

    def frames(self, video_ids: Optional[list[str]] = None) -> list[FrameEntry]:
        wanted = None if video_ids is None else set(video_ids)
        return [f for v in self.videos if wanted is None or v.video_id in wanted for f in v.frames]

    def tool_video_incidence(self) -> np.ndarray:
        """Boolean [videos, tools]: does the tool appear (evaluated) in the video."""
        incidence = np.zeros((len(self.videos), self.num_classes), dtype=bool)
        for vi, video in enumerate(self.videos):
            for frame in video.frames:
                incidence[vi] |= np.array(frame.labels.present, dtype=bool) & np.array(
                    frame.labels.ignore_mask, dtype=bool
                )
        return incidence


@dataclass(frozen=True)
class SplitPlan:
    """Video-level train/validation partition and the tools it cannot cover on both sides."""
    train_video_ids: tuple[str, ...]
    val_video_ids: tuple[str, ...]
    excluded_tools: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "train_video_ids": list(self.train_video_ids),
            "val_video_ids": list(self.val_video_ids),
            "excluded_tools": list(self.excluded_tools),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        return cls(
            train_video_ids=tuple(data["train_video_ids"]),
            val_video_ids=tuple(data["val_video_ids"]),
            excluded_tools=tuple(data.get("excluded_tools", ())),
        )


@dataclass(frozen=True)
class MeanImage:
    """Per-pixel, per-channel training-set mean, CHW at model input resolution."""
    pixels: np.ndarray


@dataclass(frozen=True)
class ColorPca:
    """Eigenpairs of the training-set RGB covariance (columns of `eigenvectors`)."""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def identity(cls) -> "ColorPca":
        return cls(eigenvalues=np.zeros(3), eigenvectors=np.eye(3))


@dataclass(frozen=True)
class RocCurve:
    """ROC points from (0,0) to (1,1) and the score threshold of each point."""
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        """Trapezoidal area under the curve."""
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class ClassAuc:
    """AUC of one class, or the reason it was skipped."""
    tool: str
    auc: Optional[float]
    positives: int
    negatives: int
    skipped_reason: Optional[str] = None

    @property
    def skipped(self) -> bool:
        return self.auc is None


@dataclass(frozen=True)
class AucReport:
    """Per-class AUCs and their unweighted mean over non-skipped classes."""
    per_class: tuple[ClassAuc, ...]
    macro: float

    @property
    def evaluated_tools(self) -> list[str]:
        return [c.tool for c in self.per_class if not c.skipped]
