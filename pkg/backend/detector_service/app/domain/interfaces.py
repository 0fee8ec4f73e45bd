"""
Domain Layer: Storage Interfaces

Abstract contracts the application layer uses for persistence.
The infrastructure layer implements them on the local filesystem.
"""

from abc import ABC, abstractmethod
from pathlib import Path

import numpy as np

from app.domain.entities import AucReport, DatasetManifest, SplitPlan


class ICheckpointRepository(ABC):
    """Contract for parameter checkpoint persistence."""

    @abstractmethod
    def save(self, path: Path, arrays: dict[str, np.ndarray]) -> Path:
        """Write a path -> float64 array mapping. Same content gives the same bytes."""
        pass

    @abstractmethod
    def load(self, path: Path) -> dict[str, np.ndarray]:
        """Read a checkpoint back. Raises DataError if the file is missing or unreadable."""
        pass


class IManifestRepository(ABC):
    """Contract for dataset manifests and their annotation files."""

    @abstractmethod
    def load(self, manifest_path: Path) -> DatasetManifest:
        """Load the manifest, all annotation CSVs and annotator disagreements."""
        pass

    @abstractmethod
    def write_annotations(self, csv_path: Path, tool_names: list[str], rows: list[tuple[int, tuple[int, ...]]]) -> None:
        """Write one annotation CSV (`frame,<tool_1>,...`)."""
        pass

    @abstractmethod
    def write_manifest(self, manifest_path: Path, tool_names: list[str], videos: list[dict]) -> None:
        """Write the manifest JSON."""
        pass

    @abstractmethod
    def save_split(self, path: Path, plan: SplitPlan) -> None:
        """Persist a split plan as JSON."""
        pass

    @abstractmethod
    def load_split(self, path: Path) -> SplitPlan:
        """Read a split plan written by save_split."""
        pass


class IImageStore(ABC):
    """Contract for reading and writing RGB frame images."""

    @abstractmethod
    def read(self, path: Path) -> np.ndarray:
        """Return an HxWx3 float64 image scaled to [0, 1]."""
        pass

    @abstractmethod
    def write(self, path: Path, image: np.ndarray) -> None:
        """Write an HxWx3 uint8 image losslessly."""
        pass


class IPredictionRepository(ABC):
    """Contract for prediction and report files."""

    @abstractmethod
    def write_predictions(self, path: Path, tool_names: list[str], keys: list[str], scores: np.ndarray) -> None:
        """Write `frame,<tool_1>,...` rows keyed by `<video_id>:<frame_index>`."""
        pass

    @abstractmethod
    def read_predictions(self, path: Path) -> tuple[list[str], list[str], np.ndarray]:
        """Return (tool names, frame keys, scores [N, c])."""
        pass

    @abstractmethod
    def write_report(self, path: Path, report: AucReport) -> None:
        """Write the `tool,auc,...` report CSV."""
        pass
