"""
Infrastructure Layer: Manifest Repository

A manifest is a JSON document listing the videos of a dataset:

    {"tool_names": [...],
     "videos": [{"video_id": "v01", "frames_dir": "v01", "annotations": "v01.csv",
                 "annotations_secondary": "v01.secondary.csv"}]}

Relative paths are resolved against the manifest's directory. Each annotation
CSV has the header `frame,<tool_1>,...,<tool_c>` and 0/1 cells. When a second
annotator's file is given, cells where the two disagree become ignore-mask zeros.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from app.core.config import settings
from app.domain.entities import DatasetManifest, FrameEntry, LabelVector, SplitPlan, VideoRecord
from app.domain.exceptions import DataError, InvalidArgumentError
from app.domain.interfaces import IManifestRepository

logger = logging.getLogger(__name__)

FRAME_COLUMN = "frame"


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise DataError(f"{path}: top-level JSON value must be an object")
    return data


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class FileManifestRepository(IManifestRepository):
    """Manifest JSON + annotation CSVs on the local filesystem."""

    def __init__(self, frame_filename_pattern: Optional[str] = None):
        self.frame_filename_pattern = frame_filename_pattern or settings.frame_filename_pattern

    def read_annotations(self, csv_path: Path, tool_names: list[str]) -> pd.DataFrame:
        """Read one annotation CSV, indexed by frame, with columns in tool order."""
        if not csv_path.exists():
            raise DataError(f"annotation file not found: {csv_path}")
        try:
            frame = pd.read_csv(csv_path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise DataError(f"{csv_path}: unreadable annotation CSV ({exc})") from exc

        expected = [FRAME_COLUMN, *tool_names]
        if list(frame.columns) != expected:
            raise DataError(f"{csv_path}: header {list(frame.columns)} does not match {expected}")
        if frame.isna().any().any():
            raise DataError(f"{csv_path}: empty cells")
        cells = frame[tool_names].to_numpy()
        if not np.isin(cells, (0, 1)).all():
            raise DataError(f"{csv_path}: label cells must be 0 or 1")
        if frame[FRAME_COLUMN].duplicated().any():
            raise DataError(f"{csv_path}: duplicate frame indices")
        try:
            return frame.astype(int).set_index(FRAME_COLUMN)
        except ValueError as exc:
            raise DataError(f"{csv_path}: frame indices must be integers") from exc

    def load(self, manifest_path: Path) -> DatasetManifest:
        manifest_path = Path(manifest_path)
        data = _read_json(manifest_path)
        try:
            tool_names = [str(name) for name in data["tool_names"]]
            video_specs = list(data["videos"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"{manifest_path}: manifest needs 'tool_names' and 'videos'") from exc
        if len(set(tool_names)) != len(tool_names):
            raise DataError(f"{manifest_path}: duplicate tool names")

        base = manifest_path.parent
        videos = []
        for spec in video_specs:
            try:
                video_id = str(spec["video_id"])
                frames_dir = base / spec["frames_dir"]
                primary = self.read_annotations(base / spec["annotations"], tool_names)
            except KeyError as exc:
                raise DataError(f"{manifest_path}: video entry lacks {exc}") from exc

            present = primary.to_numpy()
            mask = np.ones_like(present)
            secondary_name = spec.get("annotations_secondary")
            if secondary_name:
                secondary = self.read_annotations(base / secondary_name, tool_names)
                if not secondary.index.equals(primary.index):
                    raise DataError(f"{video_id}: annotator files cover different frames")
                mask = (secondary.to_numpy() == present).astype(int)

            frames = [
                FrameEntry(
                    video_id=video_id,
                    frame_index=int(index),
                    image_path=frames_dir / self.frame_filename_pattern.format(frame_index=int(index)),
                    labels=LabelVector(present=tuple(int(v) for v in present[row]),
                                       ignore_mask=tuple(int(v) for v in mask[row])),
                )
                for row, index in enumerate(primary.index)
            ]
            try:
                videos.append(VideoRecord(video_id=video_id, frames=frames))
            except InvalidArgumentError as exc:
                raise DataError(str(exc)) from exc

        ids = [v.video_id for v in videos]
        if len(set(ids)) != len(ids):
            raise DataError(f"{manifest_path}: duplicate video ids")

        logger.info(
            "Manifest loaded",
            extra={"path": str(manifest_path), "videos": len(videos), "tools": len(tool_names)},
        )
        return DatasetManifest(tool_names=tool_names, videos=videos)

    def write_annotations(self, csv_path: Path, tool_names: list[str], rows: list[tuple[int, tuple[int, ...]]]) -> None:
        records = [{FRAME_COLUMN: index, **dict(zip(tool_names, bits))} for index, bits in rows]
        frame = pd.DataFrame.from_records(records, columns=[FRAME_COLUMN, *tool_names])
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(csv_path, index=False, lineterminator="\n")

    def write_manifest(self, manifest_path: Path, tool_names: list[str], videos: list[dict]) -> None:
        _write_json(Path(manifest_path), {"tool_names": list(tool_names), "videos": videos})

    def save_split(self, path: Path, plan: SplitPlan) -> None:
        _write_json(Path(path), plan.to_dict())

    def load_split(self, path: Path) -> SplitPlan:
        data = _read_json(Path(path))
        try:
            return SplitPlan.from_dict(data)
        except KeyError as exc:
            raise DataError(f"{path}: split file lacks {exc}") from exc
