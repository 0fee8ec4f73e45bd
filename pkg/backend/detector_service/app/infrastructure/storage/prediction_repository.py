"""
Infrastructure Layer: Prediction and Report Files

Predictions: `frame,<tool_1>,...,<tool_c>` with frame key `<video_id>:<frame_index>`
and scores written with 17 significant digits so they read back exactly.
Reports: `tool,auc,positives,negatives,status` with the Average row first.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from app.domain.entities import AucReport
from app.domain.exceptions import DataError, InvalidArgumentError
from app.domain.interfaces import IPredictionRepository

logger = logging.getLogger(__name__)

FRAME_COLUMN = "frame"
REPORT_COLUMNS = ["tool", "auc", "positives", "negatives", "status"]
AVERAGE_ROW = "Average"


class CsvPredictionRepository(IPredictionRepository):
    """CSV implementation of prediction and report persistence."""

    def write_predictions(self, path: Path, tool_names: list[str], keys: list[str], scores: np.ndarray) -> None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (len(keys), len(tool_names)):
            raise InvalidArgumentError(
                f"scores {scores.shape} do not match {len(keys)} frames x {len(tool_names)} tools"
            )
        frame = pd.DataFrame(scores, columns=list(tool_names))
        frame.insert(0, FRAME_COLUMN, list(keys))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logger.info("Predictions written", extra={"path": str(path), "frames": len(keys)})

    def read_predictions(self, path: Path) -> tuple[list[str], list[str], np.ndarray]:
        path = Path(path)
        if not path.exists():
            raise DataError(f"predictions file not found: {path}")
        try:
            frame = pd.read_csv(path, dtype={FRAME_COLUMN: str}, float_precision="round_trip")
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: unreadable predictions CSV ({exc})") from exc

        if frame.columns.empty or frame.columns[0] != FRAME_COLUMN:
            raise DataError(f"{path}: first column must be '{FRAME_COLUMN}'")
        tool_names = [str(c) for c in frame.columns[1:]]
        if not tool_names:
            raise DataError(f"{path}: no tool columns")
        if frame[FRAME_COLUMN].duplicated().any():
            raise DataError(f"{path}: duplicate frame keys")
        try:
            scores = frame[tool_names].to_numpy(dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric scores") from exc
        if not np.isfinite(scores).all() or (scores < 0).any() or (scores > 1).any():
            raise DataError(f"{path}: scores must be finite and lie in [0, 1]")
        return tool_names, frame[FRAME_COLUMN].tolist(), scores

    def write_report(self, path: Path, report: AucReport) -> None:
        evaluated = [c for c in report.per_class if not c.skipped]
        rows = [{
            "tool": AVERAGE_ROW,
            "auc": report.macro,
            "positives": sum(c.positives for c in evaluated),
            "negatives": sum(c.negatives for c in evaluated),
            "status": "ok",
        }]
        for entry in report.per_class:
            rows.append({
                "tool": entry.tool,
                "auc": entry.auc,
                "positives": entry.positives,
                "negatives": entry.negatives,
                "status": f"skipped: {entry.skipped_reason}" if entry.skipped else "ok",
            })
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=REPORT_COLUMNS).to_csv(
            path, index=False, float_format="%.17g", lineterminator="\n"
        )
