"""
Application Layer: Evaluation Service

Scores a prediction file against manifest labels and renders the result
as an `Average` row followed by one row per tool.
"""

import logging
from pathlib import Path

import numpy as np

from app.domain.entities import AucReport
from app.domain.exceptions import DataError
from app.domain.interfaces import IManifestRepository, IPredictionRepository
from app.domain.metrics import macro_auc

logger = logging.getLogger(__name__)


def render_table(report: AucReport) -> str:
    """Human-readable report table."""
    width = max(len("Average"), *(len(c.tool) for c in report.per_class))
    lines = [f"{'Tool':<{width}}  {'AUC':>6}  {'Pos':>6}  {'Neg':>6}", "-" * (width + 26)]
    lines.append(f"{'Average':<{width}}  {report.macro:>6.4f}")
    for entry in report.per_class:
        if entry.skipped:
            lines.append(f"{entry.tool:<{width}}  {'SKIPPED':>6}  {entry.positives:>6}  {entry.negatives:>6}"
                         f"  ({entry.skipped_reason})")
        else:
            lines.append(f"{entry.tool:<{width}}  {entry.auc:>6.4f}  {entry.positives:>6}  {entry.negatives:>6}")
    return "\n".join(lines)


class EvaluationService:
    """Joins predictions with labels by frame key and computes the AUC report."""

    def __init__(self, manifest_repository: IManifestRepository, prediction_repository: IPredictionRepository):
        self.manifest_repository = manifest_repository
        self.prediction_repository = prediction_repository

    def evaluate_predictions(self, predictions_path: Path, manifest_path: Path) -> AucReport:
        tool_names, keys, scores = self.prediction_repository.read_predictions(predictions_path)
        manifest = self.manifest_repository.load(manifest_path)

        unknown = [t for t in tool_names if t not in manifest.tool_names]
        if unknown:
            raise DataError(f"predicted tools not in the manifest: {unknown}")
        columns = [manifest.tool_names.index(t) for t in tool_names]

        labels = {frame.key: frame.labels for frame in manifest.frames()}
        missing = [key for key in keys if key not in labels]
        if missing:
            raise DataError(f"{len(missing)} predicted frame(s) have no labels, e.g. {missing[:3]}")

        present = np.array([[labels[key].present[i] for i in columns] for key in keys])
        mask = np.array([[labels[key].ignore_mask[i] for i in columns] for key in keys])
        report = macro_auc(scores, present, mask, tool_names)
        logger.info("Evaluation finished", extra={"frames": len(keys), "macro_auc": report.macro})
        return report

    def write_report(self, path: Path, report: AucReport) -> None:
        self.prediction_repository.write_report(path, report)
