"""
Infrastructure Layer: Checkpoint Repository

Checkpoints are .npz archives (readable by `numpy.load`) written member by
member with fixed zip timestamps, so equal content gives equal bytes.
"""

import io
import logging
import zipfile
from pathlib import Path

import numpy as np

from app.domain.exceptions import DataError
from app.domain.interfaces import ICheckpointRepository

logger = logging.getLogger(__name__)

FORMAT_VERSION_KEY = "format.version"
FORMAT_VERSION = 1.0
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class NpzCheckpointRepository(ICheckpointRepository):
    """Deterministic .npz implementation of the checkpoint repository."""

    def save(self, path: Path, arrays: dict[str, np.ndarray]) -> Path:
        """Write one little-endian float64 .npy member per path, sorted by path."""
        path = Path(path)
        if FORMAT_VERSION_KEY in arrays:
            raise DataError(f"'{FORMAT_VERSION_KEY}' is reserved")
        path.parent.mkdir(parents=True, exist_ok=True)
        entries = {FORMAT_VERSION_KEY: np.array([FORMAT_VERSION]), **arrays}

        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
            for name in sorted(entries):
                buffer = io.BytesIO()
                array = np.ascontiguousarray(entries[name], dtype="<f8")
                np.lib.format.write_array(buffer, array, allow_pickle=False)
                info = zipfile.ZipInfo(f"{name}.npy", date_time=ZIP_EPOCH)
                info.compress_type = zipfile.ZIP_STORED
                info.external_attr = 0o644 << 16
                archive.writestr(info, buffer.getvalue())

        logger.info("Checkpoint saved", extra={"path": str(path), "entries": len(arrays)})
        return path

    def load(self, path: Path) -> dict[str, np.ndarray]:
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as archive:
                arrays = {name: np.array(archive[name], dtype=np.float64) for name in archive.files}
        except (OSError, ValueError, zipfile.BadZipFile) as exc:
            raise DataError(f"unreadable checkpoint {path}: {exc}") from exc

        version = arrays.pop(FORMAT_VERSION_KEY, None)
        if version is None or version.size != 1 or float(version[0]) != FORMAT_VERSION:
            raise DataError(f"{path} is not a version {FORMAT_VERSION:g} checkpoint")
        return arrays
