"""
Infrastructure Layer: Frame Image Store

RGB frames are 8-bit PNG files on disk and float64 arrays in [0, 1] in memory.
"""

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.domain.exceptions import DataError, InvalidArgumentError
from app.domain.interfaces import IImageStore


class PillowImageStore(IImageStore):
    """Pillow-backed image store."""

    def read(self, path: Path) -> np.ndarray:
        try:
            with Image.open(path) as image:
                pixels = np.asarray(image.convert("RGB"), dtype=np.float64)
        except FileNotFoundError as exc:
            raise DataError(f"frame image not found: {path}") from exc
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"unreadable frame image {path}: {exc}") from exc
        return pixels / 255.0

    def write(self, path: Path, image: np.ndarray) -> None:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InvalidArgumentError(f"expected an HxWx3 image, got {image.shape}")
        if image.dtype != np.uint8:
            raise InvalidArgumentError(f"expected uint8 pixels, got {image.dtype}")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image).save(path, format="PNG")
