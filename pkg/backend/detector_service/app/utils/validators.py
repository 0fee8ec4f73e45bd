"""
Shared argument checks. All raise InvalidArgumentError.
"""

import numpy as np

from app.domain.exceptions import InvalidArgumentError


def require_positive_int(value: int, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise InvalidArgumentError(f"{name} must be an integer >= 1, got {value!r}")
    return int(value)


def require_fraction(value: float, name: str) -> float:
    """0 < value <= 1"""
    if not 0.0 < value <= 1.0:
        raise InvalidArgumentError(f"{name} must be in (0, 1], got {value!r}")
    return float(value)


def require_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """HxWx3 float image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgumentError(f"{name} must be HxWx3, got {image.shape}")
    return image
