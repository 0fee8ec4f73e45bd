"""
Application Layer: Training-time augmentation

Fixed order: scale + random crop -> horizontal flip -> PCA color shift ->
rotation about the center. Images are HxWx3 float arrays.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from skimage import transform

from app.application.dtos import AugmentationParams
from app.domain.entities import ColorPca
from app.domain.exceptions import InvalidArgumentError
from app.utils.validators import require_image


@dataclass(frozen=True)
class AugmentationDraw:
    """All random choices for one augmented image."""
    offset_x: int
    offset_y: int
    flip: bool
    alphas: np.ndarray
    angle: float

    @classmethod
    def identity(cls) -> "AugmentationDraw":
        return cls(offset_x=0, offset_y=0, flip=False, alphas=np.zeros(3), angle=0.0)


def offset_range(params: AugmentationParams) -> tuple[tuple[int, int], tuple[int, int]]:
    """Inclusive ((x_min, x_max), (y_min, y_max)) crop offsets."""
    slack_x = params.scale_width - params.crop_width
    slack_y = params.scale_height - params.crop_height
    if slack_x < 0 or slack_y < 0:
        raise InvalidArgumentError(
            f"crop {params.crop_width}x{params.crop_height} larger than "
            f"scaled image {params.scale_width}x{params.scale_height}"
        )
    return (0, slack_x), (0, slack_y)


def scale(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize."""
    image = require_image(image)
    if image.shape[:2] == (height, width):
        return image.copy()
    return transform.resize(
        image, (height, width, 3), order=1, mode="edge", anti_aliasing=False, preserve_range=True
    )


def crop(image: np.ndarray, offset_x: int, offset_y: int, width: int, height: int) -> np.ndarray:
    h, w = image.shape[:2]
    if offset_x < 0 or offset_y < 0 or offset_x + width > w or offset_y + height > h:
        raise InvalidArgumentError(f"crop {width}x{height}+{offset_x}+{offset_y} outside {w}x{h}")
    return image[offset_y:offset_y + height, offset_x:offset_x + width].copy()


def flip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def color_shift(image: np.ndarray, pca: ColorPca, alphas: np.ndarray) -> np.ndarray:
    """Add sum_k alpha_k lambda_k e_k to every pixel."""
    shift = pca.eigenvectors @ (np.asarray(alphas, dtype=np.float64) * pca.eigenvalues)
    return image + shift[None, None, :]


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the center, edge pixels replicated."""
    if degrees == 0.0:
        return image.copy()
    return transform.rotate(image, degrees, resize=False, order=1, mode="edge", preserve_range=True)


def draw(params: AugmentationParams, rng: np.random.Generator) -> AugmentationDraw:
    (_, max_x), (_, max_y) = offset_range(params)
    return AugmentationDraw(
        offset_x=int(rng.integers(0, max_x, endpoint=True)),
        offset_y=int(rng.integers(0, max_y, endpoint=True)),
        flip=bool(rng.random() < params.flip_probability),
        alphas=rng.normal(0.0, params.color_alpha_std, size=3),
        angle=float(rng.uniform(-params.max_rotation_degrees, params.max_rotation_degrees)),
    )


def apply(image: np.ndarray, params: AugmentationParams, pca: ColorPca, choice: AugmentationDraw) -> np.ndarray:
    out = scale(image, params.scale_width, params.scale_height)
    out = crop(out, choice.offset_x, choice.offset_y, params.crop_width, params.crop_height)
    if choice.flip:
        out = flip(out)
    out = color_shift(out, pca, choice.alphas)
    return rotate(out, choice.angle)


def augment(image: np.ndarray, params: AugmentationParams, rng: np.random.Generator,
            pca: Optional[ColorPca] = None) -> np.ndarray:
    """One random augmentation; output is always crop_height x crop_width x 3."""
    return apply(image, params, pca or ColorPca.identity(), draw(params, rng))


def center_view(image: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Deterministic view for validation and prediction: scale, then center crop."""
    (_, max_x), (_, max_y) = offset_range(params)
    out = scale(image, params.scale_width, params.scale_height)
    return crop(out, max_x // 2, max_y // 2, params.crop_width, params.crop_height)


def fit_color_pca(images: Sequence[np.ndarray], max_pixels: int, rng: np.random.Generator) -> ColorPca:
    """Eigenpairs of the RGB covariance over at most `max_pixels` pixels sampled evenly across images."""
    if len(images) == 0:
        raise InvalidArgumentError("cannot fit color PCA without images")
    per_image = max(1, math.ceil(max_pixels / len(images)))
    samples = []
    for image in images:
        flat = require_image(image).reshape(-1, 3)
        if flat.shape[0] > per_image:
            flat = flat[np.sort(rng.choice(flat.shape[0], size=per_image, replace=False))]
        samples.append(flat)
    pixels = np.concatenate(samples, axis=0)
    if pixels.shape[0] > max_pixels:
        pixels = pixels[np.sort(rng.choice(pixels.shape[0], size=max_pixels, replace=False))]
    if pixels.shape[0] < 2:
        return ColorPca.identity()
    eigenvalues, eigenvectors = np.linalg.eigh(np.cov(pixels, rowvar=False))
    return ColorPca(eigenvalues=np.clip(eigenvalues, 0.0, None), eigenvectors=eigenvectors)
