"""
Application Layer: Data Pipeline

Frame subsampling, no-tool undersampling, video-level splitting, mean-image
centering and class-frequency counting. Everything here is a pure function
of its inputs and seed.
"""

import itertools
import logging
import math
from typing import Iterable, Literal, Sequence, Union

import numpy as np

from app.domain.entities import DatasetManifest, FrameEntry, MeanImage, SplitPlan, VideoRecord
from app.domain.exceptions import InvalidArgumentError
from app.utils.seeding import stream
from app.utils.validators import require_fraction, require_positive_int

logger = logging.getLogger(__name__)

DEFAULT_EXHAUSTIVE_LIMIT = 50_000
DEFAULT_RESTARTS = 64


# ============ Frame selection ============

def subsample_frames(video: Union[VideoRecord, Sequence[FrameEntry]], stride: int) -> list[FrameEntry]:
    """Keep positions 0, stride, 2*stride, ... of the video's frame ordering."""
    stride = require_positive_int(stride, "stride")
    frames = video.frames if isinstance(video, VideoRecord) else list(video)
    return frames[::stride]


def subsample_per_video(frames: Sequence[FrameEntry], stride: int) -> list[FrameEntry]:
    """Apply subsample_frames within each video of a mixed frame list."""
    by_video: dict[str, list[FrameEntry]] = {}
    for frame in frames:
        by_video.setdefault(frame.video_id, []).append(frame)
    return [f for video_frames in by_video.values() for f in subsample_frames(video_frames, stride)]


def undersample_empty(frames: Sequence[FrameEntry], ratio: float, seed: int) -> list[FrameEntry]:
    """
    Reduce frames without any tool to round(ratio * count), sampled uniformly
    without replacement; frames showing a tool are always kept. Order is preserved.
    """
    ratio = require_fraction(ratio, "ratio")
    frames = list(frames)
    empty = [i for i, f in enumerate(frames) if f.labels.is_empty]
    keep_count = math.floor(ratio * len(empty) + 0.5)
    rng = stream("undersample", seed)
    kept = set(rng.choice(len(empty), size=keep_count, replace=False).tolist()) if empty else set()
    dropped = {index for position, index in enumerate(empty) if position not in kept}
    return [f for i, f in enumerate(frames) if i not in dropped]


def filter_min_tools(frames: Iterable[FrameEntry], min_tools: int) -> list[FrameEntry]:
    """Frames showing at least `min_tools` tools."""
    return [f for f in frames if f.labels.num_tools >= min_tools]


def restrict_labels(frames: Iterable[FrameEntry], indices: Sequence[int]) -> list[FrameEntry]:
    """Keep only the label columns in `indices` (the tools the network is trained on)."""
    return [
        FrameEntry(f.video_id, f.frame_index, f.image_path, f.labels.select(list(indices)))
        for f in frames
    ]


def select_training_frames(frames: Sequence[FrameEntry], stride: int, ratio: float, seed: int,
                           undersample_after_stride: bool = True, min_tools: int = 0) -> list[FrameEntry]:
    """Stride subsampling and empty-frame undersampling in the configured order."""
    if undersample_after_stride:
        selected = undersample_empty(subsample_per_video(frames, stride), ratio, seed)
    else:
        selected = subsample_per_video(undersample_empty(frames, ratio, seed), stride)
    if min_tools > 0:
        selected = filter_min_tools(selected, min_tools)
    return selected


# ============ Video-level split ============

def _split_score(incidence: np.ndarray, val_mask: np.ndarray) -> tuple[int, int]:
    train_counts = incidence[~val_mask].sum(axis=0)
    val_counts = incidence[val_mask].sum(axis=0)
    covered = int(np.count_nonzero((train_counts > 0) & (val_counts > 0)))
    balance = int(np.minimum(train_counts, val_counts).sum())
    return covered, balance


def _exhaustive_split(incidence: np.ndarray, n_val: int, order: np.ndarray) -> np.ndarray:
    best_mask, best_score = None, None
    for combo in itertools.combinations(order, n_val):
        mask = np.zeros(incidence.shape[0], dtype=bool)
        mask[list(combo)] = True
        score = _split_score(incidence, mask)
        if best_score is None or score > best_score:
            best_mask, best_score = mask, score
    return best_mask


def _local_search_split(incidence: np.ndarray, n_val: int, rng: np.random.Generator, restarts: int) -> np.ndarray:
    num_videos = incidence.shape[0]
    best_mask, best_score = None, None
    for _ in range(restarts):
        mask = np.zeros(num_videos, dtype=bool)
        mask[rng.choice(num_videos, size=n_val, replace=False)] = True
        score = _split_score(incidence, mask)
        improved = True
        while improved:
            improved = False
            swap, swap_score = None, score
            for out in np.flatnonzero(mask):
                for into in np.flatnonzero(~mask):
                    candidate = mask.copy()
                    candidate[out], candidate[into] = False, True
                    candidate_score = _split_score(incidence, candidate)
                    if candidate_score > swap_score:
                        swap, swap_score = candidate, candidate_score
            if swap is not None:
                mask, score, improved = swap, swap_score, True
        if best_score is None or score > best_score:
            best_mask, best_score = mask, score
    return best_mask


def plan_split(manifest: DatasetManifest, n_val_videos: int, seed: int,
               exhaustive_limit: int = DEFAULT_EXHAUSTIVE_LIMIT, restarts: int = DEFAULT_RESTARTS) -> SplitPlan:
    """
    Choose validation videos maximizing (#tools on both sides, sum of per-tool
    min(train videos, val videos)). Enumerates every split when there are at
    most `exhaustive_limit` of them, else uses seeded restarts with swap
    local search. Tools that still miss a side are excluded.
    """
    num_videos = len(manifest.videos)
    if not 1 <= n_val_videos < num_videos:
        raise InvalidArgumentError(
            f"n_val_videos must be in [1, {num_videos - 1}] for {num_videos} videos, got {n_val_videos}"
        )
    incidence = manifest.tool_video_incidence()
    rng = stream("split", seed)
    if math.comb(num_videos, n_val_videos) <= exhaustive_limit:
        val_mask = _exhaustive_split(incidence, n_val_videos, rng.permutation(num_videos))
        method = "exhaustive"
    else:
        val_mask = _local_search_split(incidence, n_val_videos, rng, restarts)
        method = "local_search"

    train_counts = incidence[~val_mask].sum(axis=0)
    val_counts = incidence[val_mask].sum(axis=0)
    excluded = tuple(
        name for t, name in enumerate(manifest.tool_names) if train_counts[t] == 0 or val_counts[t] == 0
    )
    ids = manifest.video_ids
    plan = SplitPlan(
        train_video_ids=tuple(v for v, is_val in zip(ids, val_mask) if not is_val),
        val_video_ids=tuple(v for v, is_val in zip(ids, val_mask) if is_val),
        excluded_tools=excluded,
    )
    logger.info(
        "Split planned",
        extra={"method": method, "val_videos": list(plan.val_video_ids), "excluded_tools": list(excluded)},
    )
    return plan


def active_tool_indices(manifest: DatasetManifest, plan: SplitPlan) -> list[int]:
    excluded = set(plan.excluded_tools)
    return [i for i, name in enumerate(manifest.tool_names) if name not in excluded]


# ============ Centering ============

def compute_mean_image(images: Iterable[np.ndarray]) -> MeanImage:
    """Elementwise mean of equally shaped CHW images."""
    total, count, shape = None, 0, None
    for image in images:
        image = np.asarray(image, dtype=np.float64)
        if shape is None:
            shape, total = image.shape, np.zeros(image.shape)
        elif image.shape != shape:
            raise InvalidArgumentError(f"image shape {image.shape} differs from {shape}")
        total += image
        count += 1
    if count == 0:
        raise InvalidArgumentError("cannot compute a mean image of an empty training set")
    return MeanImage(pixels=total / count)


def center(image: np.ndarray, mean: MeanImage) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != mean.pixels.shape:
        raise InvalidArgumentError(f"image {image.shape} does not match mean image {mean.pixels.shape}")
    return image - mean.pixels


# ============ Class frequencies ============

def class_frequencies(frames: Sequence[FrameEntry], source: Literal["frames", "videos"] = "frames") -> np.ndarray:
    """
    Positive counts per class, masked cells excluded: number of frames, or
    number of distinct videos with at least one positive frame.
    """
    if not frames:
        raise InvalidArgumentError("no frames to count")
    present = np.array([f.labels.present for f in frames], dtype=bool)
    evaluated = np.array([f.labels.ignore_mask for f in frames], dtype=bool)
    positive = present & evaluated
    if source == "frames":
        return positive.sum(axis=0).astype(np.float64)
    if source != "videos":
        raise InvalidArgumentError(f"unknown frequency source {source!r}")
    videos = np.array([f.video_id for f in frames])
    return np.array(
        [len(set(videos[positive[:, i]])) for i in range(positive.shape[1])], dtype=np.float64
    )
