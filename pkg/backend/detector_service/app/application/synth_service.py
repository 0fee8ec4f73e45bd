"""
Application Layer: Synthetic surgical-video generator

Each video is a sequence of frames of a textured "eye" with thin elongated
tools drawn on top. A tool is visible for contiguous episodes whose lengths
are geometric with a class-specific mean, so per-frame prevalence and
per-video coverage are set independently. Labels are exact by construction:
a cell is 1 iff the tool was drawn.

Every video draws from its own seeded streams; videos render in parallel.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw
from skimage import transform

from app.application.dtos import GeneratorConfig
from app.core.config import settings
from app.domain.entities import DatasetManifest
from app.domain.exceptions import InvalidArgumentError
from app.domain.interfaces import IImageStore, IManifestRepository
from app.utils.seeding import stream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToolShape:
    """Drawing recipe: `kind` selects the geometry; length/width are fractions of image width."""
    name: str
    kind: str
    color: tuple[int, int, int]
    length: float
    width: float


TARGET_TOOLS = (
    ToolShape("cannula", "line", (235, 235, 245), 0.45, 0.035),
    ToolShape("forceps", "fork", (230, 220, 90), 0.50, 0.035),
    ToolShape("micromanipulator", "hook", (90, 210, 230), 0.45, 0.035),
    ToolShape("knife", "wedge", (210, 210, 210), 0.40, 0.05),
    ToolShape("spatula", "spatula", (120, 230, 120), 0.45, 0.04),
    ToolShape("aspiration_handpiece", "tube", (250, 250, 160), 0.55, 0.06),
    ToolShape("implant_injector", "double", (160, 120, 240), 0.50, 0.035),
    ToolShape("capsulorhexis_cystotome", "bent", (250, 170, 60), 0.45, 0.03),
    ToolShape("irrigation_cannula", "dotted", (60, 160, 250), 0.50, 0.04),
    ToolShape("chopper", "cross", (240, 120, 200), 0.45, 0.035),
    ToolShape("lens_hook", "ring", (180, 250, 220), 0.40, 0.03),
    ToolShape("marker", "zigzag", (250, 90, 90), 0.45, 0.035),
)

SOURCE_TOOLS = (
    ToolShape("src_disc", "disc", (240, 240, 80), 0.30, 0.0),
    ToolShape("src_square", "square", (80, 240, 240), 0.30, 0.0),
    ToolShape("src_triangle", "triangle", (240, 80, 240), 0.32, 0.0),
    ToolShape("src_pentagon", "pentagon", (120, 240, 120), 0.30, 0.0),
    ToolShape("src_hexagon", "hexagon", (240, 160, 80), 0.30, 0.0),
    ToolShape("src_star", "star", (250, 250, 250), 0.34, 0.0),
    ToolShape("src_annulus", "annulus", (100, 150, 250), 0.30, 0.06),
    ToolShape("src_diamond", "diamond", (250, 120, 120), 0.30, 0.0),
    ToolShape("src_plus", "plus", (160, 250, 160), 0.30, 0.08),
    ToolShape("src_arc", "arc", (250, 200, 120), 0.34, 0.06),
    ToolShape("src_dots", "dots", (200, 200, 250), 0.30, 0.0),
    ToolShape("src_checker", "checker", (250, 250, 200), 0.28, 0.0),
)

VIDEO_ID_PATTERN = "video{index:02d}"


# ============ Labels ============

def _episode_track(rng: np.random.Generator, num_frames: int, fraction: float, mean_on: float) -> np.ndarray:
    """Alternating off/on runs with geometric lengths; expected on-fraction `fraction`."""
    track = np.zeros(num_frames, dtype=np.int64)
    if fraction <= 0.0:
        return track
    if fraction >= 1.0:
        track[:] = 1
        return track
    mean_on = max(1.0, mean_on)
    mean_off = max(1.0, mean_on * (1.0 - fraction) / fraction)
    on = rng.random() < fraction
    t = 0
    while t < num_frames:
        length = int(rng.geometric(1.0 / (mean_on if on else mean_off)))
        if on:
            track[t:t + length] = 1
        t += length
        on = not on
    if not track.any():
        start = int(rng.integers(num_frames))
        track[start:start + max(1, round(mean_on))] = 1
    return track


def _check_profile(cfg: GeneratorConfig, vocabulary: tuple[ToolShape, ...]) -> None:
    if cfg.num_classes > len(vocabulary):
        raise InvalidArgumentError(f"at most {len(vocabulary)} classes available, got {cfg.num_classes}")
    names = [shape.name for shape in vocabulary[:cfg.num_classes]]
    for name, prevalence, coverage in zip(names, cfg.resolved_prevalence(), cfg.resolved_coverage()):
        if not 0.0 <= prevalence <= 1.0:
            raise InvalidArgumentError(f"class {name}: prevalence {prevalence} outside [0, 1]")
        if not 1 <= coverage <= cfg.num_videos:
            raise InvalidArgumentError(f"class {name}: coverage {coverage} not in [1, {cfg.num_videos}] videos")
        if prevalence * cfg.num_videos / coverage > 1.0:
            raise InvalidArgumentError(
                f"class {name}: prevalence {prevalence} cannot be reached within {coverage} of {cfg.num_videos} videos"
            )


def plan_labels(cfg: GeneratorConfig, vocabulary: tuple[ToolShape, ...] = TARGET_TOOLS,
                namespace: str = "target") -> dict[str, np.ndarray]:
    """video id -> presence matrix [frames, classes]. No images are drawn."""
    _check_profile(cfg, vocabulary)
    c, num_videos = cfg.num_classes, cfg.num_videos
    prevalence = cfg.resolved_prevalence()
    coverage = cfg.resolved_coverage()
    episode_means = cfg.resolved_episode_means()

    covered = np.zeros((num_videos, c), dtype=bool)
    for i in range(c):
        chosen = stream(namespace, "coverage", cfg.seed, i).choice(num_videos, size=coverage[i], replace=False)
        covered[chosen, i] = True

    labels = {}
    for v in range(num_videos):
        video_id = VIDEO_ID_PATTERN.format(index=v + 1)
        rng = stream(namespace, "labels", cfg.seed, video_id)
        tracks = np.zeros((cfg.frames_per_video, c), dtype=np.int64)
        for i in range(c):
            if covered[v, i]:
                fraction = prevalence[i] * num_videos / coverage[i]
                tracks[:, i] = _episode_track(rng, cfg.frames_per_video, fraction, episode_means[i])

        # Crowded frames give way: the class with most frames in this video is removed first,
        # but a class never loses its last frame in a video it covers
        order = sorted(range(c), key=lambda i: (-int(tracks[:, i].sum()), i))
        for t in np.flatnonzero(tracks.sum(axis=1) > cfg.max_simultaneous_tools):
            for i in order:
                if tracks[t].sum() <= cfg.max_simultaneous_tools:
                    break
                if tracks[:, i].sum() > 1:
                    tracks[t, i] = 0
            if tracks[t].sum() > cfg.max_simultaneous_tools:
                raise InvalidArgumentError(
                    f"{video_id} frame {t}: {int(tracks[t].sum())} classes need this frame to keep their "
                    f"coverage but max_simultaneous_tools is {cfg.max_simultaneous_tools}"
                )
        labels[video_id] = tracks
    return labels


def disagreements(cfg: GeneratorConfig, video_id: str, labels: np.ndarray, namespace: str = "target") -> np.ndarray:
    """Second annotator's labels: each cell flipped with probability `annotator_noise`."""
    rng = stream(namespace, "annotator", cfg.seed, video_id)
    flips = rng.random(labels.shape) < cfg.annotator_noise
    return np.where(flips, 1 - labels, labels)


# ============ Rendering ============

def _background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Reddish sclera, iris ring and dark pupil with low-frequency texture, float HxWx3."""
    size = min(width, height)
    yy, xx = np.mgrid[0:height, 0:width]
    cx = width / 2 + rng.normal(0, 0.03 * width)
    cy = height / 2 + rng.normal(0, 0.03 * height)
    radius = np.hypot(xx - cx, yy - cy)

    image = np.empty((height, width, 3))
    image[:] = np.array([160.0, 70.0, 60.0]) + rng.normal(0, 10, 3)
    iris = radius < 0.34 * size
    image[iris] = np.array([110.0, 80.0, 50.0]) + rng.normal(0, 8, 3)
    image[radius < 0.17 * size] = np.array([25.0, 20.0, 20.0])

    coarse = rng.normal(0, 14, (8, 8, 3))
    texture = transform.resize(coarse, (height, width, 3), order=1, mode="edge", anti_aliasing=False)
    return image + texture


def _endpoint(x: float, y: float, angle: float, length: float) -> tuple[float, float]:
    return x + length * math.cos(angle), y + length * math.sin(angle)


def _draw_elongated(draw: ImageDraw.ImageDraw, shape: ToolShape, pose: np.ndarray, size: int) -> None:
    x, y, angle = pose
    length = shape.length * size
    w = max(1, round(shape.width * size))
    tail = _endpoint(x, y, angle, length)
    px, py = -math.sin(angle), math.cos(angle)
    color = shape.color

    if shape.kind == "line":
        draw.line([(x, y), tail], fill=color, width=w)
    elif shape.kind == "fork":
        spread = 1.5 * w
        draw.line([(x + px * spread, y + py * spread), tail], fill=color, width=w)
        draw.line([(x - px * spread, y - py * spread), tail], fill=color, width=w)
    elif shape.kind == "hook":
        draw.line([(x, y), tail], fill=color, width=w)
        draw.line([(x, y), (x + px * 3 * w, y + py * 3 * w)], fill=color, width=w)
    elif shape.kind == "wedge":
        draw.polygon([(x, y), (tail[0] + px * w, tail[1] + py * w), (tail[0] - px * w, tail[1] - py * w)], fill=color)
    elif shape.kind == "spatula":
        draw.line([(x, y), tail], fill=color, width=max(1, w // 2))
        draw.ellipse([x - 1.5 * w, y - 1.5 * w, x + 1.5 * w, y + 1.5 * w], fill=color)
    elif shape.kind == "tube":
        draw.line([(x, y), tail], fill=color, width=w)
        draw.line([(x, y), tail], fill=(90, 90, 90), width=max(1, w // 3))
    elif shape.kind == "double":
        for sign in (1, -1):
            offset = sign * w
            draw.line([(x + px * offset, y + py * offset), (tail[0] + px * offset, tail[1] + py * offset)],
                      fill=color, width=max(1, w // 2 + 1))
    elif shape.kind == "bent":
        knee = _endpoint(x, y, angle, 0.3 * length)
        draw.line([(x, y), knee], fill=color, width=w)
        draw.line([knee, _endpoint(*knee, angle + 0.6, 0.7 * length)], fill=color, width=w)
    elif shape.kind == "dotted":
        steps = 6
        for s in range(0, steps, 2):
            start = _endpoint(x, y, angle, length * s / steps)
            end = _endpoint(x, y, angle, length * (s + 1) / steps)
            draw.line([start, end], fill=color, width=w)
    elif shape.kind == "cross":
        draw.line([(x, y), tail], fill=color, width=w)
        mid = _endpoint(x, y, angle, 0.5 * length)
        draw.line([(mid[0] - px * 3 * w, mid[1] - py * 3 * w), (mid[0] + px * 3 * w, mid[1] + py * 3 * w)],
                  fill=color, width=w)
    elif shape.kind == "ring":
        draw.line([(x, y), tail], fill=color, width=w)
        r = 2.5 * w
        draw.ellipse([x - r, y - r, x + r, y + r], outline=color, width=w)
    elif shape.kind == "zigzag":
        points = [_endpoint(x + px * (w if k % 2 else -w), y + py * (w if k % 2 else -w), angle, length * k / 6)
                  for k in range(7)]
        draw.line(points, fill=color, width=w)
    else:
        raise InvalidArgumentError(f"unknown tool kind {shape.kind!r}")


def _draw_compact(draw: ImageDraw.ImageDraw, shape: ToolShape, pose: np.ndarray, size: int) -> None:
    x, y, angle = pose
    r = max(2.0, 0.5 * shape.length * size)
    degrees = math.degrees(angle)
    color = shape.color
    polygons = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}

    if shape.kind == "disc":
        draw.ellipse([x - r, y - r, x + r, y + r], fill=color)
    elif shape.kind in polygons:
        draw.regular_polygon((x, y, r), polygons[shape.kind], rotation=degrees, fill=color)
    elif shape.kind == "diamond":
        draw.regular_polygon((x, y, r), 4, rotation=45.0, fill=color)
    elif shape.kind == "star":
        points = [_endpoint(x, y, angle + k * math.pi / 5, r if k % 2 == 0 else 0.45 * r) for k in range(10)]
        draw.polygon(points, fill=color)
    elif shape.kind == "annulus":
        draw.ellipse([x - r, y - r, x + r, y + r], outline=color, width=max(1, round(shape.width * size)))
    elif shape.kind == "plus":
        w = max(1, round(shape.width * size))
        draw.line([(x - r, y), (x + r, y)], fill=color, width=w)
        draw.line([(x, y - r), (x, y + r)], fill=color, width=w)
    elif shape.kind == "arc":
        draw.arc([x - r, y - r, x + r, y + r], start=degrees, end=degrees + 200,
                 fill=color, width=max(1, round(shape.width * size)))
    elif shape.kind == "dots":
        d = 0.35 * r
        for k in range(3):
            cx, cy = _endpoint(x, y, angle + 2 * math.pi * k / 3, 0.6 * r)
            draw.ellipse([cx - d, cy - d, cx + d, cy + d], fill=color)
    elif shape.kind == "checker":
        half = r / 2
        draw.rectangle([x - r, y - r, x, y], fill=color)
        draw.rectangle([x, y, x + r, y + r], fill=color)
        draw.rectangle([x - r, y, x, y + r], outline=color)
        draw.rectangle([x - half, y - r, x + half, y - r + 1], fill=color)
    else:
        raise InvalidArgumentError(f"unknown tool kind {shape.kind!r}")


def draw_tool(draw: ImageDraw.ImageDraw, shape: ToolShape, pose: np.ndarray, size: int) -> None:
    """Draw one tool at pose (x, y, angle in radians)."""
    if shape.width > 0 and shape.kind not in {"annulus", "plus", "arc"}:
        _draw_elongated(draw, shape, pose, size)
    else:
        _draw_compact(draw, shape, pose, size)


def render_video(cfg: GeneratorConfig, video_id: str, labels: np.ndarray,
                 vocabulary: tuple[ToolShape, ...], namespace: str = "target") -> list[np.ndarray]:
    """Frames (uint8 HxWx3) for one video; tool poses drift slowly within an episode."""
    width, height = cfg.image_width, cfg.image_height
    size = min(width, height)
    rng = stream(namespace, "render", cfg.seed, video_id)
    background = _background(rng, width, height)
    poses = np.zeros((labels.shape[1], 3))
    frames = []
    for t in range(labels.shape[0]):
        pixels = background + rng.normal(0, 3.0, background.shape)
        image = Image.fromarray(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))
        canvas = ImageDraw.Draw(image)
        for i in range(labels.shape[1]):
            if not labels[t, i]:
                continue
            if t == 0 or not labels[t - 1, i]:
                poses[i] = (rng.uniform(0.25, 0.75) * width, rng.uniform(0.25, 0.75) * height,
                            rng.uniform(0, 2 * math.pi))
            else:
                poses[i, 0] = np.clip(poses[i, 0] + rng.normal(0, 0.01 * width), 0.1 * width, 0.9 * width)
                poses[i, 1] = np.clip(poses[i, 1] + rng.normal(0, 0.01 * height), 0.1 * height, 0.9 * height)
                poses[i, 2] += rng.normal(0, 0.03)
            draw_tool(canvas, vocabulary[i], poses[i], size)
        frames.append(np.asarray(image, dtype=np.uint8))
    return frames


# ============ Service ============

class SynthService:
    """Writes synthetic datasets in the manifest + CSV + PNG layout the pipeline reads."""

    def __init__(self, image_store: IImageStore, manifest_repository: IManifestRepository,
                 workers: Optional[int] = None, frame_filename_pattern: Optional[str] = None):
        self.image_store = image_store
        self.manifest_repository = manifest_repository
        self.workers = workers or settings.workers
        self.frame_filename_pattern = frame_filename_pattern or settings.frame_filename_pattern

    def generate(self, cfg: GeneratorConfig, out_dir: Path) -> DatasetManifest:
        """Target task: surgical-tool-like shapes."""
        return self._generate(cfg, Path(out_dir), TARGET_TOOLS, "target")

    def generate_source_task(self, cfg: GeneratorConfig, out_dir: Path) -> DatasetManifest:
        """Source task for pretraining: compact shapes, class names disjoint from the target task."""
        return self._generate(cfg, Path(out_dir), SOURCE_TOOLS, "source")

    def _generate(self, cfg: GeneratorConfig, out_dir: Path, vocabulary: tuple[ToolShape, ...],
                  namespace: str) -> DatasetManifest:
        labels = plan_labels(cfg, vocabulary, namespace)
        tool_names = [shape.name for shape in vocabulary[:cfg.num_classes]]
        out_dir.mkdir(parents=True, exist_ok=True)

        def write_video(video_id: str) -> dict:
            video_labels = labels[video_id]
            for index, frame in enumerate(render_video(cfg, video_id, video_labels, vocabulary, namespace)):
                self.image_store.write(out_dir / video_id / self.frame_filename_pattern.format(frame_index=index), frame)
            rows = [(index, tuple(int(v) for v in row)) for index, row in enumerate(video_labels)]
            self.manifest_repository.write_annotations(out_dir / f"{video_id}.csv", tool_names, rows)
            entry = {"video_id": video_id, "frames_dir": video_id, "annotations": f"{video_id}.csv"}
            if cfg.annotator_noise > 0:
                second = disagreements(cfg, video_id, video_labels, namespace)
                rows = [(index, tuple(int(v) for v in row)) for index, row in enumerate(second)]
                self.manifest_repository.write_annotations(out_dir / f"{video_id}.secondary.csv", tool_names, rows)
                entry["annotations_secondary"] = f"{video_id}.secondary.csv"
            return entry

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            videos = list(pool.map(write_video, list(labels)))

        manifest_path = out_dir / "manifest.json"
        self.manifest_repository.write_manifest(manifest_path, tool_names, videos)
        logger.info(
            "Synthetic dataset generated",
            extra={"task": namespace, "path": str(manifest_path), "videos": len(videos),
                   "frames": cfg.num_videos * cfg.frames_per_video, "tools": tool_names},
        )
        return self.manifest_repository.load(manifest_path)
