"""
Application Layer: Training and Prediction

Turns a manifest and a run configuration into prepared training data
(split, active tools, frame selection, mean image, color PCA, class weights),
runs the SGD loop and produces validation reports and predictions.

The training log is JSON lines without timestamps; a fixed seed reproduces
it byte for byte.
"""

import json
import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from app.application import augmentation
from app.application.dtos import AppConfig, AugmentationParams, ModelSpec
from app.application.model_zoo import Network, build
from app.application.pipeline_service import (
    active_tool_indices,
    center,
    class_frequencies,
    compute_mean_image,
    plan_split,
    restrict_labels,
    select_training_frames,
)
from app.core.config import settings
from app.domain.entities import AucReport, ColorPca, DatasetManifest, FrameEntry, MeanImage, Mode, SplitPlan
from app.domain.exceptions import ConfigError, DataError, InvalidArgumentError, NumericError
from app.domain.interfaces import IImageStore
from app.domain.losses import ClassWeights, class_weights, lr_at, multilabel_loss
from app.domain.metrics import macro_auc
from app.domain.optim import SgdMomentum
from app.domain.tensor import Tensor, backward
from app.utils.seeding import frame_stream, stream

logger = logging.getLogger(__name__)

MEAN_IMAGE_KEY = "preprocess.mean_image"
METADATA_VERSION = 1


@dataclass
class PreparedData:
    """Everything the loop needs besides the network."""
    tool_names: list[str]
    split: SplitPlan
    train_frames: list[FrameEntry]
    val_frames: list[FrameEntry]
    mean_image: MeanImage
    color_pca: ColorPca
    frequencies: Optional[np.ndarray] = None
    weights: Optional[ClassWeights] = None


@dataclass
class TrainingResult:
    records: list[dict] = field(default_factory=list)
    val_report: Optional[AucReport] = None

    @property
    def final_val_auc(self) -> Optional[float]:
        return None if self.val_report is None else self.val_report.macro


class BatchSampler:
    """Shuffled passes over the training frames; returns indices and the pass number of each."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self.epoch = -1
        self._order: Optional[np.ndarray] = None
        self._position = 0

    def next(self) -> tuple[list[int], list[int]]:
        indices, epochs = [], []
        while len(indices) < self.batch_size:
            if self._order is None or self._position >= self.size:
                self._order = self.rng.permutation(self.size)
                self._position = 0
                self.epoch += 1
            indices.append(int(self._order[self._position]))
            epochs.append(self.epoch)
            self._position += 1
        return indices, epochs


def _labels(frames: Sequence[FrameEntry]) -> tuple[np.ndarray, np.ndarray]:
    present = np.array([f.labels.present for f in frames], dtype=np.float64)
    mask = np.array([f.labels.ignore_mask for f in frames], dtype=np.float64)
    return present, mask


class TrainingService:
    """Prepares data, trains networks, validates and predicts."""

    def __init__(self, image_store: IImageStore, workers: Optional[int] = None, cache_size: Optional[int] = None):
        self.image_store = image_store
        self.workers = workers or settings.workers
        self.cache_size = settings.image_cache_size if cache_size is None else cache_size
        if self.cache_size < 1:
            raise InvalidArgumentError(f"image cache size must be >= 1, got {self.cache_size}")
        self._images: OrderedDict[Path, np.ndarray] = OrderedDict()
        self._images_lock = threading.Lock()

    # ============ Images ============

    def image(self, frame: FrameEntry) -> np.ndarray:
        """Original-resolution HxWx3 image in [0, 1]; recently used frames stay decoded."""
        path = frame.image_path
        with self._images_lock:
            cached = self._images.get(path)
            if cached is not None:
                self._images.move_to_end(path)
                return cached
        cached = self.image_store.read(path)
        with self._images_lock:
            self._images[path] = cached
            self._images.move_to_end(path)
            while len(self._images) > self.cache_size:
                self._images.popitem(last=False)
        return cached

    @property
    def cached_images(self) -> int:
        return len(self._images)

    def preprocess(self, frames: Sequence[FrameEntry], mean_image: MeanImage,
                   params: AugmentationParams) -> np.ndarray:
        """Centered center-views [N, 3, H, W], as used for validation and prediction."""
        def one(frame: FrameEntry) -> np.ndarray:
            return center(augmentation.center_view(self.image(frame), params).transpose(2, 0, 1), mean_image)

        if not frames:
            return np.zeros((0, 3, params.crop_height, params.crop_width))
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return np.stack(list(pool.map(one, frames)))

    def _training_batch(self, frames: Sequence[FrameEntry], epochs: Sequence[int], data: PreparedData,
                        params: AugmentationParams, seed: int) -> np.ndarray:
        def one(item: tuple[FrameEntry, int]) -> np.ndarray:
            frame, epoch = item
            image = self.image(frame)
            if params.enabled:
                rng = frame_stream(seed, epoch, frame.video_id, frame.frame_index)
                view = augmentation.augment(image, params, rng, data.color_pca)
            else:
                view = augmentation.center_view(image, params)
            return center(view.transpose(2, 0, 1), data.mean_image)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return np.stack(list(pool.map(one, zip(frames, epochs))))

    # ============ Preparation ============

    def resolve_split(self, manifest: DatasetManifest, config: AppConfig,
                      split_plan: Optional[SplitPlan] = None) -> SplitPlan:
        if split_plan is not None:
            unknown = set(split_plan.train_video_ids + split_plan.val_video_ids) - set(manifest.video_ids)
            if unknown:
                raise DataError(f"split refers to unknown videos: {sorted(unknown)}")
            return split_plan
        split = config.split
        if split.mode == "none":
            return SplitPlan(train_video_ids=tuple(manifest.video_ids), val_video_ids=())
        if split.mode == "file":
            raise ConfigError("a split plan file is required when split.mode is 'file'", key_path="split.plan_file")
        try:
            return plan_split(manifest, split.n_val_videos, split.seed, split.exhaustive_limit, split.restarts)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), key_path="split.n_val_videos") from exc

    def prepare(self, manifest: DatasetManifest, config: AppConfig,
                split_plan: Optional[SplitPlan] = None) -> PreparedData:
        dataset = config.dataset
        params = dataset.augmentation
        try:
            augmentation.offset_range(params)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), key_path="dataset.augmentation") from exc

        plan = self.resolve_split(manifest, config, split_plan)
        active = active_tool_indices(manifest, plan)
        if not active:
            raise DataError("no tool appears in both training and validation videos")
        tool_names = [manifest.tool_names[i] for i in active]

        train_frames = select_training_frames(
            restrict_labels(manifest.frames(list(plan.train_video_ids)), active),
            stride=dataset.frame_stride, ratio=dataset.undersample_ratio, seed=dataset.seed,
            undersample_after_stride=dataset.undersample_after_stride, min_tools=dataset.min_tools_per_frame,
        )
        if not train_frames:
            raise DataError("frame selection left no training frames")
        val_frames = restrict_labels(manifest.frames(list(plan.val_video_ids)), active)

        mean_image = compute_mean_image(
            augmentation.center_view(self.image(f), params).transpose(2, 0, 1) for f in train_frames
        )
        color_pca = augmentation.fit_color_pca(
            [self.image(f) for f in train_frames], dataset.pca_max_pixels, stream("pca", config.split.seed)
        )

        frequencies = weights = None
        if config.train.weighted:
            frequencies = class_frequencies(train_frames, config.train.frequency_source)
            missing = [name for name, count in zip(tool_names, frequencies) if count <= 0]
            if missing:
                raise ConfigError(
                    f"class weights undefined, no positive training examples for {missing}", key_path="train.weighted"
                )
            weights = class_weights(frequencies)

        logger.info(
            "Training data prepared",
            extra={"train_frames": len(train_frames), "val_frames": len(val_frames), "tools": tool_names,
                   "excluded_tools": list(plan.excluded_tools)},
        )
        return PreparedData(tool_names, plan, train_frames, val_frames, mean_image, color_pca, frequencies, weights)

    # ============ Training ============

    def _check_network(self, network: Network, data: PreparedData, params: AugmentationParams) -> None:
        spec = network.spec
        if spec.num_classes != len(data.tool_names):
            raise ConfigError(
                f"network has {spec.num_classes} outputs but {len(data.tool_names)} tools are active",
                key_path="model.num_classes",
            )
        if (spec.input_height, spec.input_width) != (params.crop_height, params.crop_width):
            raise ConfigError(
                f"network input {spec.input_height}x{spec.input_width} differs from crop "
                f"{params.crop_height}x{params.crop_width}",
                key_path="model.input_height",
            )

    def train(self, network: Network, data: PreparedData, config: AppConfig,
              log_path: Optional[Path] = None) -> TrainingResult:
        """
        Run `train.iterations` SGD steps. Every `log_every` steps (and at the
        end) a record with iteration, lr and the mean batch loss since the
        previous record is logged; every `val_every` steps and at the end the
        validation macro AUC is added when validation frames exist.
        """
        cfg = config.train
        params = config.dataset.augmentation
        self._check_network(network, data, params)

        optimizer = SgdMomentum(
            network.parameters(), schedule=lambda n: lr_at(n, cfg.lr0, cfg.decay), momentum=cfg.momentum, l2=cfg.l2
        )
        sampler = BatchSampler(len(data.train_frames), cfg.batch_size, stream("batches", cfg.seed))
        val_images = self.preprocess(data.val_frames, data.mean_image, params) if data.val_frames else None

        result = TrainingResult()
        log_file = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log_file = log_path.open("w", encoding="utf-8")
        try:
            losses: list[float] = []
            for iteration in range(1, cfg.iterations + 1):
                indices, epochs = sampler.next()
                frames = [data.train_frames[i] for i in indices]
                x = Tensor(self._training_batch(frames, epochs, data, params, cfg.seed))
                present, mask = _labels(frames)

                outputs = network.forward(x, Mode.TRAIN)
                loss, grad = multilabel_loss(present, outputs, data.weights, mask)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss at iteration {iteration}")
                lr = optimizer.step(backward(outputs, grad))
                losses.append(loss)

                last = iteration == cfg.iterations
                validate = val_images is not None and (iteration % cfg.val_every == 0 or last)
                if iteration % cfg.log_every == 0 or validate or last:
                    record = {"iteration": iteration, "lr": lr, "loss": float(np.mean(losses))}
                    losses = []
                    if validate:
                        result.val_report = self.evaluate(network, data.val_frames, data, params,
                                                          images=val_images, batch_size=config.eval.batch_size)
                        record["val_auc"] = result.val_report.macro
                    result.records.append(record)
                    if log_file is not None:
                        log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    logger.info("Training progress", extra=record)
        finally:
            if log_file is not None:
                log_file.close()

        if val_images is not None and result.val_report is None:
            result.val_report = self.evaluate(network, data.val_frames, data, params,
                                              images=val_images, batch_size=config.eval.batch_size)
        return result

    # ============ Evaluation and prediction ============

    def evaluate(self, network: Network, frames: Sequence[FrameEntry], data: PreparedData,
                 params: AugmentationParams, images: Optional[np.ndarray] = None, batch_size: int = 32) -> AucReport:
        if images is None:
            images = self.preprocess(frames, data.mean_image, params)
        scores = network.predict(images, batch_size=batch_size)
        present, mask = _labels(frames)
        return macro_auc(scores, present, mask, data.tool_names)

    def predict(self, network: Network, frames: Sequence[FrameEntry], mean_image: MeanImage,
                params: AugmentationParams, batch_size: int = 32) -> np.ndarray:
        """Scores [N, c] for the given frames."""
        return network.predict(self.preprocess(frames, mean_image, params), batch_size=batch_size)


# ============ Checkpoint contents ============

def checkpoint_arrays(network: Network, data: PreparedData) -> dict[str, np.ndarray]:
    return {**network.state_dict(), MEAN_IMAGE_KEY: data.mean_image.pixels}


def checkpoint_metadata(config: AppConfig, spec: ModelSpec, data: PreparedData) -> dict:
    """Sidecar JSON: what is needed to rebuild the network and its preprocessing."""
    return {
        "format_version": METADATA_VERSION,
        "model": spec.model_dump(mode="json"),
        "tool_names": list(data.tool_names),
        "augmentation": config.dataset.augmentation.model_dump(mode="json"),
        "split": data.split.to_dict(),
        "config": config.model_dump(mode="json"),
    }


def restore(arrays: dict[str, np.ndarray], metadata: dict) -> tuple[Network, MeanImage, AugmentationParams, list[str]]:
    """Rebuild a trained network and its preprocessing from checkpoint contents."""
    try:
        if metadata.get("format_version") != METADATA_VERSION:
            raise DataError(f"unsupported checkpoint metadata version {metadata.get('format_version')!r}")
        spec = ModelSpec.model_validate(metadata["model"])
        params = AugmentationParams.model_validate(metadata["augmentation"])
        tool_names = list(metadata["tool_names"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"invalid checkpoint metadata: {exc}") from exc
    if MEAN_IMAGE_KEY not in arrays:
        raise DataError(f"checkpoint lacks {MEAN_IMAGE_KEY}")
    network = build(spec)
    network.load_state(arrays)
    return network, MeanImage(pixels=arrays[MEAN_IMAGE_KEY]), params, tool_names
