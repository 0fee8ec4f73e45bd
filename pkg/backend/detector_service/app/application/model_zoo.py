"""
Application Layer: Model Zoo

Builds the two network families from a ModelSpec:

    FT   full backbone + head, the first k conv layers frozen
    FFE  first k backbone conv layers (all frozen) + optional custom part + head

Parameter paths are prefixed `backbone.`, `custom.` and `head.`, so a source
checkpoint restricted to `backbone.` entries loads into either family.
"""

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

from app.application.dtos import AppConfig, AugmentationParams, ModelSpec, SplitConfig
from app.domain.entities import DatasetManifest, Family, HeadType, Mode
from app.domain.exceptions import CheckpointLoadError, DataError, InvalidArgumentError
from app.domain.layers import AvgFcHead, ConvMaxHead, CustomPart, MiniResNet, Module, Parameter
from app.domain.tensor import Tensor, no_grad
from app.utils.seeding import stream

if TYPE_CHECKING:
    from app.application.training_service import TrainingService

logger = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."


class Network:
    """Backbone, optional custom part and head, run in that order."""

    def __init__(self, spec: ModelSpec, backbone: MiniResNet, head: Module,
                 custom_part: Optional[CustomPart] = None):
        self.spec = spec
        self.backbone = backbone
        self.custom_part = custom_part
        self.head = head
        paths = [p.path for p in self.parameters()] + list(self.buffers())
        duplicates = sorted({p for p in paths if paths.count(p) > 1})
        if duplicates:
            raise InvalidArgumentError(f"duplicate parameter paths: {duplicates}")

    def modules(self) -> list[Module]:
        return [m for m in (self.backbone, self.custom_part, self.head) if m is not None]

    def parameters(self) -> list[Parameter]:
        return [p for module in self.modules() for p in module.parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.frozen]

    def buffers(self) -> dict[str, np.ndarray]:
        result: dict[str, np.ndarray] = {}
        for module in self.modules():
            result.update(module.buffers())
        return result

    def features(self, x: Tensor, mode: Mode) -> Tensor:
        x = self.backbone(x, mode)
        if self.custom_part is not None:
            x = self.custom_part(x, mode)
        return x

    def forward(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        return head_forward(self.features(x, mode), self.head, mode)

    def __call__(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        return self.forward(x, mode)

    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Inference-mode scores [N, c] for centered images [N, 3, H, W]; records no graph."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise InvalidArgumentError(f"expected [N, 3, H, W] images, got {images.shape}")
        outputs = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                outputs.append(self.forward(Tensor(images[start:start + batch_size]), Mode.INFERENCE).numpy())
        if not outputs:
            return np.zeros((0, self.spec.num_classes))
        return np.concatenate(outputs, axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and batch-norm running statistics, keyed by path."""
        state = {p.path: np.array(p.value) for p in self.parameters()}
        state.update({path: np.array(value) for path, value in self.buffers().items()})
        return state

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """
        Copy every entry under `prefix` from `arrays` into the network.

        Raises:
            CheckpointLoadError: some required path is absent (all missing paths listed)
            DataError: a stored array has the wrong shape
        """
        params = {p.path: p for p in self.parameters() if p.path.startswith(prefix)}
        buffers = {path: value for path, value in self.buffers().items() if path.startswith(prefix)}
        missing = sorted(path for path in (*params, *buffers) if path not in arrays)
        if missing:
            raise CheckpointLoadError(missing)
        for path, param in params.items():
            value = np.asarray(arrays[path], dtype=np.float64)
            if value.shape != param.value.shape:
                raise DataError(f"{path}: checkpoint shape {value.shape} != network shape {param.value.shape}")
            param.value = np.array(value)
        for path, current in buffers.items():
            value = np.asarray(arrays[path], dtype=np.float64)
            if value.shape != current.shape:
                raise DataError(f"{path}: checkpoint shape {value.shape} != network shape {current.shape}")
            for module in self.modules():
                if module.load_buffer(path, value):
                    break


def head_forward(features: Tensor, head: Module, mode: Mode = Mode.INFERENCE) -> Tensor:
    """Map feature maps [N, C, H, W] to sigmoid scores [N, c] with the given head."""
    return head(features, mode)


def build(spec: ModelSpec, seed: int = 0, pretrained: Optional[dict[str, np.ndarray]] = None) -> Network:
    """
    Construct a network; He-uniform weights from a seed-keyed stream, then
    (optionally) backbone values from `pretrained`, then freezing.
    """
    spec.validate_structure()
    rng = stream("init", seed)
    upto = spec.k if spec.family is Family.FFE else None
    backbone = MiniResNet(
        "backbone", rng, widths=tuple(spec.backbone_widths), strides=tuple(spec.backbone_strides),
        blocks_per_stage=spec.blocks_per_stage, upto=upto,
    )
    channels = backbone.out_channels
    custom_part = None
    if spec.family is Family.FFE and spec.include_custom_part:
        custom_part = CustomPart(
            "custom", channels, rng, features=spec.custom_features,
            repetitions=spec.custom_repetitions, pool_kernel=spec.custom_pool, pool_stride=spec.custom_pool,
        )
        channels = spec.custom_features
    if spec.head is HeadType.AVG_FC:
        head: Module = AvgFcHead("head", channels, spec.num_classes, rng)
    else:
        head = ConvMaxHead("head", channels, spec.num_classes, rng, kernel=spec.conv_max_kernel)

    network = Network(spec, backbone, head, custom_part)
    if pretrained is not None:
        network.load_state(pretrained, prefix=BACKBONE_PREFIX)

    if spec.family is Family.FT:
        backbone.freeze_leading(spec.k)
    else:
        backbone.set_frozen(True)

    logger.debug(
        "Network built",
        extra={"model": spec.name, "parameters": len(network.parameters()),
               "frozen": len(network.frozen_parameters()), "pretrained": pretrained is not None},
    )
    return network


def resolve_spec(spec: ModelSpec, num_classes: int, augmentation: AugmentationParams) -> ModelSpec:
    """The model spec actually built: one output per active tool, input at crop resolution."""
    return spec.model_copy(update={
        "num_classes": num_classes,
        "input_height": augmentation.crop_height,
        "input_width": augmentation.crop_width,
    })


def backbone_state(network: Network) -> dict[str, np.ndarray]:
    return {path: value for path, value in network.state_dict().items() if path.startswith(BACKBONE_PREFIX)}


def pretrain_source(spec: ModelSpec, source_manifest: DatasetManifest, config: AppConfig,
                    trainer: "TrainingService", log_path: Optional[Path] = None) -> dict[str, np.ndarray]:
    """
    Train FT(k=0, avg-fc) on the source task with all videos (no validation)
    and return its backbone: parameters and running statistics only.
    """
    source_spec = spec.model_copy(update={"family": Family.FT, "k": 0, "head": HeadType.AVG_FC})
    source_config = config.model_copy(update={
        "split": SplitConfig(mode="none", seed=config.split.seed),
        "train": config.train.model_copy(update={"init": "random", "pretrained_checkpoint": None, "weighted": False}),
    })
    data = trainer.prepare(source_manifest, source_config)
    source_spec = resolve_spec(source_spec, len(data.tool_names), source_config.dataset.augmentation)
    source_config = source_config.model_copy(update={"model": source_spec})
    network = build(source_spec, seed=config.train.seed)
    trainer.train(network, data, source_config, log_path=log_path)
    logger.info("Source pretraining finished", extra={"tools": source_manifest.num_classes})
    return backbone_state(network)
