"""
Domain Layer: Network building blocks

Parameters are named by dotted paths ("backbone.block3.conv1.weight").
Each forward pass wraps the current parameter values in leaf tensors, so
`backward` reports gradients keyed by those same paths. Frozen parameters
become leaves without gradients, and frozen batch-norm layers always run
on their running statistics.
"""

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from app.domain import ops
from app.domain.entities import Mode
from app.domain.exceptions import InvalidArgumentError
from app.domain.ops import RunningStats
from app.domain.tensor import Tensor


@dataclass
class Parameter:
    """A trainable array with its path and frozen flag."""
    path: str
    value: np.ndarray
    frozen: bool = False

    def tensor(self) -> Tensor:
        return Tensor(self.value, requires_grad=not self.frozen, name=self.path)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class: owns parameters, buffers and child modules."""

    def __init__(self, path: str):
        self.path = path

    def children(self) -> list["Module"]:
        return []

    def own_parameters(self) -> list[Parameter]:
        return []

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def parameters(self) -> list[Parameter]:
        params = list(self.own_parameters())
        for child in self.children():
            params.extend(child.parameters())
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        result = dict(self.own_buffers())
        for child in self.children():
            result.update(child.buffers())
        return result

    def load_buffer(self, path: str, value: np.ndarray) -> bool:
        for child in self.children():
            if child.load_buffer(path, value):
                return True
        return False

    def set_frozen(self, frozen: bool = True) -> None:
        for param in self.parameters():
            param.frozen = frozen

    @property
    def frozen(self) -> bool:
        params = self.parameters()
        return bool(params) and all(p.frozen for p in params)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return self.forward(x, mode)


class Conv2dLayer(Module):
    def __init__(self, path: str, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__(path)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(f"{path}.weight", he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(f"{path}.bias", np.zeros(out_channels))

    def own_parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise InvalidArgumentError(
                f"{self.path}: expected {self.in_channels} input channels, got input {x.shape}"
            )
        return ops.conv2d(x, self.weight.tensor(), self.bias.tensor(), stride=self.stride, padding=self.padding)


class BatchNorm2dLayer(Module):
    def __init__(self, path: str, channels: int, momentum: float = ops.BN_MOMENTUM, epsilon: float = ops.BN_EPSILON):
        super().__init__(path)
        self.gamma = Parameter(f"{path}.gamma", np.ones(channels))
        self.beta = Parameter(f"{path}.beta", np.zeros(channels))
        self.running = RunningStats.fresh(channels)
        self.momentum = momentum
        self.epsilon = epsilon

    def own_parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.path}.running_mean": self.running.mean, f"{self.path}.running_var": self.running.var}

    def load_buffer(self, path: str, value: np.ndarray) -> bool:
        if path == f"{self.path}.running_mean":
            self.running.mean = np.array(value, dtype=np.float64)
            return True
        if path == f"{self.path}.running_var":
            self.running.var = np.array(value, dtype=np.float64)
            return True
        return False

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        effective = Mode.INFERENCE if self.frozen else mode
        return ops.batch_norm(
            x, self.gamma.tensor(), self.beta.tensor(), mode=effective, running=self.running,
            momentum=self.momentum, epsilon=self.epsilon,
        )


class ResidualBlock(Module):
    """
    Basic residual block: conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus a
    shortcut (identity, or 1x1 projection + BN when shape changes), then ReLU.
    With `first_conv_only` the block ends after its first conv/BN/ReLU.
    """

    def __init__(self, path: str, in_channels: int, out_channels: int, rng: np.random.Generator,
                 stride: int = 1, first_conv_only: bool = False):
        super().__init__(path)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.first_conv_only = first_conv_only
        self.conv1 = Conv2dLayer(f"{path}.conv1", in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2dLayer(f"{path}.bn1", out_channels)
        self.conv2 = self.bn2 = self.proj = self.proj_bn = None
        if not first_conv_only:
            self.conv2 = Conv2dLayer(f"{path}.conv2", out_channels, out_channels, 3, rng, padding=1)
            self.bn2 = BatchNorm2dLayer(f"{path}.bn2", out_channels)
            if stride != 1 or in_channels != out_channels:
                self.proj = Conv2dLayer(f"{path}.proj", in_channels, out_channels, 1, rng, stride=stride)
                self.proj_bn = BatchNorm2dLayer(f"{path}.proj_bn", out_channels)

    def children(self) -> list[Module]:
        return [m for m in (self.conv1, self.bn1, self.conv2, self.bn2, self.proj, self.proj_bn) if m is not None]

    @property
    def conv_layers(self) -> list[tuple[Conv2dLayer, BatchNorm2dLayer]]:
        """Counted conv layers in order; the projection shortcut is not counted."""
        layers = [(self.conv1, self.bn1)]
        if self.conv2 is not None:
            layers.append((self.conv2, self.bn2))
        return layers

    def shortcut_modules(self) -> list[Module]:
        return [m for m in (self.proj, self.proj_bn) if m is not None]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise InvalidArgumentError(
                f"{self.path}: expected {self.in_channels} input channels, got input {x.shape}"
            )
        out = ops.relu(self.bn1(self.conv1(x, mode), mode))
        if self.first_conv_only:
            return out
        out = self.bn2(self.conv2(out, mode), mode)
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x, mode), mode)
        return ops.relu(ops.add(out, shortcut))


class CustomPart(Module):
    """
    Trainable part appended to a fixed feature extractor: R repetitions of
    [max_pool; 3 x (conv3x3 -> BN -> ReLU)] with F feature maps each.
    """

    CONVS_PER_REPETITION = 3

    def __init__(self, path: str, in_channels: int, rng: np.random.Generator, features: int = 32,
                 repetitions: int = 3, pool_kernel: int = 2, pool_stride: int = 2):
        super().__init__(path)
        if repetitions < 1:
            raise InvalidArgumentError(f"{path}: repetitions must be >= 1, got {repetitions}")
        self.in_channels = in_channels
        self.features = features
        self.repetitions = repetitions
        self.pool_kernel = pool_kernel
        self.pool_stride = pool_stride
        self.stages: list[list[tuple[Conv2dLayer, BatchNorm2dLayer]]] = []
        channels = in_channels
        for r in range(repetitions):
            stage = []
            for i in range(self.CONVS_PER_REPETITION):
                conv = Conv2dLayer(f"{path}.rep{r}.conv{i}", channels, features, 3, rng, padding=1)
                stage.append((conv, BatchNorm2dLayer(f"{path}.rep{r}.bn{i}", features)))
                channels = features
            self.stages.append(stage)

    def children(self) -> list[Module]:
        return [m for stage in self.stages for pair in stage for m in pair]

    def output_extent(self, extent: int) -> int:
        for _ in range(self.repetitions):
            if extent < self.pool_kernel:
                return 0
            extent = (extent - self.pool_kernel) // self.pool_stride + 1
        return extent

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        _, _, h, w = x.shape
        if self.output_extent(h) < 1 or self.output_extent(w) < 1:
            raise InvalidArgumentError(
                f"{self.path}: spatial extent {h}x{w} too small for {self.repetitions} poolings"
            )
        for stage in self.stages:
            x = ops.max_pool(x, self.pool_kernel, self.pool_stride)
            for conv, bn in stage:
                x = ops.relu(bn(conv(x, mode), mode))
        return x


class MiniResNet(Module):
    """
    Residual backbone: stem conv/BN/ReLU followed by stages of basic blocks.
    Conv layers are counted from 1 (the stem); with `upto=k` only the first k
    conv layers are built and the forward pass stops after the k-th.
    """

    def __init__(self, path: str, rng: np.random.Generator, widths: tuple[int, ...] = (8, 16, 32, 64),
                 strides: tuple[int, ...] = (1, 2, 2, 2), blocks_per_stage: int = 2, in_channels: int = 3,
                 upto: Optional[int] = None):
        super().__init__(path)
        if len(widths) != len(strides):
            raise InvalidArgumentError("widths and strides must have the same length")
        total = 1 + 2 * blocks_per_stage * len(widths)
        upto = total if upto is None else upto
        if not 1 <= upto <= total:
            raise InvalidArgumentError(f"{path}: upto must be in [1, {total}], got {upto}")
        self.total_conv_layers = total
        self.upto = upto
        self.in_channels = in_channels
        self.stem = Conv2dLayer(f"{path}.stem.conv", in_channels, widths[0], 3, rng, padding=1)
        self.stem_bn = BatchNorm2dLayer(f"{path}.stem.bn", widths[0])
        self.blocks: list[ResidualBlock] = []
        channels = widths[0]
        index = 1
        block_no = 0
        for width, stride in zip(widths, strides):
            for b in range(blocks_per_stage):
                if index >= upto:
                    break
                block_no += 1
                self.blocks.append(ResidualBlock(
                    f"{path}.block{block_no}", channels, width, rng,
                    stride=stride if b == 0 else 1, first_conv_only=(index + 1 == upto),
                ))
                channels = width
                index += 2
        self.out_channels = channels

    def children(self) -> list[Module]:
        return [self.stem, self.stem_bn, *self.blocks]

    @property
    def conv_layers(self) -> list[tuple[Conv2dLayer, BatchNorm2dLayer]]:
        layers = [(self.stem, self.stem_bn)]
        for block in self.blocks:
            layers.extend(block.conv_layers)
        return layers

    def freeze_leading(self, k: int) -> None:
        """Freeze the first k conv layers (with their BN); a block's shortcut freezes with its last conv."""
        for index, (conv, bn) in enumerate(self.conv_layers, start=1):
            conv.set_frozen(index <= k)
            bn.set_frozen(index <= k)
        for block in self.blocks:
            whole_block = all(conv.frozen for conv, _ in block.conv_layers)
            for module in block.shortcut_modules():
                module.set_frozen(whole_block)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise InvalidArgumentError(f"{self.path}: expected {self.in_channels} input channels, got {x.shape}")
        x = ops.relu(self.stem_bn(self.stem(x, mode), mode))
        for block in self.blocks:
            x = block(x, mode)
        return x


class AvgFcHead(Module):
    """sigmoid(FC(global_avg_pool(x)))"""

    def __init__(self, path: str, in_channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__(path)
        self.in_channels = in_channels
        self.weight = Parameter(f"{path}.fc.weight", he_uniform(rng, (num_classes, in_channels), in_channels))
        self.bias = Parameter(f"{path}.fc.bias", np.zeros(num_classes))

    def own_parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if len(x.shape) != 4 or x.shape[1] != self.in_channels:
            raise InvalidArgumentError(f"{self.path}: expected {self.in_channels} feature maps, got {x.shape}")
        pooled = ops.global_avg_pool(x)
        return ops.sigmoid(ops.fully_connected(pooled, self.weight.tensor(), self.bias.tensor()))


class ConvMaxHead(Module):
    """sigmoid(global_max_pool(conv_to_c(x))): one adaptation conv, one map per class."""

    def __init__(self, path: str, in_channels: int, num_classes: int, rng: np.random.Generator, kernel: int = 1):
        super().__init__(path)
        self.in_channels = in_channels
        self.conv = Conv2dLayer(f"{path}.conv", in_channels, num_classes, kernel, rng, padding=kernel // 2)

    def children(self) -> list[Module]:
        return [self.conv]

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if len(x.shape) != 4 or x.shape[1] != self.in_channels:
            raise InvalidArgumentError(f"{self.path}: expected {self.in_channels} feature maps, got {x.shape}")
        return ops.sigmoid(ops.global_max_pool(self.conv(x, mode)))


def iter_modules(module: Module) -> Iterator[Module]:
    yield module
    for child in module.children():
        yield from iter_modules(child)
