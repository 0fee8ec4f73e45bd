"""
Domain Layer: Differentiable numeric kernels

Forward and backward for every operation the network families use.
Convolution and pooling work on sliding-window views (im2col); ties in
max pooling route the gradient to the lowest flat index. Sigmoid outputs
are kept inside the same [eps, 1-eps] band the loss clamps to, so a
saturated but wrong output still passes a gradient of about q - p back to
its logit.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from app.domain.entities import Mode
from app.domain.exceptions import InvalidArgumentError
from app.domain.losses import CLAMP_EPSILON
from app.domain.tensor import Function, Tensor

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


def _require_4d(array: np.ndarray, what: str) -> None:
    if array.ndim != 4:
        raise InvalidArgumentError(f"{what} expects a 4-axis (N,C,H,W) input, got shape {array.shape}")


class Conv2d(Function):
    def forward(self, x, kernel, bias, stride: int = 1, padding: int = 0):
        _require_4d(x, "conv2d")
        if kernel.ndim != 4 or kernel.shape[1] != x.shape[1] or bias.shape != (kernel.shape[0],):
            raise InvalidArgumentError(
                f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}"
            )
        if stride < 1 or padding < 0:
            raise InvalidArgumentError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
        n, ci, h, w = x.shape
        co, _, kh, kw = kernel.shape
        if kh > h + 2 * padding or kw > w + 2 * padding:
            raise InvalidArgumentError(
                f"conv2d kernel {kernel.shape} larger than padded input {x.shape} (padding {padding})"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2], windows.shape[3]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
        out = cols @ kernel.reshape(co, -1).T + bias

        self.cols = cols
        self.kernel = kernel
        self.geometry = (x.shape, xp.shape, ho, wo, stride, padding)
        return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(self, grad):
        x_shape, xp_shape, ho, wo, stride, padding = self.geometry
        n, ci, h, w = x_shape
        co, _, kh, kw = self.kernel.shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, co)

        d_kernel = (g.T @ self.cols).reshape(self.kernel.shape)
        d_bias = g.sum(axis=0)
        d_cols = (g @ self.kernel.reshape(co, -1)).reshape(n, ho, wo, ci, kh, kw)
        d_xp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                d_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        d_x = d_xp[:, :, padding:padding + h, padding:padding + w]
        return d_x, d_kernel, d_bias


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        self.out = np.clip(s, CLAMP_EPSILON, 1.0 - CLAMP_EPSILON)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise InvalidArgumentError(f"add shape mismatch: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, grad):
        return grad, grad


class GlobalAvgPool(Function):
    def forward(self, x):
        _require_4d(x, "global_avg_pool")
        self.x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.x_shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.x_shape).copy(),)


class GlobalMaxPool(Function):
    def forward(self, x):
        _require_4d(x, "global_max_pool")
        self.x_shape = x.shape
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        # argmax returns the first occurrence: ties go to the lowest flat index
        self.argmax = flat.argmax(axis=2)
        return np.take_along_axis(flat, self.argmax[:, :, None], axis=2)[:, :, 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        d_flat = np.zeros((n, c, h * w))
        np.put_along_axis(d_flat, self.argmax[:, :, None], grad[:, :, None], axis=2)
        return (d_flat.reshape(self.x_shape),)


class MaxPool2d(Function):
    def forward(self, x, kernel: int = 2, stride: int = 2):
        _require_4d(x, "max_pool")
        n, c, h, w = x.shape
        if kernel < 1 or stride < 1:
            raise InvalidArgumentError(f"max_pool needs kernel >= 1 and stride >= 1, got {kernel}, {stride}")
        if kernel > h or kernel > w:
            raise InvalidArgumentError(f"max_pool window {kernel}x{kernel} larger than spatial extent {h}x{w}")
        windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2], windows.shape[3]
        flat = windows.reshape(n, c, ho, wo, kernel * kernel)
        self.argmax = flat.argmax(axis=4)
        self.geometry = (x.shape, kernel, stride, ho, wo)
        return np.take_along_axis(flat, self.argmax[..., None], axis=4)[..., 0]

    def backward(self, grad):
        x_shape, kernel, stride, ho, wo = self.geometry
        n, c, h, w = x_shape
        rows = np.arange(ho)[:, None] * stride + self.argmax // kernel
        cols = np.arange(wo)[None, :] * stride + self.argmax % kernel
        d_x = np.zeros(x_shape)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(d_x, (ni, ci, rows, cols), grad)
        return (d_x,)


class FullyConnected(Function):
    def forward(self, x, weight, bias):
        if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
            raise InvalidArgumentError(
                f"fully_connected shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
            )
        self.x = x
        self.weight = weight
        return x @ weight.T + bias

    def backward(self, grad):
        return grad @ self.weight, grad.T @ self.x, grad.sum(axis=0)


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(mean=np.zeros(channels), var=np.ones(channels))


class BatchNorm(Function):
    def forward(self, x, gamma, beta, mode: Mode = Mode.TRAIN, running: Optional[RunningStats] = None,
                momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON):
        _require_4d(x, "batch_norm")
        n, c, h, w = x.shape
        if gamma.shape != (c,) or beta.shape != (c,):
            raise InvalidArgumentError(
                f"batch_norm parameter shape mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
            )
        self.mode = mode
        if mode is Mode.TRAIN:
            if n * h * w < 2:
                raise InvalidArgumentError(f"batch_norm in train mode needs N*H*W >= 2, got input {x.shape}")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if running is not None:
                running.mean = momentum * running.mean + (1.0 - momentum) * mean
                running.var = momentum * running.var + (1.0 - momentum) * var
        else:
            if running is None:
                raise InvalidArgumentError("batch_norm in inference mode needs running statistics")
            mean, var = running.mean, running.var

        self.inv_std = 1.0 / np.sqrt(var + epsilon)
        self.x_hat = (x - mean[None, :, None, None]) * self.inv_std[None, :, None, None]
        self.gamma = gamma
        return gamma[None, :, None, None] * self.x_hat + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        d_gamma = (grad * self.x_hat).sum(axis=axes)
        d_beta = grad.sum(axis=axes)
        d_x_hat = grad * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if self.mode is Mode.TRAIN:
            m = grad.shape[0] * grad.shape[2] * grad.shape[3]
            d_x = inv_std / m * (
                m * d_x_hat
                - d_x_hat.sum(axis=axes, keepdims=True)
                - self.x_hat * (d_x_hat * self.x_hat).sum(axis=axes, keepdims=True)
            )
        else:
            d_x = d_x_hat * inv_std
        return d_x, d_gamma, d_beta


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def global_max_pool(x: Tensor) -> Tensor:
    return GlobalMaxPool.apply(x)


def max_pool(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    return MaxPool2d.apply(x, kernel=kernel, stride=stride)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return FullyConnected.apply(x, weight, bias)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: Mode = Mode.TRAIN,
               running: Optional[RunningStats] = None, momentum: float = BN_MOMENTUM,
               epsilon: float = BN_EPSILON) -> Tensor:
    return BatchNorm.apply(x, gamma, beta, mode=mode, running=running, momentum=momentum, epsilon=epsilon)
