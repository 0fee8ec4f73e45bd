"""
Domain Layer: SGD with classic (heavy-ball) momentum and L2 regularization
"""

from typing import Callable

import numpy as np

from app.domain.exceptions import InvalidArgumentError
from app.domain.layers import Parameter


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      velocities: dict[str, np.ndarray], lr: float, momentum: float,
                      l2: float = 0.0) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """
    g' = g + l2*theta;  v <- momentum*v + g';  theta <- theta - lr*v

    Only paths present in `grads` are updated; frozen parameters never get a
    gradient entry and are therefore left alone. Returns new dicts.
    """
    new_params = dict(params)
    new_velocities = dict(velocities)
    for path, grad in grads.items():
        theta = params[path]
        if grad.shape != theta.shape:
            raise InvalidArgumentError(f"{path}: gradient shape {grad.shape} != parameter shape {theta.shape}")
        velocity = velocities.get(path)
        if velocity is None:
            velocity = np.zeros_like(theta)
        elif velocity.shape != theta.shape:
            raise InvalidArgumentError(f"{path}: velocity shape {velocity.shape} != parameter shape {theta.shape}")
        g = grad + l2 * theta if l2 else grad
        velocity = momentum * velocity + g
        new_velocities[path] = velocity
        new_params[path] = theta - lr * velocity
    return new_params, new_velocities


class SgdMomentum:
    """Optimizer state for one training loop: velocities and the batch counter."""

    def __init__(self, parameters: list[Parameter], schedule: Callable[[int], float],
                 momentum: float = 0.9, l2: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {momentum}")
        if l2 < 0:
            raise InvalidArgumentError(f"l2 must be >= 0, got {l2}")
        self.parameters = {p.path: p for p in parameters}
        self.schedule = schedule
        self.momentum = momentum
        self.l2 = l2
        self.velocities: dict[str, np.ndarray] = {}
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update at the current learning rate; returns that rate."""
        lr = self.lr
        trainable = {path: g for path, g in grads.items() if not self.parameters[path].frozen}
        values = {path: self.parameters[path].value for path in trainable}
        new_values, self.velocities = sgd_momentum_step(
            values, trainable, self.velocities, lr, self.momentum, self.l2
        )
        for path, value in new_values.items():
            self.parameters[path].value = value
        self.step_count += 1
        return lr
