"""AdamW optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .params import Parameter, ParameterRegistry


class AdamW:
    def __init__(self, params, lr: float, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        if isinstance(params, ParameterRegistry):
            params = params.parameters()
        self.params: list[Parameter] = list(params)
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        """Apply one update. ``lr_scale`` multiplies the base rate, on top
        of each parameter's own multiplier."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.tensor.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step_lr = self.lr * lr_scale * p.lr_mult
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.tensor.data = p.data - step_lr * update - step_lr * self.weight_decay * p.data


def lr_scale_at(iteration: int, total_iterations: int, drop_fraction: float = 0.8,
                drop_factor: float = 0.1) -> float:
    """Step decay: multiply the rate by ``drop_factor`` for the last
    (1 - drop_fraction) of training."""
    if total_iterations <= 0:
        raise ValueError("total_iterations must be positive")
    return drop_factor if iteration >= drop_fraction * total_iterations else 1.0
