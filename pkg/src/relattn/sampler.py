"""Stochastic representative-point prediction.

Each entity representation predicts a 3-d Gaussian over coordinate
offsets (x, y, scale). Training draws m reparameterized samples so
gradients reach both the mean and the spread; inference replaces draws
with a deterministic lattice around the mean. Offsets accumulate over
decoder layers onto the initial center points, clamped to the unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParameterRegistry, xavier
from .tensor import Tensor, add, clamp, exp, mul, relu, reshape, transpose

SIGMA_MIN = 1e-4
SIGMA_MAX = 1.0
LOG_STD_INIT = -1.5


@dataclass
class OffsetDistribution:
    mu: Tensor     # n x K x 3
    sigma: Tensor  # n x K x 3, in [SIGMA_MIN, SIGMA_MAX]


class GroupOffsetPredictor:
    """Two-layer perceptron applied per representation group: group k sees
    only slice k of (state + broadcast box embedding) and emits 3 offset
    means and 3 log-stds."""

    def __init__(self, registry: ParameterRegistry, prefix: str, d: int, K: int,
                 rng: np.random.Generator, lr_mult: float = 1.0):
        self.K = K
        self.d = d
        self.w1 = registry.add(f"{prefix}.w1", xavier(rng, d, d, shape=(K, d, d)), lr_mult=lr_mult)
        self.b1 = registry.add(f"{prefix}.b1", np.zeros((K, 1, d)), lr_mult=lr_mult)
        # Offsets should start small relative to the unit cube.
        self.w2 = registry.add(f"{prefix}.w2", 0.1 * xavier(rng, d, 6, shape=(K, d, 6)),
                               lr_mult=lr_mult)
        bias = np.zeros((K, 1, 6))
        bias[:, :, 3:] = LOG_STD_INIT
        self.b2 = registry.add(f"{prefix}.b2", bias, lr_mult=lr_mult)

    def __call__(self, state: Tensor, box_embed: Tensor) -> OffsetDistribution:
        n = state.shape[0]
        x = add(state, reshape(box_embed, (n, 1, self.d)))
        x = transpose(x, (1, 0, 2))  # K x n x d
        hidden = relu(add(x @ self.w1, self.b1))
        out = add(hidden @ self.w2, self.b2)  # K x n x 6
        out = transpose(out, (1, 0, 2))  # n x K x 6
        mu = out[:, :, :3]
        sigma = clamp(exp(out[:, :, 3:]), SIGMA_MIN, SIGMA_MAX)
        return OffsetDistribution(mu=mu, sigma=sigma)


def draw_offsets(dist: OffsetDistribution, m: int,
                 rng: np.random.Generator = None, eps: np.ndarray = None) -> Tensor:
    """m reparameterized offset samples per (entity, group): mu + sigma * eps
    with standard-normal eps. Returns n x K x m x 3."""
    if m < 1:
        raise ValueError(f"need at least one sample, got m={m}")
    n, K, _ = dist.mu.shape
    if eps is None:
        if rng is None:
            raise ValueError("draw_offsets needs an rng when eps is not supplied")
        eps = rng.standard_normal((n, K, m, 3))
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != (n, K, m, 3):
            raise ValueError(f"eps shape {eps.shape} != {(n, K, m, 3)}")
    mu = reshape(dist.mu, (n, K, 1, 3))
    sigma = reshape(dist.sigma, (n, K, 1, 3))
    return add(mu, mul(sigma, Tensor(eps)))


def grid_steps(range_mult: int, step_mult: int) -> np.ndarray:
    """Integer lattice from -range_mult to +range_mult with stride step_mult."""
    if range_mult < 0 or step_mult < 1:
        raise ValueError("need range_mult >= 0 and step_mult >= 1")
    return np.arange(-range_mult, range_mult + 1, step_mult, dtype=np.float64)


def inference_grid_offsets(dist: OffsetDistribution, range_mult: int = 3,
                           step_mult: int = 1) -> Tensor:
    """Deterministic offsets on the per-dimension lattice
    {mu_dim + j * sigma_dim : j in grid_steps}: the Cartesian product over
    the three dimensions, 343 points per (entity, group) at defaults."""
    steps = grid_steps(range_mult, step_mult)
    jx, jy, js = np.meshgrid(steps, steps, steps, indexing="ij")
    lattice = np.stack([jx.ravel(), jy.ravel(), js.ravel()], axis=-1)  # m' x 3
    n, K, _ = dist.mu.shape
    mu = reshape(dist.mu, (n, K, 1, 3))
    sigma = reshape(dist.sigma, (n, K, 1, 3))
    return add(mu, mul(sigma, Tensor(lattice[None, None, :, :])))


def accumulate_points(prev: Tensor, delta: Tensor) -> Tensor:
    """One accumulation step: add offsets to the previous reference points
    and clamp every coordinate back into the unit cube."""
    return clamp(add(prev, delta), 0.0, 1.0)
