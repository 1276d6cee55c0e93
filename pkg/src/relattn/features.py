"""Multi-scale feature volumes and positional embeddings.

Volumes are 5 x H x W x d: five scale levels over a grid at 1/8 of the
image resolution. Synthetic appearance features place one Gaussian blob
per entity on its scale level; positional embeddings are fixed 2-d
sinusoids shared across levels plus a learnable per-level embedding.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ConfigError
from .data import SCALE_LEVELS, SceneSample, scene_feature_rng
from .tensor import Tensor, add, reshape

_PE_CACHE: dict = {}


def grid_shape(image_size: tuple) -> tuple:
    h0, w0 = image_size
    h, w = h0 // 8, w0 // 8
    if h < 2 or w < 2:
        raise ConfigError(f"image size {image_size} gives a degenerate {h}x{w} grid")
    return h, w


def sinusoidal_grid(H: int, W: int, d: int) -> np.ndarray:
    """H x W x d sinusoidal position code: the first d/2 channels encode x,
    the rest y, as interleaved sin/cos pairs with geometric wavelengths."""
    if d % 4 != 0:
        raise ConfigError(f"positional channels need d divisible by 4, got {d}")
    key = (H, W, d)
    cached = _PE_CACHE.get(key)
    if cached is not None:
        return cached
    half = d // 2
    pairs = half // 2
    freq = 1.0 / (10000.0 ** (2.0 * np.arange(pairs) / half))

    def encode(pos: np.ndarray) -> np.ndarray:
        ang = pos[:, None] * freq[None, :]
        out = np.empty((pos.size, half), dtype=np.float64)
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    x_emb = encode(np.arange(W, dtype=np.float64))  # W x half
    y_emb = encode(np.arange(H, dtype=np.float64))  # H x half
    grid = np.empty((H, W, d), dtype=np.float64)
    grid[:, :, :half] = x_emb[None, :, :]
    grid[:, :, half:] = y_emb[:, None, :]
    grid.setflags(write=False)
    _PE_CACHE[key] = grid
    return grid


def build_positional_embeddings(H: int, W: int, d: int, scale_embeds) -> Tensor:
    """5 x H x W x d positional volume: cached sinusoidal base plus the
    learnable scale embedding broadcast over each level."""
    scale_embeds = scale_embeds if isinstance(scale_embeds, Tensor) else Tensor(scale_embeds)
    if scale_embeds.shape != (SCALE_LEVELS, d):
        raise ConfigError(
            f"scale embeddings must be {(SCALE_LEVELS, d)}, got {scale_embeds.shape}")
    base = np.broadcast_to(sinusoidal_grid(H, W, d), (SCALE_LEVELS, H, W, d))
    return add(Tensor(base), reshape(scale_embeds, (SCALE_LEVELS, 1, 1, d)))


def class_signatures(dataset_seed: int, C: int, d: int) -> np.ndarray:
    """Deterministic per-class appearance vectors shared by train and eval."""
    rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, 9000]))
    return rng.normal(0.0, 1.0, size=(C, d))


def scene_volume(dataset_seed: int, scene: SceneSample, signatures: np.ndarray,
                 noise_std: float) -> np.ndarray:
    """Feature volume for a stored scene under its canonical noise stream,
    identical between training and evaluation."""
    rng = scene_feature_rng(dataset_seed, scene.split, scene.index)
    return synthesize_features(scene, signatures, noise_std, rng)


def synthesize_features(scene: SceneSample, signatures: np.ndarray, noise_std: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Render a 5 x H x W x d volume for a scene.

    Each entity adds signature * exp(-r^2 / (2 ext^2)) on its scale level,
    where r is the grid distance from the node nearest the box center and
    ext is a quarter of the box diagonal in grid units (floored so a tiny
    box still covers its peak node). The peak node weight is exactly 1.
    i.i.d. Gaussian noise of the given std is added everywhere.
    """
    H, W = grid_shape(scene.image_size)
    d = signatures.shape[1]
    if noise_std > 0:
        V = rng.normal(0.0, noise_std, size=(SCALE_LEVELS, H, W, d))
    else:
        V = np.zeros((SCALE_LEVELS, H, W, d), dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    for ent in scene.entities:
        x0, y0, x1, y1 = ent.box
        cx = round((x0 + x1) / 2.0 * (W - 1))
        cy = round((y0 + y1) / 2.0 * (H - 1))
        diag = math.hypot((x1 - x0) * (W - 1), (y1 - y0) * (H - 1))
        ext = max(0.25 * diag, 0.75)
        weight = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * ext * ext))
        V[ent.scale_level] += weight[:, :, None] * signatures[ent.class_label]
    return V
