"""Run configuration: one flat record shared by training, evaluation and
the CLI. Loaded from JSON; unknown keys are rejected so typos fail fast."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """The configuration is internally inconsistent."""


# JSON keys that do not match a field name 1:1.
_KEY_ALIASES = {"lambda": "lam"}


def _default_loss_weights() -> dict:
    return {"focal": 1.0, "mask": 1.0, "margin": 1.0, "rep_point": 1.0}


@dataclass
class RunConfig:
    # model
    C: int | None = None          # entity classes; filled from the dataset when omitted
    P: int | None = None          # predicate classes; filled from the dataset when omitted
    K: int = 4                    # representations per entity and role
    d: int = 256                  # channel width
    L_d: int = 1                  # decoder layers
    h_G: int = 8                  # group cross-attention heads
    d_G: int = 32                 # group cross-attention head width
    h_R: int = 8                  # relation cross-attention heads
    d_R: int = 32                 # relation cross-attention head width
    h_A: int = 128                # relation-head attention heads
    d_A: int = 64                 # relation-head attention head width
    scale_interpolation: str = "trilinear"  # or "nearest": snap the scale axis
    # sampling
    points_min: int = 1           # per-iteration sample count is uniform on
    points_max: int = 100         # [points_min, points_max]
    infer_range_mult: int = 3     # inference grid reaches range_mult * sigma
    infer_step_mult: int = 1      # inference grid stride in units of sigma
    # losses
    alpha: float = 0.75
    gamma_base: float = 2.0
    neg_ratio: int = 10
    loss_weights: dict = field(default_factory=_default_loss_weights)
    gumbel_hard: bool = False
    # logit adjustment
    pgla: bool = True
    pgla_metric: str = "recall"
    lam: float = 1.0
    # optimization
    iterations: int = 1000
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    lr_multiplier_sampler: float = 0.1
    seed: int = 0
    # features
    feature_noise_std: float = 0.05

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        for name in ("K", "d", "L_d", "h_G", "d_G", "h_R", "d_R", "h_A", "d_A"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % 4 != 0:
            raise ConfigError(f"d must be divisible by 4 for positional channels, got {self.d}")
        if self.scale_interpolation not in ("trilinear", "nearest"):
            raise ConfigError(f"unknown scale_interpolation {self.scale_interpolation!r}")
        if not (1 <= self.points_min <= self.points_max):
            raise ConfigError(
                f"need 1 <= points_min <= points_max, got [{self.points_min}, {self.points_max}]")
        if self.infer_range_mult < 0 or self.infer_step_mult < 1:
            raise ConfigError("inference grid needs range_mult >= 0 and step_mult >= 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.neg_ratio < 0:
            raise ConfigError(f"neg_ratio must be non-negative, got {self.neg_ratio}")
        if self.pgla_metric not in ("recall", "precision"):
            raise ConfigError(f"unknown pgla_metric {self.pgla_metric!r}")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        unknown = set(self.loss_weights) - set(_default_loss_weights())
        if unknown:
            raise ConfigError(f"unknown loss_weights keys: {sorted(unknown)}")
        if self.C is not None and self.C < 1:
            raise ConfigError(f"C must be >= 1, got {self.C}")
        if self.P is not None and self.P < 1:
            raise ConfigError(f"P must be >= 1, got {self.P}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = _KEY_ALIASES.get(key, key)
            if name not in fields:
                raise ConfigError(f"unknown configuration key {key!r}")
            kwargs[name] = value
        cfg = cls(**kwargs)
        weights = _default_loss_weights()
        weights.update(cfg.loss_weights)
        cfg.loss_weights = weights
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
