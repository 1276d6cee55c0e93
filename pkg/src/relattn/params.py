"""Named parameter registry shared by the model and the optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype


class Parameter:
    """A named learnable tensor with an optional learning-rate multiplier."""

    __slots__ = ("name", "tensor", "lr_mult")

    def __init__(self, name: str, data: np.ndarray, lr_mult: float = 1.0):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=default_dtype()))
        self.tensor.requires_grad = True
        self.lr_mult = float(lr_mult)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.tensor.shape})"


class ParameterRegistry:
    """Ordered collection of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray, lr_mult: float = 1.0) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, data, lr_mult=lr_mult)
        self._params[name] = p
        return p.tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def get(self, name: str) -> Parameter:
        return self._params[name]

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data, copy=True) for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} != {p.data.shape}")
            p.tensor.data = np.array(arr, copy=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Glorot-normal initialization."""
    if shape is None:
        shape = (fan_in, fan_out)
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


class LinearParams:
    """Weight/bias pair registered under ``prefix.weight`` / ``prefix.bias``.

    Pass ``bias=False`` for projections where an additive offset provably
    cannot reach the output (a key bias under softmax attention shifts
    every key's logit by the same amount per query and cancels)."""

    def __init__(self, registry: ParameterRegistry, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator, lr_mult: float = 1.0, bias_fill: float = 0.0,
                 bias: bool = True):
        self.weight = registry.add(f"{prefix}.weight", xavier(rng, d_in, d_out), lr_mult=lr_mult)
        self.bias = registry.add(f"{prefix}.bias", np.full(d_out, bias_fill),
                                 lr_mult=lr_mult) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import linear

        return linear(x, self.weight, self.bias)
