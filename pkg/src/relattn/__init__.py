"""Relationship decoding over detected entities via attention weights."""

from .config import ConfigError, RunConfig
from .tensor import Tensor, no_grad

__all__ = ["ConfigError", "RunConfig", "Tensor", "no_grad"]
__version__ = "0.1.0"
