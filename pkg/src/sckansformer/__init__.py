"""Desk-scale KAN-transformer for fine-grained cell image classification."""

from .tensor import (
    ConfigError,
    ContractError,
    ShapeError,
    Tensor,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "__version__",
]
