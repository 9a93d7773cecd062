"""Elementwise FFN nonlinearities with their derivatives."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

NAMES = ("identity", "relu", "silu")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "silu":
        return x * _sigmoid(x)
    raise ValidationError(f"unknown activation {name!r}")


def derivative(name: str, x: np.ndarray) -> np.ndarray:
    # relu'(0) is taken as 0
    if name == "identity":
        return np.ones_like(x)
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "silu":
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))
    raise ValidationError(f"unknown activation {name!r}")
