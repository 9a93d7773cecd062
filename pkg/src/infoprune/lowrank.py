"""Training-free FFN compression by adaptive-rank truncated SVD.

An FFN ``phi(x W1) W2`` is linearised into a single d x d map, its spectrum
picks the smallest rank meeting a relative Frobenius error budget, and the
truncated factors are split evenly (``U S^1/2`` and ``S^1/2 V^T``) into two
thin projections. The compressed block is linear: the nonlinearity is dropped.

Two storage layouts are understood:

``row_major_apply``  (default) ``y = phi(x @ w1) @ w2``, w1 is d x m, w2 is m x d
``col_major_apply``  ``y = w2 @ phi(w1 @ x)``, w1 is m x d, w2 is d x m
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import activations
from .errors import DimensionMismatch, ValidationError, ZeroNorm, ZeroSpectrum
from .linalg import Spectrum, as_matrix, frobenius_norm, matmul, svd

ROW_MAJOR = "row_major_apply"
COL_MAJOR = "col_major_apply"
LAYOUTS = (ROW_MAJOR, COL_MAJOR)
MIN_EPSILON = 1e-12


@dataclass(frozen=True)
class FfnPair:
    w1: np.ndarray
    w2: np.ndarray
    activation: str = "identity"
    layout: str = ROW_MAJOR

    def __post_init__(self):
        w1 = as_matrix(self.w1, "w1")
        w2 = as_matrix(self.w2, "w2")
        if self.layout not in LAYOUTS:
            raise ValidationError(f"unknown weight layout {self.layout!r}")
        if self.activation not in activations.NAMES:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if w1.shape[1] != w2.shape[0] or w1.shape[0] != w2.shape[1]:
            raise DimensionMismatch(f"incompatible FFN shapes {w1.shape} and {w2.shape}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    @property
    def model_dim(self) -> int:
        return self.w1.shape[0] if self.layout == ROW_MAJOR else self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1] if self.layout == ROW_MAJOR else self.w1.shape[0]


@dataclass(frozen=True)
class CompressionResult:
    w1_hat: np.ndarray
    w2_hat: np.ndarray
    retained_rank: int
    epsilon: float
    achieved_rel_error: float
    original_rank: int
    spectrum: Spectrum

    def summary(self) -> dict:
        return {
            "retained_rank": self.retained_rank,
            "original_rank": self.original_rank,
            "epsilon": self.epsilon,
            "achieved_rel_error": self.achieved_rel_error,
        }


def composite_weight(ffn: FfnPair, anchor=None) -> np.ndarray:
    """The d x d linear map the FFN acts as, optionally Jacobian-scaled at ``anchor``.

    Without an anchor (or with the identity activation) this is the plain
    product of the two projections in application order.
    """
    row = ffn.layout == ROW_MAJOR
    if anchor is None or ffn.activation == "identity":
        if anchor is not None:
            _check_anchor(ffn, anchor)
        return matmul(ffn.w1, ffn.w2) if row else matmul(ffn.w2, ffn.w1)
    x0 = _check_anchor(ffn, anchor)
    pre = x0 @ ffn.w1 if row else ffn.w1 @ x0
    if ffn.activation == "relu" and np.any(pre == 0):
        raise ValidationError("relu derivative undefined at a zero pre-activation")
    scale = activations.derivative(ffn.activation, pre)
    if row:
        return matmul(ffn.w1 * scale, ffn.w2)
    return matmul(ffn.w2 * scale, ffn.w1)


def _check_anchor(ffn: FfnPair, anchor) -> np.ndarray:
    x0 = np.asarray(anchor, dtype=np.float64).reshape(-1)
    if x0.shape[0] != ffn.model_dim:
        raise DimensionMismatch(f"anchor has length {x0.shape[0]}, expected {ffn.model_dim}")
    return x0


def _check_epsilon(epsilon: float) -> float:
    epsilon = float(epsilon)
    if not MIN_EPSILON <= epsilon <= 1.0:
        raise ValidationError(f"epsilon must lie in [{MIN_EPSILON}, 1], got {epsilon}")
    return epsilon


def adaptive_rank(spectrum, epsilon: float) -> int:
    """Smallest k with sum_{i<=k} s_i^2 >= (1 - eps^2) sum_i s_i^2."""
    epsilon = _check_epsilon(epsilon)
    s = spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=np.float64)
    energy = np.cumsum(s * s)
    if energy.size == 0 or not energy[-1] > 0:
        raise ZeroSpectrum("cannot choose a rank for an all-zero spectrum")
    threshold = (1.0 - epsilon**2) * energy[-1]
    return int(np.searchsorted(energy, threshold, side="left")) + 1


def tail_error(spectrum, k: int) -> float:
    """Relative Frobenius error of the rank-k truncation, from the spectrum alone."""
    s = spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=np.float64)
    return float(np.sqrt(np.sum(s[k:] ** 2) / np.sum(s * s)))


def compress(ffn: FfnPair, epsilon: float, anchor=None) -> CompressionResult:
    epsilon = _check_epsilon(epsilon)
    w = composite_weight(ffn, anchor)
    dec = svd(w)
    k = adaptive_rank(dec.spectrum, epsilon)
    root = np.sqrt(dec.s[:k])
    left = dec.u[:, :k] * root
    right = root[:, None] * dec.vt[:k]
    if ffn.layout == ROW_MAJOR:
        w1_hat, w2_hat = left, right
    else:
        w1_hat, w2_hat = right, left
    return CompressionResult(
        w1_hat=w1_hat,
        w2_hat=w2_hat,
        retained_rank=k,
        epsilon=epsilon,
        achieved_rel_error=tail_error(dec.spectrum, k),
        original_rank=dec.spectrum.origin_rank,
        spectrum=dec.spectrum,
    )


def reconstruction_error(original, approx) -> float:
    original = np.asarray(original, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if original.shape != approx.shape:
        raise DimensionMismatch(f"shape {approx.shape} does not match {original.shape}")
    norm = frobenius_norm(original)
    if norm == 0:
        raise ZeroNorm("original matrix has zero Frobenius norm")
    return frobenius_norm(original - approx) / norm
