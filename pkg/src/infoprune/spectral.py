"""Spectral information measures: effective rank and KS distance between spectra.

The exact KS statistic is piecewise constant in the singular values, so training
uses :func:`smoothed_ks`, which swaps each indicator for a logistic step of
width ``temperature`` and keeps the same sup-over-x structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySpectrum, InvalidRankPair, ValidationError, ZeroSpectrum
from .linalg import Spectrum, svd

GRID_SIZE = 256
GRID_SPAN = 1.05


def _values(spectrum) -> np.ndarray:
    if isinstance(spectrum, Spectrum):
        return spectrum.values
    return np.asarray(spectrum, dtype=np.float64).reshape(-1)


def _entropy_parts(s: np.ndarray):
    total = s.sum()
    if not total > 0:
        raise ZeroSpectrum("all singular values are zero")
    p = s / total
    nz = p > 0
    logp = np.zeros_like(p)
    logp[nz] = np.log(p[nz])
    entropy = -float(np.sum(p[nz] * logp[nz]))
    return total, p, logp, entropy


def spectral_entropy(spectrum) -> float:
    return _entropy_parts(_values(spectrum))[3]


def erank(spectrum) -> float:
    """exp of the Shannon entropy of p_i = s_i / sum(s); 0 log 0 is taken as 0."""
    return float(np.exp(spectral_entropy(spectrum)))


def erank_of_matrix(a) -> float:
    return erank(svd(a).spectrum)


def erank_grad(spectrum, log: bool = False) -> tuple[float, np.ndarray]:
    """Value and gradient of eRank (or its log, the entropy) w.r.t. each singular value.

    Zero singular values get a zero gradient (the one-sided derivative diverges there).
    """
    s = _values(spectrum)
    total, p, logp, entropy = _entropy_parts(s)
    d_entropy = np.where(p > 0, -(logp + entropy) / total, 0.0)
    if log:
        return entropy, d_entropy
    value = float(np.exp(entropy))
    return value, value * d_entropy


@dataclass(frozen=True)
class EmpiricalCdf:
    sample_points: np.ndarray

    def __init__(self, samples):
        pts = np.sort(_values(samples))
        if pts.size == 0:
            raise EmptySpectrum("empirical CDF needs at least one sample")
        object.__setattr__(self, "sample_points", pts)

    def __call__(self, x):
        n = self.sample_points.size
        return np.searchsorted(self.sample_points, x, side="right") / n


@dataclass(frozen=True)
class SmoothedCdf:
    sample_points: np.ndarray
    temperature: float

    def __init__(self, samples, temperature: float):
        if not temperature > 0:
            raise ValidationError("temperature must be positive")
        pts = _values(samples)
        if pts.size == 0:
            raise EmptySpectrum("smoothed CDF needs at least one sample")
        object.__setattr__(self, "sample_points", pts)
        object.__setattr__(self, "temperature", float(temperature))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        z = (x[..., None] - self.sample_points) / self.temperature
        return _logistic(z).mean(axis=-1)


def ks_distance(full, pruned) -> float:
    """Exact two-sample KS statistic sup_x |F_full(x) - F_pruned(x)|.

    Both CDFs are right-continuous steps, so the sup is attained at a sample point.
    """
    a, b = _values(full), _values(pruned)
    if a.size == 0 or b.size == 0:
        raise EmptySpectrum("KS distance needs two nonempty spectra")
    fa, fb = EmpiricalCdf(a), EmpiricalCdf(b)
    points = np.concatenate([a, b])
    return float(np.max(np.abs(fa(points) - fb(points))))


def ks_truncation_closed_form(n: int, k: int) -> float:
    if not 1 <= k <= n:
        raise InvalidRankPair(f"need 1 <= k <= n, got n={n}, k={k}")
    return (n - k) / n


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _candidates(a: np.ndarray, b: np.ndarray):
    """Candidate sup locations and their dependence on the spectra.

    ``kind`` is 0 for grid points, 1 for sample points (in concat(a, b) order)
    and 2 for midpoints of sorted-adjacent union samples (sorted by ``order``).
    """
    union = np.concatenate([a, b])
    top = union.max()
    frac = np.linspace(0.0, 1.0, GRID_SIZE)
    grid = frac * GRID_SPAN * top
    order = np.argsort(union, kind="stable")
    srt = union[order]
    mids = 0.5 * (srt[:-1] + srt[1:])
    x = np.concatenate([grid, union, mids])
    kind = np.concatenate([np.zeros(GRID_SIZE, int), np.ones(union.size, int), np.full(mids.size, 2)])
    return x, kind, frac, order


def smoothed_ks(full, pruned, temperature: float) -> tuple[float, float]:
    """Differentiable KS surrogate; returns (value, location of the sup)."""
    value, x, _, _ = smoothed_ks_grad(full, pruned, temperature)
    return value, x


def smoothed_ks_grad(full, pruned, temperature: float):
    """Smoothed KS value, sup location, and gradients w.r.t. both spectra.

    The sup is searched over a 256-point grid on [0, 1.05 max s], every sample
    point, and the midpoints between adjacent samples. The gradient accounts for
    the dependence of the chosen location on the spectra.
    """
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    a, b = _values(full), _values(pruned)
    if a.size == 0 or b.size == 0:
        raise EmptySpectrum("smoothed KS needs two nonempty spectra")
    tau = float(temperature)
    na, nb = a.size, b.size
    x, kind, frac, order = _candidates(a, b)

    za = (x[:, None] - a) / tau
    zb = (x[:, None] - b) / tau
    gap = _logistic(za).mean(axis=1) - _logistic(zb).mean(axis=1)
    i = int(np.argmax(np.abs(gap)))
    value = float(abs(gap[i]))
    xs = float(x[i])
    sign = 1.0 if gap[i] >= 0 else -1.0

    # d logistic(z)/dz = l(1-l)
    la, lb = _logistic(za[i]), _logistic(zb[i])
    dla = la * (1 - la) / tau
    dlb = lb * (1 - lb) / tau
    d_a = -dla / na
    d_b = dlb / nb
    d_x = dla.sum() / na - dlb.sum() / nb

    dx_dunion = np.zeros(na + nb)
    if kind[i] == 0:
        dx_dunion[int(np.argmax(np.concatenate([a, b])))] = frac[i] * GRID_SPAN
    elif kind[i] == 1:
        dx_dunion[i - GRID_SIZE] = 1.0
    else:
        j = i - GRID_SIZE - (na + nb)
        dx_dunion[order[j]] += 0.5
        dx_dunion[order[j + 1]] += 0.5
    d_a = sign * (d_a + d_x * dx_dunion[:na])
    d_b = sign * (d_b + d_x * dx_dunion[na:])
    return value, xs, d_a, d_b
