"""Dense real linear algebra: products, norms, SVD and singular-value gradients.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration with a fixed round-robin pair ordering, so the
result is a deterministic function of the input bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConvergenceFailure, DegenerateSingularValue, DimensionMismatch, ValidationError

RANK_TOLERANCE = 1e-12
DEGENERACY_TOLERANCE = 1e-8
MAX_SWEEPS = 80


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite, nonempty 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionMismatch(f"{name} must be nonempty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Spectrum:
    """Singular values in non-increasing order."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValidationError("spectrum entries must be finite and nonnegative")
        if np.any(np.diff(vals) > 0):
            raise ValidationError("spectrum must be sorted non-increasing")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def origin_rank(self) -> int:
        if len(self) == 0 or self.values[0] == 0:
            return 0
        return int(np.count_nonzero(self.values > RANK_TOLERANCE * self.values[0]))

    def top(self, k: int) -> "Spectrum":
        return Spectrum(self.values[:k])


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    spectrum: Spectrum
    vt: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return self.spectrum.values

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        k = len(self.spectrum) if k is None else k
        return (self.u[:, :k] * self.s[:k]) @ self.vt[:k]


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Disjoint column pairings covering every pair once per sweep."""
    size = n + (n % 2)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    # Replace columns flagged bad with an orthonormal completion of the good ones:
    # project every unit vector off the current basis and keep the largest residual.
    m = u.shape[0]
    basis = u[:, good]
    out = u.copy()
    for j in np.flatnonzero(~good):
        resid = np.eye(m)
        for _ in range(2):
            resid -= basis @ (basis.T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        e = resid[:, int(np.argmax(norms))] / norms.max()
        basis = np.column_stack([basis, e])
        out[:, j] = e
    return out


def _jacobi_tall(a: np.ndarray):
    m, n = a.shape
    # work at unit scale so squared norms neither underflow nor overflow
    scale = float(np.abs(a).max())
    if scale == 0.0:
        scale = 1.0
    g = a / scale
    v = np.eye(n)
    eps = np.finfo(np.float64).eps
    tol = eps * m
    # columns at roundoff level relative to the whole matrix carry no signal;
    # rotating them only chases noise
    floor = (eps * np.sqrt(np.einsum("ij,ij->", g, g))) ** 2
    rounds = _round_robin(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            if p.size == 0:
                continue
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (np.minimum(alpha, beta) > floor)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise ConvergenceFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma, g, v = sigma[order], g[:, order], v[:, order]
    good = sigma > np.sqrt(floor) * n
    u = np.zeros_like(g)
    u[:, good] = g[:, good] / sigma[good]
    if not good.all():
        u = _complete_basis(u, good)
    return u, sigma * scale, v.T


def svd(a) -> SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` descending.

    ``u`` is m x q and ``vt`` is q x n with q = min(m, n).
    """
    a = as_matrix(a)
    if a.shape[0] >= a.shape[1]:
        u, s, vt = _jacobi_tall(a)
    else:
        u2, s, vt2 = _jacobi_tall(a.T)
        u, vt = vt2.T, u2.T
    return SvdResult(u=u, spectrum=Spectrum(s), vt=vt)


def is_simple(s: np.ndarray, index: int) -> bool:
    """True when ``s[index]`` is separated from its neighbours by more than the degeneracy gap."""
    if len(s) == 0:
        return False
    gap = DEGENERACY_TOLERANCE * s[0]
    if index > 0 and s[index - 1] - s[index] <= gap:
        return False
    if index + 1 < len(s) and s[index] - s[index + 1] <= gap:
        return False
    return True


def singular_value_gradient(result: SvdResult, index: int) -> np.ndarray:
    """Gradient of ``sigma_index`` with respect to every entry of the factored matrix.

    Uses d(sigma_i)/dA = u_i v_i^T, valid only for simple singular values.
    """
    if not 0 <= index < len(result.spectrum):
        raise IndexError(f"singular value index {index} out of range")
    if not is_simple(result.s, index):
        raise DegenerateSingularValue(f"singular value {index} is not simple")
    return np.outer(result.u[:, index], result.vt[index])


def spectrum_vjp(result: SvdResult, d_sigma) -> np.ndarray:
    """Pull a gradient on the singular values back to the matrix: U diag(g) V^T.

    Raises DegenerateSingularValue when two singular values carrying different
    gradients are closer than the degeneracy gap.
    """
    d_sigma = np.asarray(d_sigma, dtype=np.float64)
    s = result.s
    gap = DEGENERACY_TOLERANCE * s[0] if len(s) else 0.0
    close = np.flatnonzero(np.diff(s) >= -gap)
    for i in close:
        if d_sigma[i] != d_sigma[i + 1]:
            raise DegenerateSingularValue(f"singular values {i} and {i + 1} are degenerate")
    return (result.u * d_sigma) @ result.vt
