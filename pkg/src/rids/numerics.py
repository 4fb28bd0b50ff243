"""Statistical and linear-algebra kernels used by the estimator and detector.

Everything here is a pure function of its arguments except :func:`mvn_sample`,
which draws from a caller-owned :class:`numpy.random.Generator`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaincc

from .errors import InvalidAlpha, NotPsd

RANK_TOL = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PsdFactorization:
    """Eigendecomposition of a symmetric matrix, eigenvalues non-increasing."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int
    tol: float

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def psd_factorize(m: np.ndarray, tol: float = RANK_TOL) -> PsdFactorization:
    """Symmetric eigendecomposition with rank counted against ``tol * max|eig|``."""
    m = symmetrize(np.atleast_2d(m))
    if m.size == 0:
        return PsdFactorization(np.zeros(0), np.zeros((0, 0)), 0, tol)
    w, v = np.linalg.eigh(m)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    top = float(np.max(np.abs(w))) if w.size else 0.0
    rank = int(np.count_nonzero(w > tol * top)) if top > 0.0 else 0
    return PsdFactorization(w, v, rank, tol)


@lru_cache(maxsize=256)
def chi2_quantile(dof: int, alpha: float) -> float:
    """Upper-tail chi-square quantile: ``P(X > threshold) = alpha``.

    Solved by bracketed root finding on the regularized upper incomplete gamma
    function ``Q(dof/2, t/2)``.
    """
    if not (0.0 < alpha < 1.0):
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha!r}")
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    k = 0.5 * float(dof)

    def tail(t: float) -> float:
        return float(gammaincc(k, 0.5 * t)) - alpha

    hi = max(1.0, float(dof))
    while tail(hi) > 0.0:
        hi *= 2.0
    return float(brentq(tail, 0.0, hi, xtol=1e-12, rtol=1e-14, maxiter=500))


def pinv_pdet(m: np.ndarray, tol: float = RANK_TOL) -> tuple[np.ndarray, float, int]:
    """Moore-Penrose pseudoinverse, pseudodeterminant and rank of a symmetric matrix.

    Eigenvalues at or below ``tol * max|eig|`` are treated as zero. The zero
    matrix yields ``(0, 1.0, 0)``: the pseudodeterminant of an empty product.
    """
    fac = psd_factorize(m, tol)
    n = fac.eigenvectors.shape[0]
    if fac.rank == 0:
        return np.zeros((n, n)), 1.0, 0
    w = fac.eigenvalues[: fac.rank]
    v = fac.eigenvectors[:, : fac.rank]
    pinv = (v / w) @ v.T
    return symmetrize(pinv), float(np.prod(w)), fac.rank


def mvn_sample(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``N(mean, cov)`` for a possibly singular PSD ``cov``.

    Uses ``L = V sqrt(max(eig, 0))`` so rank-deficient covariances are fine.
    Always consumes exactly ``len(mean)`` standard normals from ``rng``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = symmetrize(cov)
    eta = rng.standard_normal(mean.shape[0])
    if not np.any(cov):
        return mean.copy()
    w, v = np.linalg.eigh(cov)
    scale = float(np.max(np.abs(w)))
    if w.min() < -1e-8 * scale:
        raise NotPsd(f"covariance has eigenvalue {w.min():.3e} (scale {scale:.3e})")
    factor = v * np.sqrt(np.clip(w, 0.0, None))
    return mean + factor @ eta


def gaussian_loglik(nu: np.ndarray, cov: np.ndarray, tol: float = RANK_TOL) -> float:
    """Log density of ``nu`` under a zero-mean, possibly degenerate Gaussian.

    ``-0.5 nu' cov^+ nu - (n/2) log(2 pi) - 0.5 log pdet(cov)`` with
    ``n = rank(cov)``.
    """
    nu = np.asarray(nu, dtype=float)
    pinv, pdet, rank = pinv_pdet(cov, tol)
    quad = float(nu @ pinv @ nu)
    return -0.5 * quad - 0.5 * rank * LOG_2PI - 0.5 * math.log(pdet)


def quadratic_form(vec: np.ndarray, cov: np.ndarray) -> float:
    """``vec' cov^{-1} vec`` via a linear solve; falls back to the pseudoinverse."""
    vec = np.asarray(vec, dtype=float)
    if vec.size == 0:
        return 0.0
    cov = symmetrize(cov)
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pinv, _, _ = pinv_pdet(cov)
        return float(vec @ pinv @ vec)
    y = np.linalg.solve(c, vec)
    return float(y @ y)


def log_normalize(logw: np.ndarray) -> np.ndarray:
    """Return log weights shifted so that ``sum(exp(out)) == 1`` (log-sum-exp)."""
    logw = np.asarray(logw, dtype=float)
    top = np.max(logw)
    return logw - (top + math.log(np.sum(np.exp(logw - top))))
