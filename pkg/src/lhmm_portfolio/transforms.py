"""Yeo-Johnson power transform, its inverse, and per-series lambda fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lhmm_portfolio.errors import DomainError, ValidationError

_EPS = 1e-12  # |lambda| or |lambda - 2| below this uses the log branch
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class YeoJohnsonParams:
    lam: np.ndarray  # one exponent per stock

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if not np.all(np.isfinite(lam)):
            raise ValueError("lambda must be finite")
        object.__setattr__(self, "lam", lam)

    def transform(self, Y: np.ndarray) -> np.ndarray:
        """Row-wise transform of a (K, n) matrix."""
        Y = np.asarray(Y, dtype=float)
        return np.vstack([yj_transform(Y[k], self.lam[k]) for k in range(Y.shape[0])])

    def inverse(self, Ystar: np.ndarray) -> np.ndarray:
        Ystar = np.asarray(Ystar, dtype=float)
        return np.vstack([yj_inverse(Ystar[k], self.lam[k]) for k in range(Ystar.shape[0])])


def yj_transform(y, lam: float):
    """Yeo-Johnson transform; works on scalars and arrays."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    pos = y >= 0
    neg = ~pos
    if abs(lam) < _EPS:
        out[pos] = np.log1p(y[pos])
    else:
        out[pos] = np.expm1(lam * np.log1p(y[pos])) / lam
    if abs(lam - 2.0) < _EPS:
        out[neg] = -np.log1p(-y[neg])
    else:
        out[neg] = -np.expm1((2.0 - lam) * np.log1p(-y[neg])) / (2.0 - lam)
    return out[()] if out.ndim == 0 else out


def yj_range(lam: float) -> tuple[float, float]:
    """Open interval of attainable transformed values for ``lam``."""
    lo = -math.inf if lam <= 2.0 + _EPS else -1.0 / (lam - 2.0)
    hi = math.inf if lam >= -_EPS else -1.0 / lam
    return lo, hi


def yj_inverse(ystar, lam: float):
    """Inverse Yeo-Johnson transform.

    Raises ``DomainError`` if any value lies outside the range attainable
    for ``lam`` (only bounded when ``lam < 0`` or ``lam > 2``).
    """
    ystar = np.asarray(ystar, dtype=float)
    lo, hi = yj_range(lam)
    if np.any(ystar <= lo) or np.any(ystar >= hi) or not np.all(np.isfinite(ystar)):
        raise DomainError(f"value outside Yeo-Johnson range ({lo}, {hi}) for lambda={lam}")
    out = np.empty_like(ystar)
    pos = ystar >= 0
    neg = ~pos
    if abs(lam) < _EPS:
        out[pos] = np.expm1(ystar[pos])
    else:
        out[pos] = np.expm1(np.log1p(lam * ystar[pos]) / lam)
    if abs(lam - 2.0) < _EPS:
        out[neg] = -np.expm1(-ystar[neg])
    else:
        out[neg] = -np.expm1(np.log1p(-(2.0 - lam) * ystar[neg]) / (2.0 - lam))
    return out[()] if out.ndim == 0 else out


def yj_inverse_valid(ystar: np.ndarray, lam: float) -> np.ndarray:
    """Mask of entries ``yj_inverse`` accepts."""
    lo, hi = yj_range(lam)
    ystar = np.asarray(ystar, dtype=float)
    return np.isfinite(ystar) & (ystar > lo) & (ystar < hi)


def yj_loglik(y: np.ndarray, lam: float) -> float:
    """Gaussian profile log-likelihood of the transformed series (MLE variance)."""
    y = np.asarray(y, dtype=float)
    z = yj_transform(y, lam)
    var = z.var()
    if var <= 0:
        return -math.inf
    n = y.size
    return -0.5 * n * math.log(var) + (lam - 1.0) * float(np.sum(np.sign(y) * np.log1p(np.abs(y))))


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-4) -> float:
    """Maximise a unimodal ``f`` on ``[lo, hi]`` to bracket width ``tol``."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_lambda(series, lo: float = -5.0, hi: float = 5.0, tol: float = 1e-4) -> YeoJohnsonParams:
    """Profile-likelihood estimate of lambda for a single series."""
    y = np.asarray(series, dtype=float).ravel()
    if y.size < 30:
        raise ValidationError("need at least 30 observations to fit lambda")
    if not np.all(np.isfinite(y)):
        raise ValidationError("series contains non-finite values")
    if np.ptp(y) == 0:
        raise ValidationError("zero variance")
    lam = golden_section_max(lambda l: yj_loglik(y, l), lo, hi, tol)
    return YeoJohnsonParams(np.array([lam]))


def fit_lambdas(Y: np.ndarray, **kwargs) -> YeoJohnsonParams:
    """One lambda per row of a (K, n) matrix."""
    Y = np.asarray(Y, dtype=float)
    return YeoJohnsonParams(np.array([fit_lambda(row, **kwargs).lam[0] for row in Y]))
