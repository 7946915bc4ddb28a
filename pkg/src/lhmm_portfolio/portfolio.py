"""Portfolio return algebra, simulation-based moments and allocation.

Both allocation problems are solved by spectral projected gradient (SPG)
with an Armijo line search over the feasible set: the unit simplex when
long-only, the hyperplane ``sum(w) = 1`` otherwise. Minimum variance is a
convex quadratic; the balanced objective ``E - q sqrt(V)`` is concave, so
both converge to the global optimum from any start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lhmm_portfolio.data_ingest import WeeklyReturnPanel
from lhmm_portfolio.errors import DomainError, InfeasibleError, ValidationError

MIN_EXPECTED_RETURN = 1e-8  # stands in for the strict constraint E(R) > 0
SQRT_JITTER = 1e-12
WEIGHT_THRESHOLD = 1e-6
DEFAULT_Q = 2.0
DEFAULT_STARTS = 50
DEFAULT_N_SIMULATIONS = 10_000
DEFAULT_REPLICATES = 100
DEFAULT_BOOTSTRAP = 10_000


@dataclass(frozen=True)
class SimulatedReturnMatrix:
    """``R[i, k]``: n-week gross return of stock ``k`` in simulated dataset ``i``."""

    R: np.ndarray
    tickers: list[str] | None = None

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.all(R > 0):
            raise ValidationError("gross returns must be positive")
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class ReturnMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).ravel()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov must be K x K for K means")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
            raise ValueError("cov must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def K(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class PortfolioWeights:
    w: np.ndarray
    objective: str
    q: float | None = None
    tickers: list[str] | None = None
    expected_return: float = math.nan
    variance: float = math.nan
    value: float = math.nan  # objective value at w
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).ravel())
        if self.objective not in ("min_variance", "balanced"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass(frozen=True)
class GainResult:
    total: float  # percent
    by_sector: dict[str, float]
    by_stock: np.ndarray


def stock_return(y) -> float:
    """Gross return ``prod(1 + y)`` over a sequence of weekly changes."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= -1):
        raise DomainError("weekly change of -100% or worse")
    return float(np.prod(1.0 + y))


def estimate_moments(R) -> ReturnMoments:
    """Column means and sample covariance (denominator N - 1)."""
    R = R.R if isinstance(R, SimulatedReturnMatrix) else np.atleast_2d(np.asarray(R, dtype=float))
    if R.shape[0] < 2:
        raise ValueError("need at least two samples")
    return ReturnMoments(R.mean(axis=0), np.atleast_2d(np.cov(R, rowvar=False, ddof=1)))


def portfolio_moments(m: ReturnMoments, w) -> tuple[float, float]:
    w = np.asarray(w, dtype=float).ravel()
    if w.size != m.K:
        raise ValueError("weights and moments disagree on K")
    return float(w @ m.mean), float(w @ m.cov @ w)


# ---------------------------------------------------------------------------
# feasible-set projections


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def project_affine(v) -> np.ndarray:
    """Projection onto ``{sum(w) = 1}``."""
    v = np.asarray(v, dtype=float)
    return v - (v.sum() - 1.0) / v.size


def _make_projection(long_only: bool, mean: np.ndarray | None = None, floor: float | None = None):
    base = project_simplex if long_only else project_affine
    if mean is None:
        return base
    if long_only and mean.max() < floor:
        raise InfeasibleError("no positive-return allocation")
    if not long_only and np.ptp(mean) == 0 and mean[0] < floor:
        raise InfeasibleError("no positive-return allocation")

    def proj(v):
        w = base(v)
        if mean @ w >= floor:
            return w
        # KKT: w = base(v + t * mean) for the t >= 0 that makes the constraint tight;
        # mean @ base(v + t * mean) is non-decreasing in t.
        hi = 1.0
        while mean @ base(v + hi * mean) < floor:
            hi *= 2.0
            if hi > 1e300:
                raise InfeasibleError("no positive-return allocation")
        lo = 0.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mean @ base(v + mid * mean) < floor:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(1.0, hi):
                break
        return base(v + hi * mean)

    return proj


def spg_minimize(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    project: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    max_iter: int = 5000,
    tol: float = 1e-12,
) -> tuple[np.ndarray, float, int]:
    """Spectral projected gradient with monotone Armijo backtracking."""
    x = project(x0)
    f = fun(x)
    g = grad(x)
    pg = project(x - g) - x
    step = 1.0 / max(np.abs(pg).max(), 1e-12)
    it = 0
    for it in range(1, max_iter + 1):
        d = project(x - step * g) - x
        if np.abs(d).max() <= tol:
            break
        gd = float(g @ d)
        if gd >= 0:
            break
        lam = 1.0
        while True:
            x_new = x + lam * d
            f_new = fun(x_new)
            if f_new <= f + 1e-4 * lam * gd:
                break
            lam *= 0.5
            if lam < 1e-20:
                return x, f, it
        g_new = grad(x_new)
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        step = min(max(float(s @ s) / sy, 1e-12), 1e12) if sy > 0 else 1e12
        x, f, g = x_new, f_new, g_new
    return x, f, it


def _starts(K: int, n: int, rng) -> list[np.ndarray]:
    rng = np.random.default_rng(rng)
    out = [np.full(K, 1.0 / K)]
    if n > 1:
        out.extend(rng.dirichlet(np.ones(K), size=n - 1))
    return out


def _clean(w: np.ndarray, long_only: bool) -> np.ndarray:
    if long_only:
        w = np.where(w < 0, 0.0, w)
    return w / w.sum()


def optimize_min_variance(
    m: ReturnMoments,
    starts: int = DEFAULT_STARTS,
    rng=0,
    long_only: bool = True,
    min_return: float = MIN_EXPECTED_RETURN,
) -> PortfolioWeights:
    """Minimise ``w' V w`` subject to ``sum(w) = 1`` and ``E(R) >= min_return``."""
    C = m.cov
    proj = _make_projection(long_only, m.mean, min_return)
    best = None
    for x0 in _starts(m.K, starts, rng):
        x, f, it = spg_minimize(lambda w: float(w @ C @ w), lambda w: 2.0 * C @ w, proj, x0)
        if best is None or f < best[1]:
            best = (x, f, it)
    w = _clean(best[0], long_only)
    E, V = portfolio_moments(m, w)
    return PortfolioWeights(w, "min_variance", None, None, E, V, V, {"iterations": best[2], "starts": starts})


def optimize_balanced(
    m: ReturnMoments,
    q: float = DEFAULT_Q,
    starts: int = DEFAULT_STARTS,
    rng=0,
    long_only: bool = True,
) -> PortfolioWeights:
    """Maximise ``E(R) - q sqrt(V(R))`` subject to ``sum(w) = 1``."""
    if q < 0:
        raise ValueError("q must be non-negative")
    C, mu = m.cov, m.mean
    if q == 0 and long_only:
        w = np.zeros(m.K)
        w[int(np.argmax(mu))] = 1.0
        E, V = portfolio_moments(m, w)
        return PortfolioWeights(w, "balanced", q, None, E, V, E, {"iterations": 0, "starts": 0})

    def neg(w):
        return -(float(mu @ w) - q * math.sqrt(max(float(w @ C @ w), 0.0) + SQRT_JITTER))

    def neg_grad(w):
        Cw = C @ w
        return -(mu - q * Cw / math.sqrt(max(float(w @ Cw), 0.0) + SQRT_JITTER))

    proj = _make_projection(long_only)
    best = None
    for x0 in _starts(m.K, starts, rng):
        x, f, it = spg_minimize(neg, neg_grad, proj, x0)
        if best is None or f < best[1]:
            best = (x, f, it)
    w = _clean(best[0], long_only)
    E, V = portfolio_moments(m, w)
    return PortfolioWeights(w, "balanced", q, None, E, V, E - q * math.sqrt(max(V, 0.0)),
                            {"iterations": best[2], "starts": starts})


def balanced_objective(m: ReturnMoments, w, q: float) -> float:
    E, V = portfolio_moments(m, w)
    return E - q * math.sqrt(max(V, 0.0))


# ---------------------------------------------------------------------------
# realised performance


def realized_gain(weights: PortfolioWeights, test_panel: WeeklyReturnPanel) -> GainResult:
    """Percent gain of the allocation over the test panel, with its sector split."""
    if weights.tickers is None:
        raise ValidationError("weights carry no tickers")
    pos = {t: i for i, t in enumerate(test_panel.tickers)}
    missing = [t for t in weights.tickers if t not in pos]
    if missing:
        raise ValidationError(f"test panel lacks tickers: {', '.join(missing[:10])}")
    rows = np.array([pos[t] for t in weights.tickers], dtype=int)
    R = np.array([stock_return(test_panel.returns[i]) for i in rows])
    by_stock = 100.0 * weights.w * (R - 1.0)
    by_sector = {name: 0.0 for name in test_panel.sector_names}
    for contrib, i in zip(by_stock, rows):
        by_sector[test_panel.sector_names[test_panel.sector_of[i]]] += float(contrib)
    return GainResult(float(by_stock.sum()), by_sector, by_stock)


def transaction_count(w, threshold: float = WEIGHT_THRESHOLD) -> int:
    w = w.w if isinstance(w, PortfolioWeights) else np.asarray(w, dtype=float)
    return int(np.count_nonzero(w > threshold))


def bootstrap_ci(
    gains,
    level: float = 0.95,
    n_resamples: int = DEFAULT_BOOTSTRAP,
    rng=None,
) -> tuple[float, float, float]:
    """Percentile bootstrap interval for the mean replicate gain: ``(low, high, mean)``."""
    g = np.asarray(gains, dtype=float).ravel()
    if g.size < 10:
        raise ValueError("need at least 10 replicates")
    rng = np.random.default_rng(rng)
    means = g[rng.integers(0, g.size, size=(n_resamples, g.size))].mean(axis=1)
    a = (1.0 - level) / 2.0
    low, high = np.quantile(means, [a, 1.0 - a])
    return float(low), float(high), float(g.mean())
