"""Gaussian-emission hidden Markov model for one sector.

Each sector has ``n_d`` stocks observed over ``n`` weeks. Given the hidden
state ``j`` of a week, the stocks' returns are independent Normals with
state-specific means and variances. States are reported 1-based (1 = bull
after :func:`relabel_states`); arrays are indexed 0-based internally.

All recursions run in scaled or log space, so sectors with dozens of stocks
do not underflow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse.csgraph import connected_components

from lhmm_portfolio.errors import EstimationError

VARIANCE_FLOOR = 1e-8
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
DEFAULT_RESTARTS = 20
MAX_RESEEDS = 10
_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianHmmParams:
    """Initial distribution, transition matrix and per-stock emission moments.

    Attributes
    ----------
    alpha : ndarray, shape (J,)
    Pi : ndarray, shape (J, J)
        ``Pi[h, j]`` is the probability of moving from state h to state j.
    mu, sigma2 : ndarray, shape (n_d, J)
        Emission mean and variance of each stock in each state. Variances
        are clipped to ``VARIANCE_FLOOR``.
    """

    alpha: np.ndarray
    Pi: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        Pi = np.atleast_2d(np.asarray(self.Pi, dtype=float))
        mu = np.asarray(self.mu, dtype=float)
        sigma2 = np.asarray(self.sigma2, dtype=float)
        if mu.ndim == 1:
            mu = mu[None, :]
        if sigma2.ndim == 1:
            sigma2 = sigma2[None, :]
        J = alpha.size
        if Pi.shape != (J, J):
            raise ValueError(f"Pi must be {J}x{J}, got {Pi.shape}")
        if mu.shape != sigma2.shape or mu.shape[1] != J:
            raise ValueError("mu and sigma2 must both be (n_d, J)")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-8:
            raise ValueError("alpha must be a probability vector")
        if np.any(Pi < 0) or np.any(np.abs(Pi.sum(axis=1) - 1.0) > 1e-8):
            raise ValueError("rows of Pi must be probability vectors")
        if np.any(sigma2 < 0) or not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma2)):
            raise ValueError("emission parameters must be finite with non-negative variances")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "Pi", Pi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", np.maximum(sigma2, VARIANCE_FLOOR))

    @property
    def J(self) -> int:
        return self.alpha.size

    @property
    def n_stocks(self) -> int:
        return self.mu.shape[0]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "Pi": self.Pi.tolist(),
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianHmmParams":
        return cls(
            np.array(d["alpha"], dtype=float),
            np.array(d["Pi"], dtype=float),
            np.array(d["mu"], dtype=float),
            np.array(d["sigma2"], dtype=float),
        )


@dataclass
class HmmFit:
    """Outcome of a Baum-Welch run."""

    params: GaussianHmmParams
    loglik: float
    trace: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    reseeds: list[int] = field(default_factory=list)  # iterations where a state was re-seeded
    bic: float = math.nan
    restart_bics: list[float] = field(default_factory=list)


def _check_data(data) -> np.ndarray:
    Y = np.asarray(data, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2:
        raise ValueError("sector data must be (n_d, n)")
    if np.isnan(Y).any():
        raise ValueError("data contains NaN")
    if not np.all(np.isfinite(Y)):
        raise ValueError("data contains infinite values")
    return Y


def emission_logpdf(params: GaussianHmmParams, Y: np.ndarray) -> np.ndarray:
    """Joint log-density of each week's sector vector under each state, shape (n, J)."""
    mu, s2 = params.mu, params.sigma2
    out = np.empty((Y.shape[1], params.J))
    for j in range(params.J):
        z = (Y - mu[:, j : j + 1]) ** 2 / s2[:, j : j + 1]
        out[:, j] = -0.5 * (z.sum(axis=0) + np.log(s2[:, j]).sum() + Y.shape[0] * _LOG2PI)
    return out


def _forward(logB: np.ndarray, alpha: np.ndarray, Pi: np.ndarray):
    """Scaled forward pass. Returns normalised alphas, scale factors and log-likelihood."""
    n, J = logB.shape
    shift = logB.max(axis=1)
    B = np.exp(logB - shift[:, None])
    a = np.empty((n, J))
    c = np.empty(n)
    cur = alpha * B[0]
    for t in range(n):
        if t:
            cur = (a[t - 1] @ Pi) * B[t]
        s = cur.sum()
        if not s > 0:
            return a, c, -math.inf
        c[t] = s
        a[t] = cur / s
    return a, c, float(np.log(c).sum() + shift.sum())


def _backward(logB: np.ndarray, Pi: np.ndarray, c: np.ndarray) -> np.ndarray:
    n, J = logB.shape
    B = np.exp(logB - logB.max(axis=1)[:, None])
    b = np.empty((n, J))
    b[-1] = 1.0
    for t in range(n - 2, -1, -1):
        b[t] = Pi @ (B[t + 1] * b[t + 1]) / c[t + 1]
    return b


def log_likelihood(params: GaussianHmmParams, data) -> float:
    """Marginal log-likelihood of a sector's data, summed over all state paths."""
    Y = _check_data(data)
    logB = emission_logpdf(params, Y)
    return _forward(logB, params.alpha, params.Pi)[2]


def forward_backward(params: GaussianHmmParams, data):
    """Posterior state probabilities.

    Returns ``(loglik, gamma, xi_sum)`` where ``gamma`` is (n, J) and
    ``xi_sum[h, j]`` is the expected number of h -> j transitions.
    """
    Y = _check_data(data)
    logB = emission_logpdf(params, Y)
    a, c, ll = _forward(logB, params.alpha, params.Pi)
    if not math.isfinite(ll):
        raise EstimationError("data has zero likelihood under the current parameters")
    b = _backward(logB, params.Pi, c)
    gamma = a * b
    gamma /= gamma.sum(axis=1, keepdims=True)
    B = np.exp(logB - logB.max(axis=1)[:, None])
    # xi_t(h, j) = a_t(h) Pi(h, j) B_{t+1}(j) b_{t+1}(j) / c_{t+1}
    w = (B[1:] * b[1:]) / c[1:, None]
    xi_sum = params.Pi * (a[:-1].T @ w)
    return ll, gamma, xi_sum


def _m_step(Y: np.ndarray, gamma: np.ndarray, xi_sum: np.ndarray, prev: GaussianHmmParams):
    J = gamma.shape[1]
    occ = gamma.sum(axis=0)
    degenerate = [j for j in range(J) if occ[j] < 1e-6]
    alpha = gamma[0] / gamma[0].sum()
    rows = xi_sum.sum(axis=1, keepdims=True)
    Pi = np.where(rows > 0, xi_sum / np.where(rows > 0, rows, 1.0), prev.Pi)
    mu = prev.mu.copy()
    sigma2 = prev.sigma2.copy()
    for j in range(J):
        if j in degenerate:
            continue
        g = gamma[:, j]
        mu[:, j] = Y @ g / occ[j]
        sigma2[:, j] = ((Y - mu[:, j : j + 1]) ** 2) @ g / occ[j]
    return GaussianHmmParams(alpha, Pi, mu, sigma2), degenerate


def _reseed(Y: np.ndarray, params: GaussianHmmParams, states: list[int], rng) -> GaussianHmmParams:
    """Re-initialise never-visited states from quantile splits of the data."""
    market = Y.mean(axis=0)
    mu = params.mu.copy()
    sigma2 = params.sigma2.copy()
    Pi = params.Pi.copy()
    J = params.J
    for j in states:
        q = rng.uniform(0.1, 0.4)
        score = mu.mean(axis=0)
        others = [i for i in range(J) if i != j]
        # place the re-seeded state on the side of the data the others do not cover
        low_side = bool(others) and score[others].mean() >= np.median(market)
        cut = np.quantile(market, q if low_side else 1.0 - q)
        sel = market <= cut if low_side else market >= cut
        if sel.sum() < 2:
            sel = np.ones_like(market, dtype=bool)
        mu[:, j] = Y[:, sel].mean(axis=1)
        sigma2[:, j] = Y[:, sel].var(axis=1) + VARIANCE_FLOOR
        Pi[j] = 1.0 / J
        Pi[:, j] = np.maximum(Pi[:, j], 1e-3)
    Pi /= Pi.sum(axis=1, keepdims=True)
    alpha = np.full(J, 1.0 / J)
    return GaussianHmmParams(alpha, Pi, mu, sigma2)


def baum_welch(
    data,
    init: GaussianHmmParams,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    rng=None,
) -> HmmFit:
    """EM estimation of all HMM parameters starting from ``init``.

    Stops when the relative change in log-likelihood drops below ``tol`` or
    after ``max_iter`` M-steps. ``trace[i]`` is the log-likelihood of the
    parameters after ``i`` M-steps; the returned parameters are those whose
    likelihood is ``trace[-1]``.
    """
    Y = _check_data(data)
    if Y.shape[0] != init.n_stocks:
        raise ValueError(f"init has {init.n_stocks} stocks, data has {Y.shape[0]}")
    rng = np.random.default_rng(rng)
    params = init
    trace: list[float] = []
    reseeds: list[int] = []
    converged = False
    it = 0
    while True:
        ll, gamma, xi_sum = forward_backward(params, Y)
        if trace and abs(ll - trace[-1]) <= tol * abs(trace[-1]):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        if it >= max_iter:
            break
        new, degenerate = _m_step(Y, gamma, xi_sum, params)
        if degenerate:
            if len(reseeds) >= MAX_RESEEDS:
                raise EstimationError(
                    f"state(s) {[j + 1 for j in degenerate]} never visited after {MAX_RESEEDS} re-seeds"
                )
            reseeds.append(it)
            new = _reseed(Y, new, degenerate, rng)
        params = new
        it += 1
    return HmmFit(params, trace[-1], trace, it, converged, reseeds)


def n_free_params(J: int, n_stocks: int) -> int:
    """Free parameters: initial distribution, transition rows, and a mean and variance per stock and state."""
    return (J - 1) + J * (J - 1) + 2 * J * n_stocks


def bic(params: GaussianHmmParams, data, loglik: float | None = None) -> float:
    """Bayesian information criterion, ``-2 LL + p ln(n)`` with ``n`` the number of weeks."""
    Y = _check_data(data)
    if loglik is None:
        loglik = log_likelihood(params, Y)
    return -2.0 * loglik + n_free_params(params.J, params.n_stocks) * math.log(Y.shape[1])


def random_init(data, rng, J: int = 2) -> GaussianHmmParams:
    """Random starting values.

    ``alpha`` and each row of ``Pi`` come from a flat Dirichlet. Emission
    moments are the per-stock mean and variance of the weeks falling in
    random quantile bands of the sector-average return.
    """
    Y = _check_data(data)
    rng = np.random.default_rng(rng)
    alpha = rng.dirichlet(np.ones(J))
    Pi = rng.dirichlet(np.ones(J), size=J)
    market = Y.mean(axis=0)
    cuts = np.sort(rng.uniform(0.2, 0.8, size=J - 1))
    edges = np.concatenate([[-np.inf], np.quantile(market, cuts), [np.inf]])
    mu = np.empty((Y.shape[0], J))
    sigma2 = np.empty((Y.shape[0], J))
    # state 0 gets the top band so the start is roughly bull-first
    for j in range(J):
        lo, hi = edges[J - 1 - j], edges[J - j]
        sel = (market > lo) & (market <= hi)
        if sel.sum() < 2:
            sel = np.ones_like(market, dtype=bool)
        mu[:, j] = Y[:, sel].mean(axis=1)
        sigma2[:, j] = Y[:, sel].var(axis=1)
    return GaussianHmmParams(alpha, Pi, mu, np.maximum(sigma2, VARIANCE_FLOOR))


def _one_restart(Y, rng, J, max_iter, tol):
    init = random_init(Y, rng, J)
    try:
        fit = baum_welch(Y, init, max_iter=max_iter, tol=tol, rng=rng)
    except EstimationError:
        return None
    if not math.isfinite(fit.loglik):
        return None
    fit.bic = bic(fit.params, Y, fit.loglik)
    return fit


def fit_with_restarts(
    data,
    restarts: int = DEFAULT_RESTARTS,
    rng_seed=None,
    J: int = 2,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    n_jobs: int = 1,
) -> HmmFit:
    """Run Baum-Welch from ``restarts`` random starts and keep the lowest BIC.

    Restart ``r`` draws its starting values from the ``r``-th child stream
    of ``rng_seed``.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    Y = _check_data(data)
    rngs = np.random.default_rng(rng_seed).spawn(restarts)
    if n_jobs == 1:
        fits = [_one_restart(Y, r, J, max_iter, tol) for r in rngs]
    else:
        from joblib import Parallel, delayed

        fits = Parallel(n_jobs=n_jobs)(delayed(_one_restart)(Y, r, J, max_iter, tol) for r in rngs)
    ok = [f for f in fits if f is not None]
    if not ok:
        raise EstimationError(f"all {restarts} restarts failed")
    best = min(ok, key=lambda f: f.bic)
    best.restart_bics = [f.bic if f is not None else math.nan for f in fits]
    return best


def viterbi(params: GaussianHmmParams, data) -> np.ndarray:
    """Most probable state path (1-based). Ties go to the lower state index."""
    Y = _check_data(data)
    logB = emission_logpdf(params, Y)
    with np.errstate(divide="ignore"):
        logA = np.log(params.Pi)
        delta = np.log(params.alpha) + logB[0]
    n, J = logB.shape
    back = np.zeros((n, J), dtype=int)
    for t in range(1, n):
        cand = delta[:, None] + logA  # cand[h, j]
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(J)] + logB[t]
    path = np.empty(n, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path + 1


def bull_scores(params: GaussianHmmParams) -> np.ndarray:
    """Per-state sum over stocks of mean / standard deviation."""
    return (params.mu / np.sqrt(params.sigma2)).sum(axis=0)


def permute_states(params: GaussianHmmParams, perm) -> GaussianHmmParams:
    """New state ``i`` is old state ``perm[i]``."""
    perm = np.asarray(perm, dtype=int)
    return replace(
        params,
        alpha=params.alpha[perm],
        Pi=params.Pi[np.ix_(perm, perm)],
        mu=params.mu[:, perm],
        sigma2=params.sigma2[:, perm],
    )


def relabel_states(params: GaussianHmmParams) -> GaussianHmmParams:
    """Order states by decreasing return-to-volatility score, so state 1 is bull.

    An exact tie between the two states keeps the original order and warns.
    """
    if params.J != 2:
        raise ValueError("relabelling is defined for two-state models")
    s = bull_scores(params)
    if s[0] == s[1]:
        warnings.warn("bull/bear scores tie; keeping state order", RuntimeWarning, stacklevel=2)
        return params
    if s[0] > s[1]:
        return params
    return permute_states(params, [1, 0])


def stationary_distribution(Pi) -> np.ndarray:
    """Solve ``eta Pi = eta`` with ``sum(eta) = 1`` for an irreducible chain."""
    Pi = np.atleast_2d(np.asarray(Pi, dtype=float))
    J = Pi.shape[0]
    n_comp, _ = connected_components(Pi > 0, directed=True, connection="strong")
    if n_comp != 1:
        raise ValueError("transition matrix is reducible; stationary distribution not unique")
    A = Pi.T - np.eye(J)
    A[-1] = 1.0
    b = np.zeros(J)
    b[-1] = 1.0
    eta = np.linalg.solve(A, b)
    eta = np.clip(eta, 0.0, None)
    return eta / eta.sum()


def simulate_emissions(params: GaussianHmmParams, states, rng) -> np.ndarray:
    """Independent Normal returns for each stock given 1-based weekly states, shape (n_d, n)."""
    idx = np.asarray(states, dtype=int) - 1
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((params.n_stocks, idx.size))
    return params.mu[:, idx] + np.sqrt(params.sigma2[:, idx]) * z


def sample_states(params: GaussianHmmParams, n: int, rng) -> np.ndarray:
    """Draw a 1-based state path of length ``n`` from the chain alone."""
    rng = np.random.default_rng(rng)
    cum = np.cumsum(params.Pi, axis=1)
    path = np.empty(n, dtype=int)
    s = int(np.searchsorted(np.cumsum(params.alpha), rng.random(), side="right"))
    s = min(s, params.J - 1)
    u = rng.random(n)
    path[0] = s
    for t in range(1, n):
        s = min(int(np.searchsorted(cum[s], u[t], side="right")), params.J - 1)
        path[t] = s
    return path + 1
