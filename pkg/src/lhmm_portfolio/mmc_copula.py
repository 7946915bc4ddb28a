"""Correlated Markov chains from a Gaussian copula, and copula calibration.

A chain with initial distribution ``alpha`` and transitions ``Pi`` is built
from uniforms by interval membership: the first state is the cumulative
``alpha`` interval containing ``U_1``, and each later state is the interval of
row ``Pi[z_{t-1}]`` containing ``U_t``. Drawing the uniforms of ``D`` chains
jointly as ``Phi(W)`` with ``W ~ MVN(0, Sigma)`` couples the chains at each
time step while leaving every chain marginally Markov.

``Sigma`` is calibrated pair by pair: for each pair of sectors we search for
the Spearman-scale parameter ``rho*`` whose synthetic state sequences
reproduce the observed state Spearman correlation, convert it with
``rho = 2 sin(pi rho* / 6)``, and repair the assembled matrix to be positive
definite.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from lhmm_portfolio.errors import CalibrationError, DomainError
from lhmm_portfolio.hmm_core import GaussianHmmParams, stationary_distribution

RHO_STAR_BOUND = 0.999
DEFAULT_EPS = 0.01
DEFAULT_TAU = 0.005
DEFAULT_SIM_LEN = 50_000
EIG_REPLACEMENT = 1e-6
MIN_EIGENVALUE = 1e-7


@dataclass(frozen=True)
class CopulaCorrelation:
    """Copula correlation matrix and the Spearman-scale values it came from."""

    Sigma: np.ndarray
    rho_star: np.ndarray | None = None
    repaired: bool = False

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise ValueError("Sigma must be square")
        object.__setattr__(self, "Sigma", S)
        if self.rho_star is not None:
            object.__setattr__(self, "rho_star", np.atleast_2d(np.asarray(self.rho_star, dtype=float)))

    @property
    def D(self) -> int:
        return self.Sigma.shape[0]


class PairCalibration(NamedTuple):
    rho_star: float  # Spearman-scale copula parameter
    rho: float  # Pearson correlation of the underlying Normals
    r_star: float  # Spearman correlation of the synthetic states at rho_star
    evaluations: int


# ---------------------------------------------------------------------------
# chain construction


def serfozo_h(u: float, alpha) -> int:
    """1-based state whose cumulative ``alpha`` interval ``[c_{j-1}, c_j)`` holds ``u``."""
    cum = np.cumsum(alpha)
    return min(bisect_right(cum.tolist(), u), len(cum) - 1) + 1


def serfozo_f(prev: int, u: float, Pi) -> int:
    """Next 1-based state from row ``prev`` (1-based) of ``Pi``."""
    row = np.cumsum(np.asarray(Pi, dtype=float)[prev - 1])
    return min(bisect_right(row.tolist(), u), len(row) - 1) + 1


def chains_from_uniforms(U: np.ndarray, starts: np.ndarray, Pis: np.ndarray) -> np.ndarray:
    """Apply the interval construction row by row.

    Parameters
    ----------
    U : (M, n) uniforms
    starts : (M, J) first-step distribution of each row
    Pis : (M, J, J) transition matrix of each row

    Returns 0-based states of shape (M, n).
    """
    U = np.asarray(U, dtype=float)
    M, n = U.shape
    J = starts.shape[1]
    cum_a = np.cumsum(starts, axis=1)
    cum_p = np.cumsum(Pis, axis=2)
    out = np.empty((M, n), dtype=np.int64)
    if M >= 32:
        z = np.minimum((U[:, :1] >= cum_a).sum(axis=1), J - 1)
        out[:, 0] = z
        rows = np.arange(M)
        for t in range(1, n):
            z = np.minimum((U[:, t : t + 1] >= cum_p[rows, z]).sum(axis=1), J - 1)
            out[:, t] = z
        return out
    # few long chains: a plain loop beats per-step array overhead
    last = J - 1
    for m in range(M):
        rows_m = [r.tolist() for r in cum_p[m]]
        u_row = U[m].tolist()
        z = min(bisect_right(cum_a[m].tolist(), u_row[0]), last)
        seq = [z]
        append = seq.append
        for u in u_row[1:]:
            z = bisect_right(rows_m[z], u)
            if z > last:
                z = last
            append(z)
        out[m] = seq
    return out


def _sqrt_factor(Sigma: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L^T = Sigma``; semidefinite input allowed."""
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        pass
    if np.linalg.eigvalsh(Sigma).min() < -1e-10:
        raise ValueError("Sigma not positive definite")
    # outer-product Cholesky that skips zero pivots (e.g. perfectly correlated pairs)
    D = Sigma.shape[0]
    A = Sigma.copy()
    L = np.zeros_like(A)
    for k in range(D):
        piv = A[k, k]
        if piv > 1e-12:
            L[k:, k] = A[k:, k] / math.sqrt(piv)
            A[k:, k:] -= np.outer(L[k:, k], L[k:, k])
    return L


def sample_correlated_uniforms(Sigma, n: int, rng) -> np.ndarray:
    """Uniform marginals with Gaussian-copula dependence, shape (D, n).

    Columns are independent; within a column ``U = Phi(W)``, ``W ~ MVN(0, Sigma)``.
    """
    S = Sigma.Sigma if isinstance(Sigma, CopulaCorrelation) else np.atleast_2d(np.asarray(Sigma, dtype=float))
    L = _sqrt_factor(S)
    rng = np.random.default_rng(rng)
    W = L @ rng.standard_normal((S.shape[0], n))
    return ndtr(W)


def _start_distribution(hmm: GaussianHmmParams, use_initial: bool) -> np.ndarray:
    return hmm.alpha if use_initial else stationary_distribution(hmm.Pi)


def generate_mmc(
    hmms: Sequence[GaussianHmmParams],
    Sigma,
    n: int,
    rng,
    use_initial: bool = True,
) -> np.ndarray:
    """Multivariate Markov chain of length ``n``, 1-based states of shape (D, n).

    Row ``d`` is marginally a chain with sector ``d``'s transition matrix,
    started from its estimated initial distribution (``use_initial``) or
    from its stationary distribution.
    """
    D = len(hmms)
    if D < 1:
        raise ValueError("need at least one chain")
    S = Sigma.Sigma if isinstance(Sigma, CopulaCorrelation) else np.atleast_2d(np.asarray(Sigma, dtype=float))
    if S.shape != (D, D):
        raise ValueError(f"Sigma must be {D}x{D}")
    U = sample_correlated_uniforms(S, n, rng)
    starts = np.array([_start_distribution(h, use_initial) for h in hmms])
    Pis = np.array([h.Pi for h in hmms])
    return chains_from_uniforms(U, starts, Pis) + 1


def generate_mmc_batch(
    hmms: Sequence[GaussianHmmParams],
    Sigma,
    n: int,
    n_paths: int,
    rng,
    use_initial: bool = True,
) -> np.ndarray:
    """``n_paths`` independent MMC samples at once, 1-based states of shape (n_paths, D, n)."""
    D = len(hmms)
    S = Sigma.Sigma if isinstance(Sigma, CopulaCorrelation) else np.atleast_2d(np.asarray(Sigma, dtype=float))
    L = _sqrt_factor(S)
    rng = np.random.default_rng(rng)
    W = np.einsum("de,pen->pdn", L, rng.standard_normal((n_paths, D, n)))
    U = ndtr(W).reshape(n_paths * D, n)
    starts = np.tile(np.array([_start_distribution(h, use_initial) for h in hmms]), (n_paths, 1))
    Pis = np.tile(np.array([h.Pi for h in hmms]), (n_paths, 1, 1))
    return chains_from_uniforms(U, starts, Pis).reshape(n_paths, D, n) + 1


# ---------------------------------------------------------------------------
# association measures


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("undefined correlation: constant input")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    r = float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))
    return max(-1.0, min(1.0, r))


def spearman_matrix(states: np.ndarray) -> np.ndarray:
    """Pairwise Spearman correlations of the rows of a (D, n) state matrix.

    A constant row has undefined correlation; its off-diagonal entries are 0.
    """
    states = np.asarray(states)
    D = states.shape[0]
    R = np.eye(D)
    for a in range(D):
        for b in range(a + 1, D):
            try:
                R[a, b] = R[b, a] = spearman(states[a], states[b])
            except ValueError:
                R[a, b] = R[b, a] = 0.0
    return R


def kruskal_rho(rho_star: float) -> float:
    """Pearson correlation of a bivariate Normal with Spearman correlation ``rho_star``."""
    if not -1.0 <= rho_star <= 1.0:
        raise DomainError("rho_star must lie in [-1, 1]")
    if abs(rho_star) == 1.0:
        return float(rho_star)
    return 2.0 * math.sin(math.pi * rho_star / 6.0)


# ---------------------------------------------------------------------------
# calibration


class _PairSimulator:
    """Synthetic state Spearman as a function of rho*, with common random numbers."""

    def __init__(self, hmm1, hmm2, sim_len, rng, use_initial=True):
        rng = np.random.default_rng(rng)
        self.Z = rng.standard_normal((2, sim_len))
        self.starts = np.array([_start_distribution(hmm1, use_initial), _start_distribution(hmm2, use_initial)])
        self.Pis = np.array([hmm1.Pi, hmm2.Pi])
        self.evaluations = 0
        self._cache: dict[float, float] = {}

    def __call__(self, rho_star: float) -> float:
        if rho_star in self._cache:
            return self._cache[rho_star]
        rho = kruskal_rho(rho_star)
        W2 = rho * self.Z[0] + math.sqrt(max(0.0, 1.0 - rho * rho)) * self.Z[1]
        U = ndtr(np.vstack([self.Z[0], W2]))
        z = chains_from_uniforms(U, self.starts, self.Pis)
        self.evaluations += 1
        try:
            r = spearman(z[0], z[1])
        except ValueError:
            r = 0.0
        self._cache[rho_star] = r
        return r


def calibrate_pair(
    hmm1: GaussianHmmParams,
    hmm2: GaussianHmmParams,
    target_r: float,
    tau: float = DEFAULT_TAU,
    eps: float = DEFAULT_EPS,
    sim_len: int = DEFAULT_SIM_LEN,
    rng=None,
    method: str = "bisection",
    use_initial: bool = True,
    max_iter: int = 60,
    xtol: float = 1e-4,
) -> PairCalibration:
    """Find ``rho*`` whose synthetic two-chain states have Spearman within ``eps`` of ``target_r``.

    ``method="bisection"`` brackets the crossing of the synthetic Spearman
    curve with ``target_r`` inside ``(-0.999, 0.999)`` and bisects it to
    width ``xtol``. ``method="step"`` starts at ``target_r`` and only
    moves upward by ``tau``, which fails for targets the starting point
    already overshoots. Both reuse one set of Normal draws for every
    evaluation.
    """
    if not abs(target_r) < 1:
        raise ValueError("target_r must lie strictly inside (-1, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    sim = _PairSimulator(hmm1, hmm2, sim_len, rng, use_initial)
    B = RHO_STAR_BOUND

    def done(x, r):
        return PairCalibration(x, kruskal_rho(x), r, sim.evaluations)

    if method == "step":
        x = target_r
        r = 0.0
        while abs(r - target_r) > eps:
            x += tau
            if x > B:
                raise CalibrationError(
                    f"step search passed rho*={B} without reaching target {target_r:.4f}; "
                    f"last synthetic Spearman {r:.4f}"
                )
            r = sim(x)
        return done(x, r)
    if method != "bisection":
        raise ValueError(f"unknown method {method!r}")

    # bracket the crossing r*(rho*) = target, then bisect it down to ``xtol``
    x = min(max(target_r, -B), B)
    r = sim(x)
    if r == target_r:
        return done(x, r)
    if r < target_r:
        lo, r_lo, hi, r_hi = x, r, B, sim(B)
        if r_hi < target_r - eps:
            raise CalibrationError(
                f"target Spearman {target_r:.4f} unreachable; maximum achievable is {r_hi:.4f}"
            )
        if r_hi <= target_r:
            return done(hi, r_hi)
    else:
        lo, r_lo, hi, r_hi = -B, sim(-B), x, r
        if r_lo > target_r + eps:
            raise CalibrationError(
                f"target Spearman {target_r:.4f} unreachable; minimum achievable is {r_lo:.4f}"
            )
        if r_lo >= target_r:
            return done(lo, r_lo)
    for _ in range(max_iter):
        if hi - lo <= xtol:
            break
        mid = 0.5 * (lo + hi)
        r = sim(mid)
        if r == target_r:
            return done(mid, r)
        if r < target_r:
            lo, r_lo = mid, r
        else:
            hi, r_hi = mid, r
    x, r = (lo, r_lo) if abs(r_lo - target_r) <= abs(r_hi - target_r) else (hi, r_hi)
    if abs(r - target_r) > eps:
        raise CalibrationError(
            f"bisection did not reach target {target_r:.4f} within eps={eps}; "
            f"closest rho*={x:.6f} gave {r:.4f}"
        )
    return done(x, r)


def _is_pd(S: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def assemble_sigma(pair_estimates, rho_star=None, replacement: float = EIG_REPLACEMENT) -> CopulaCorrelation:
    """Build a valid copula correlation matrix from pairwise estimates.

    A positive definite input is returned as is. Otherwise non-positive
    eigenvalues are replaced by ``replacement``, the matrix is reassembled and
    rescaled to unit diagonal; this repeats until the smallest eigenvalue is
    at least ``MIN_EIGENVALUE``.
    """
    S = np.array(pair_estimates, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("pair estimates must be a square matrix")
    if not np.allclose(S, S.T, atol=1e-12):
        raise ValueError("pair estimates must be symmetric")
    if not np.allclose(np.diag(S), 1.0, atol=1e-12):
        raise ValueError("pair estimates must have unit diagonal")
    if _is_pd(S) and np.linalg.eigvalsh(S).min() >= MIN_EIGENVALUE:
        return CopulaCorrelation(S, rho_star, repaired=False)
    for _ in range(100):
        vals, vecs = np.linalg.eigh(S)
        vals = np.where(vals <= 0, replacement, vals)
        vals = np.maximum(vals, replacement)
        S = (vecs * vals) @ vecs.T
        d = np.sqrt(np.diag(S))
        S = S / np.outer(d, d)
        S = 0.5 * (S + S.T)
        np.fill_diagonal(S, 1.0)
        if np.linalg.eigvalsh(S).min() >= MIN_EIGENVALUE:
            break
    else:
        raise CalibrationError("could not repair Sigma to positive definite")
    return CopulaCorrelation(S, rho_star, repaired=True)


def calibrate_sigma(
    hmms: Sequence[GaussianHmmParams],
    observed: np.ndarray,
    rng=None,
    n_jobs: int = 1,
    **kwargs,
) -> CopulaCorrelation:
    """Calibrate every sector pair and assemble ``Sigma``.

    Pair ``(a, b)`` with ``a < b`` uses the ``k``-th child stream of ``rng``,
    where ``k`` enumerates pairs row by row.
    """
    D = len(hmms)
    pairs = [(a, b) for a in range(D) for b in range(a + 1, D)]
    rngs = np.random.default_rng(rng).spawn(len(pairs)) if pairs else []
    jobs = [(hmms[a], hmms[b], float(observed[a, b]), r) for (a, b), r in zip(pairs, rngs)]
    if n_jobs == 1 or len(jobs) < 2:
        results = [calibrate_pair(h1, h2, t, rng=r, **kwargs) for h1, h2, t, r in jobs]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(calibrate_pair)(h1, h2, t, rng=r, **kwargs) for h1, h2, t, r in jobs
        )
    rho = np.eye(D)
    rho_star = np.eye(D)
    for (a, b), res in zip(pairs, results):
        rho[a, b] = rho[b, a] = res.rho
        rho_star[a, b] = rho_star[b, a] = res.rho_star
    return assemble_sigma(rho, rho_star)
