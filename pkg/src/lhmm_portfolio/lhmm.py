"""Two-stage fitting of the linked HMM and simulation from the fitted model.

Stage 1 fits each sector's HMM independently on Yeo-Johnson transformed
returns, decodes its bull/bear path and measures pairwise Spearman
correlations between the decoded paths. Stage 2 calibrates the copula
correlation matrix to those correlations, draws a long synthetic
multivariate chain from it, and restarts Baum-Welch in every sector from the
initial and transition probabilities estimated on the synthetic states.

Random streams: the root seed is split with numpy's ``spawn`` into four
children used, in order, for stage-1 sector fits (one grandchild per
sector), pair calibrations (one grandchild per pair), the synthetic chain,
and stage-2 Baum-Welch runs (one grandchild per sector).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from lhmm_portfolio import hmm_core
from lhmm_portfolio.data_ingest import WeeklyReturnPanel
from lhmm_portfolio.errors import CalibrationError, EstimationError, LhmmError, ValidationError
from lhmm_portfolio.hmm_core import GaussianHmmParams, HmmFit
from lhmm_portfolio.mmc_copula import (
    DEFAULT_EPS,
    DEFAULT_SIM_LEN,
    DEFAULT_TAU,
    RHO_STAR_BOUND,
    CopulaCorrelation,
    assemble_sigma,
    calibrate_pair,
    generate_mmc,
    generate_mmc_batch,
    kruskal_rho,
    spearman_matrix,
)
from lhmm_portfolio.transforms import YeoJohnsonParams, fit_lambdas, yj_inverse, yj_inverse_valid

FORMAT_VERSION = "lhmm-model/1"
MODES = ("lhmm", "independent_hmms")
DEFAULT_SYNTH_LEN = 10_000
MAX_RESAMPLES = 1_000_000
_CHUNK_FLOATS = 4_000_000


@dataclass
class LhmmModel:
    tickers: list[str]
    sector_names: tuple[str, ...]
    sector_of: np.ndarray
    sector_hmms: list[GaussianHmmParams]
    sigma: CopulaCorrelation
    yj: YeoJohnsonParams
    observed_spearman: np.ndarray
    mode: str = "lhmm"
    use_initial: bool = True
    metadata: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sector_of = np.asarray(self.sector_of, dtype=int)
        self.observed_spearman = np.atleast_2d(np.asarray(self.observed_spearman, dtype=float))
        D = len(self.sector_hmms)
        if D < 1:
            raise ValidationError("model needs at least one sector")
        if len(self.sector_names) != D or self.sigma.D != D:
            raise ValidationError("sector count disagrees between HMMs, names and Sigma")
        if self.yj.lam.size != len(self.tickers) or self.sector_of.size != len(self.tickers):
            raise ValidationError("every stock needs a sector and a lambda")
        for d, h in enumerate(self.sector_hmms):
            if h.n_stocks != int((self.sector_of == d).sum()):
                raise ValidationError(f"sector {self.sector_names[d]!r} HMM has the wrong number of stocks")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")

    @property
    def D(self) -> int:
        return len(self.sector_hmms)

    @property
    def K(self) -> int:
        return len(self.tickers)

    def sector_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.sector_of == d) for d in range(self.D)]

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "mode": self.mode,
            "use_initial": self.use_initial,
            "D": self.D,
            "K": self.K,
            "sectors": [
                {
                    "name": name,
                    "tickers": [self.tickers[i] for i in idx],
                    **self.sector_hmms[d].to_dict(),
                }
                for d, (name, idx) in enumerate(zip(self.sector_names, self.sector_indices()))
            ],
            "tickers": list(self.tickers),
            "lambda": self.yj.lam.tolist(),
            "Sigma": self.sigma.Sigma.tolist(),
            "rho_star": None if self.sigma.rho_star is None else self.sigma.rho_star.tolist(),
            "sigma_repaired": bool(self.sigma.repaired),
            "observed_spearman": self.observed_spearman.tolist(),
            "metadata": self.metadata,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, indent: int | None = 1) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False, allow_nan=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "LhmmModel":
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported model format {version!r}; expected {FORMAT_VERSION!r}")
        tickers = list(doc["tickers"])
        pos = {t: i for i, t in enumerate(tickers)}
        sector_of = np.empty(len(tickers), dtype=int)
        hmms = []
        names = []
        for d, sec in enumerate(doc["sectors"]):
            names.append(sec["name"])
            for t in sec["tickers"]:
                sector_of[pos[t]] = d
            hmms.append(GaussianHmmParams.from_dict(sec))
        rho_star = doc.get("rho_star")
        sigma = CopulaCorrelation(
            np.array(doc["Sigma"], dtype=float),
            None if rho_star is None else np.array(rho_star, dtype=float),
            bool(doc.get("sigma_repaired", False)),
        )
        return cls(
            tickers=tickers,
            sector_names=tuple(names),
            sector_of=sector_of,
            sector_hmms=hmms,
            sigma=sigma,
            yj=YeoJohnsonParams(np.array(doc["lambda"], dtype=float)),
            observed_spearman=np.array(doc["observed_spearman"], dtype=float),
            mode=doc.get("mode", "lhmm"),
            use_initial=bool(doc.get("use_initial", True)),
            metadata=doc.get("metadata", {}),
            diagnostics=doc.get("diagnostics", {}),
        )

    @classmethod
    def load(cls, path) -> "LhmmModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# fitting


def _fit_sector(name, Y, restarts, rng, max_iter, tol, n_jobs) -> HmmFit:
    try:
        return hmm_core.fit_with_restarts(Y, restarts, rng, max_iter=max_iter, tol=tol, n_jobs=n_jobs)
    except EstimationError as exc:
        raise EstimationError(f"sector {name!r}: {exc}") from exc


def _fit_summary(fit: HmmFit) -> dict:
    trace = fit.trace
    return {
        "loglik": fit.loglik,
        "bic": fit.bic,
        "n_iter": fit.n_iter,
        "converged": fit.converged,
        "reseeds": len(fit.reseeds),
        "ll_first": trace[0] if trace else None,
        "ll_last": trace[-1] if trace else None,
        "min_ll_step": float(np.diff(trace).min()) if len(trace) > 1 else None,
        "restart_bics": [None if not math.isfinite(b) else b for b in fit.restart_bics],
    }


def _empirical_chain(states: np.ndarray, J: int, fallback: GaussianHmmParams):
    """Occupancy frequencies and transition frequencies of a 1-based path."""
    z = np.asarray(states) - 1
    alpha = np.bincount(z, minlength=J).astype(float)
    alpha /= alpha.sum()
    counts = np.zeros((J, J))
    np.add.at(counts, (z[:-1], z[1:]), 1.0)
    rows = counts.sum(axis=1, keepdims=True)
    Pi = np.where(rows > 0, counts / np.where(rows > 0, rows, 1.0), fallback.Pi)
    return alpha, Pi


def _calibrate_all(hmms, observed, rng, use_initial, n_jobs, calib_kwargs):
    """Calibrate every pair; unreachable targets are pinned to the rho* bound."""
    D = len(hmms)
    pairs = [(a, b) for a in range(D) for b in range(a + 1, D)]
    rngs = np.random.default_rng(rng).spawn(len(pairs)) if pairs else []

    def one(a, b, r):
        target = float(np.clip(observed[a, b], -0.999999, 0.999999))
        try:
            res = calibrate_pair(hmms[a], hmms[b], target, rng=r, use_initial=use_initial, **calib_kwargs)
            return res._asdict() | {"pinned": False}
        except CalibrationError as exc:
            x = math.copysign(RHO_STAR_BOUND, target)
            return {"rho_star": x, "rho": kruskal_rho(x), "r_star": None, "evaluations": None,
                    "pinned": True, "message": str(exc)}

    if n_jobs == 1 or len(pairs) < 2:
        results = [one(a, b, r) for (a, b), r in zip(pairs, rngs)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(one)(a, b, r) for (a, b), r in zip(pairs, rngs))
    rho = np.eye(D)
    rho_star = np.eye(D)
    log = []
    for (a, b), res in zip(pairs, results):
        rho[a, b] = rho[b, a] = res["rho"]
        rho_star[a, b] = rho_star[b, a] = res["rho_star"]
        if res["pinned"]:
            warnings.warn(f"pair ({a}, {b}): {res['message']}; rho* pinned at bound", RuntimeWarning)
        log.append({"pair": [a, b], "target": float(observed[a, b]), **res})
    return assemble_sigma(rho, rho_star), log


def fit_two_stage(
    panel: WeeklyReturnPanel,
    restarts: int = hmm_core.DEFAULT_RESTARTS,
    seed=None,
    *,
    mode: str = "lhmm",
    eps: float = DEFAULT_EPS,
    tau: float = DEFAULT_TAU,
    sim_len: int = DEFAULT_SIM_LEN,
    calibration: str = "bisection",
    synth_len: int = DEFAULT_SYNTH_LEN,
    use_initial: bool = True,
    transform: bool = True,
    max_iter: int = hmm_core.DEFAULT_MAX_ITER,
    tol: float = hmm_core.DEFAULT_TOL,
    n_jobs: int = 1,
) -> LhmmModel:
    """Fit the linked HMM to a weekly return panel.

    ``mode="independent_hmms"`` stops after stage 1 and uses an identity
    copula. ``transform=False`` fixes every lambda at 1 (identity transform).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    D = panel.D
    blocks = panel.sector_indices()
    for d, idx in enumerate(blocks):
        if idx.size == 0:
            raise ValidationError(f"sector {panel.sector_names[d]!r} has no stocks")
    s_fit, s_pairs, s_synth, s_refit = np.random.default_rng(seed).spawn(4)
    sector_rngs = s_fit.spawn(D)
    refit_rngs = s_refit.spawn(D)

    yj = fit_lambdas(panel.returns) if transform else YeoJohnsonParams(np.ones(panel.K))
    Ystar = yj.transform(panel.returns)

    # stage 1
    fits = [
        _fit_sector(panel.sector_names[d], Ystar[blocks[d]], restarts, sector_rngs[d], max_iter, tol, n_jobs)
        for d in range(D)
    ]
    hmms = [hmm_core.relabel_states(f.params) for f in fits]
    paths = np.array([hmm_core.viterbi(h, Ystar[blocks[d]]) for d, h in enumerate(hmms)])
    for d in range(D):
        if np.ptp(paths[d]) == 0:
            warnings.warn(
                f"sector {panel.sector_names[d]!r} decodes to a single state; its Spearman correlations are set to 0",
                RuntimeWarning,
            )
    observed = spearman_matrix(paths)
    diagnostics = {
        "stage1": {name: _fit_summary(f) for name, f in zip(panel.sector_names, fits)},
        "decoded_state1_share": {
            name: float(np.mean(paths[d] == 1)) for d, name in enumerate(panel.sector_names)
        },
    }

    if mode == "independent_hmms" or D == 1:
        sigma = CopulaCorrelation(np.eye(D), np.eye(D), repaired=False)
    else:
        calib_kwargs = {"eps": eps, "tau": tau, "sim_len": sim_len, "method": calibration}
        sigma, log = _calibrate_all(hmms, observed, s_pairs, use_initial, n_jobs, calib_kwargs)
        diagnostics["calibration"] = log
        diagnostics["sigma_repaired"] = bool(sigma.repaired)

        # stage 2
        synth = generate_mmc(hmms, sigma, synth_len, s_synth, use_initial=use_initial)
        refits = []
        for d in range(D):
            alpha, Pi = _empirical_chain(synth[d], hmms[d].J, hmms[d])
            init = GaussianHmmParams(alpha, Pi, hmms[d].mu, hmms[d].sigma2)
            try:
                fit = hmm_core.baum_welch(Ystar[blocks[d]], init, max_iter=max_iter, tol=tol, rng=refit_rngs[d])
            except EstimationError as exc:
                raise EstimationError(f"sector {panel.sector_names[d]!r} stage 2: {exc}") from exc
            fit.bic = hmm_core.bic(fit.params, Ystar[blocks[d]], fit.loglik)
            refits.append(fit)
        hmms = [hmm_core.relabel_states(f.params) for f in refits]
        diagnostics["stage2"] = {name: _fit_summary(f) for name, f in zip(panel.sector_names, refits)}

    diagnostics["bic"] = {
        name: float(hmm_core.bic(h, Ystar[blocks[d]])) for d, (name, h) in enumerate(zip(panel.sector_names, hmms))
    }
    metadata = {
        "n_weeks": panel.n,
        "start": panel.dates[0].isoformat() if panel.dates else None,
        "end": panel.dates[-1].isoformat() if panel.dates else None,
        "seed": seed if isinstance(seed, (int, type(None))) else repr(seed),
        "restarts": restarts,
        "calibration": {"method": calibration, "eps": eps, "tau": tau, "sim_len": sim_len},
        "synth_len": synth_len,
    }
    return LhmmModel(
        tickers=list(panel.tickers),
        sector_names=tuple(panel.sector_names),
        sector_of=panel.sector_of.copy(),
        sector_hmms=hmms,
        sigma=sigma,
        yj=yj,
        observed_spearman=observed,
        mode=mode,
        use_initial=use_initial,
        metadata=metadata,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# simulation


def _emissions(model: LhmmModel, states: np.ndarray, rng) -> np.ndarray:
    """Transformed-scale emissions for 1-based states (P, D, n); returns (P, K, n)."""
    P, _, n = states.shape
    out = np.empty((P, model.K, n))
    for d, idx in enumerate(model.sector_indices()):
        h = model.sector_hmms[d]
        s = states[:, d, :] - 1
        mu = h.mu[:, s]  # (n_d, P, n)
        sd = np.sqrt(h.sigma2[:, s])
        z = rng.standard_normal(mu.shape)
        out[:, idx, :] = np.moveaxis(mu + sd * z, 0, 1)
    return out


def _back_transform(model: LhmmModel, states: np.ndarray, Ystar: np.ndarray, rng) -> np.ndarray:
    """Inverse-transform in place; cells outside the inverse's range, or mapping to
    a change of -100% or worse, are redrawn from their state's emission law."""
    Y = np.empty_like(Ystar)
    P = Ystar.shape[0]
    redraws = np.zeros(P, dtype=np.int64)
    sec = model.sector_of
    pos_in_sector = np.zeros(model.K, dtype=int)
    for idx in model.sector_indices():
        pos_in_sector[idx] = np.arange(idx.size)
    for k in range(model.K):
        lam = model.yj.lam[k]
        h = model.sector_hmms[sec[k]]
        i = pos_in_sector[k]
        col = Ystar[:, k, :]
        while True:
            ok = yj_inverse_valid(col, lam)
            vals = np.full(col.shape, -np.inf)
            vals[ok] = yj_inverse(col[ok], lam)
            bad = ~(vals > -1.0)
            if not bad.any():
                break
            redraws += bad.sum(axis=1)
            if redraws.max() > MAX_RESAMPLES:
                raise LhmmError(f"more than {MAX_RESAMPLES} out-of-range draws in one simulated dataset")
            s = states[:, sec[k], :][bad] - 1
            col = col.copy()
            col[bad] = h.mu[i, s] + np.sqrt(h.sigma2[i, s]) * rng.standard_normal(s.size)
        Y[:, k, :] = vals
    return Y


def simulate_batch(model: LhmmModel, n_paths: int, n_weeks: int, rng) -> np.ndarray:
    """``n_paths`` simulated return panels on the original scale, shape (n_paths, K, n_weeks)."""
    rng = np.random.default_rng(rng)
    states = generate_mmc_batch(model.sector_hmms, model.sigma, n_weeks, n_paths, rng, model.use_initial)
    Ystar = _emissions(model, states, rng)
    return _back_transform(model, states, Ystar, rng)


def simulate_dataset(model: LhmmModel, n_weeks: int, rng) -> WeeklyReturnPanel:
    """One simulated panel of weekly returns on the original scale."""
    Y = simulate_batch(model, 1, n_weeks, rng)[0]
    return WeeklyReturnPanel(list(model.tickers), tuple(model.sector_names), model.sector_of.copy(), Y, [])


def simulate_cumulative_returns(model: LhmmModel, n_datasets: int, n_weeks: int, rng) -> np.ndarray:
    """``R[i, k]``: product over ``n_weeks`` of ``1 + Y`` for stock ``k`` in dataset ``i``.

    Datasets are generated in chunks whose size depends only on ``K`` and
    ``n_weeks``, so the result is a function of ``(model, n_datasets, n_weeks, rng)``.
    """
    rng = np.random.default_rng(rng)
    chunk = max(1, _CHUNK_FLOATS // (model.K * n_weeks))
    R = np.empty((n_datasets, model.K))
    for start in range(0, n_datasets, chunk):
        p = min(chunk, n_datasets - start)
        Y = simulate_batch(model, p, n_weeks, rng)
        R[start : start + p] = np.exp(np.log1p(Y).sum(axis=2))
    return R
