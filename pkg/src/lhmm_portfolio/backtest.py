"""End-to-end protocol: ingest, fit, simulate, optimise, backtest, compare.

Seeds: the root seed is split with ``numpy.random.SeedSequence(seed).spawn(3)``
into a fitting stream, a replicate stream (child ``r`` drives replicate
``r``; the min-variance and balanced solves of a replicate share its
simulated returns) and a bootstrap stream. Every model mode in a comparison
uses the same three streams, so the modes see common random numbers.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from lhmm_portfolio import data_ingest
from lhmm_portfolio.data_ingest import PricePanel, SectorMap, WeeklyReturnPanel
from lhmm_portfolio.errors import ConfigError, ValidationError
from lhmm_portfolio.lhmm import MODES, LhmmModel, fit_two_stage, simulate_cumulative_returns
from lhmm_portfolio.portfolio import (
    PortfolioWeights,
    bootstrap_ci,
    estimate_moments,
    optimize_balanced,
    optimize_min_variance,
    realized_gain,
    transaction_count,
)
from lhmm_portfolio.schemas import validate_report

log = logging.getLogger(__name__)

REPORT_VERSION = "lhmm-report/1"
OBJECTIVES = ("min_variance", "balanced")


@dataclass
class RunConfig:
    prices: str | None = None
    sectors: str | None = None
    index: str | None = None
    model: str | None = None
    output_dir: str = "out"
    train_start: dt.date = dt.date(2011, 10, 1)
    train_end: dt.date = dt.date(2016, 9, 30)
    test_start: dt.date = dt.date(2016, 10, 1)
    test_end: dt.date = dt.date(2017, 9, 30)
    min_weeks: int = 260
    restarts: int = 20
    n_simulations: int = 10_000
    n_weeks: int = 260
    replicates: int = 100
    q: float = 2.0
    eps: float = 0.01
    tau: float = 0.005
    sim_len: int = 50_000
    calibration: str = "bisection"
    synth_len: int = 10_000
    starts: int = 50
    bootstrap: int = 10_000
    seed: int = 0
    jobs: int = 1
    mode: str = "lhmm"
    use_initial: bool = True
    transform: bool = True
    long_only: bool = True
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("train_start", "train_end", "test_start", "test_end"):
            v = getattr(self, name)
            if isinstance(v, str):
                try:
                    setattr(self, name, dt.date.fromisoformat(v))
                except ValueError:
                    raise ConfigError(f"{name}: bad date {v!r}") from None
        self.validate()

    def validate(self) -> None:
        if not self.train_start <= self.train_end < self.test_start <= self.test_end:
            raise ConfigError("train window must precede the test window")
        for name in ("min_weeks", "restarts", "n_simulations", "n_weeks", "replicates",
                     "sim_len", "synth_len", "starts", "bootstrap", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.q < 0:
            raise ConfigError("q must be >= 0")
        if self.eps <= 0 or self.tau <= 0:
            raise ConfigError("eps and tau must be positive")
        if self.mode not in MODES + ("both",):
            raise ConfigError(f"mode must be one of {MODES + ('both',)}")
        if self.calibration not in ("bisection", "step"):
            raise ConfigError("calibration must be 'bisection' or 'step'")

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping of keys to values")
        base = Path(path).parent
        for key in ("prices", "sectors", "index", "model", "output_dir"):
            if isinstance(doc.get(key), str) and not Path(doc[key]).is_absolute():
                doc[key] = str(base / doc[key])
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)} - {"extra"}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            v = getattr(self, f.name)
            out[f.name] = v.isoformat() if isinstance(v, dt.date) else v
        return out

    def seeds(self):
        """Fitting, replicate and bootstrap seed sequences."""
        return np.random.SeedSequence(self.seed).spawn(3)


# ---------------------------------------------------------------------------
# data


def _require(path, what):
    if not path:
        raise ConfigError(f"config needs {what}")
    return path


def load_universe(config: RunConfig) -> tuple[PricePanel, SectorMap]:
    return data_ingest.load_prices(_require(config.prices, "prices"), _require(config.sectors, "sectors"))


def load_train_panel(config: RunConfig, prices: PricePanel, sectors: SectorMap) -> WeeklyReturnPanel:
    window = prices.window(config.train_start, config.train_end)
    kept = data_ingest.filter_history(window, config.min_weeks)
    return data_ingest.compute_weekly_returns(kept, sectors)


def load_test_panel(config: RunConfig, prices: PricePanel, sectors: SectorMap, tickers) -> WeeklyReturnPanel:
    """Weekly returns over the test window for ``tickers``.

    The last close before ``test_start`` (if any) is the base price, so the
    first test week's change counts toward the gain.
    """
    before = [i for i, d in enumerate(prices.dates) if d < config.test_start]
    inside = [i for i, d in enumerate(prices.dates) if config.test_start <= d <= config.test_end]
    cols = ([before[-1]] if before else []) + inside
    if len(cols) < 2:
        raise ValidationError("test window holds fewer than two closes")
    panel = PricePanel(list(prices.tickers), [prices.dates[i] for i in cols], prices.closes[:, cols])
    panel = panel.subset(list(tickers))
    gaps = [t for t, row in zip(panel.tickers, panel.closes) if np.isnan(row).any()]
    if gaps:
        raise ValidationError(f"test window has missing closes for: {', '.join(gaps[:10])}")
    return data_ingest.compute_weekly_returns(panel, sectors)


# ---------------------------------------------------------------------------
# commands


def _out(config: RunConfig) -> Path:
    p = Path(config.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def cmd_ingest(config: RunConfig) -> dict:
    prices, sectors = load_universe(config)
    panel = load_train_panel(config, prices, sectors)
    out = _out(config)
    with open(out / "returns.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "ticker", "sector", "return"])
        for k, t in enumerate(panel.tickers):
            sector = panel.sector_names[panel.sector_of[k]]
            for d, y in zip(panel.dates, panel.returns[k]):
                w.writerow([d.isoformat(), t, sector, repr(float(y))])
    summary = {
        "K": panel.K,
        "D": panel.D,
        "n_weeks": panel.n,
        "start": panel.dates[0].isoformat(),
        "end": panel.dates[-1].isoformat(),
        "stocks_per_sector": {name: int(idx.size) for name, idx in zip(panel.sector_names, panel.sector_indices())},
        "tickers_dropped": prices.K - panel.K,
    }
    _write_json(out / "ingest_summary.json", summary)
    return summary


def fit_model(config: RunConfig, mode: str | None = None, panel: WeeklyReturnPanel | None = None) -> LhmmModel:
    if panel is None:
        prices, sectors = load_universe(config)
        panel = load_train_panel(config, prices, sectors)
    fit_ss, _, _ = config.seeds()
    model = fit_two_stage(
        panel,
        restarts=config.restarts,
        seed=fit_ss,
        mode=mode or (config.mode if config.mode != "both" else "lhmm"),
        eps=config.eps,
        tau=config.tau,
        sim_len=config.sim_len,
        calibration=config.calibration,
        synth_len=config.synth_len,
        use_initial=config.use_initial,
        transform=config.transform,
        n_jobs=config.jobs,
    )
    model.metadata["seed"] = config.seed
    return model


def _fit_report(model: LhmmModel) -> dict:
    return {
        "mode": model.mode,
        "D": model.D,
        "K": model.K,
        "bic": model.diagnostics.get("bic", {}),
        "Sigma": model.sigma.Sigma.tolist(),
        "sigma_repaired": bool(model.sigma.repaired),
        "observed_spearman": model.observed_spearman.tolist(),
        "sectors": list(model.sector_names),
    }


def cmd_fit(config: RunConfig) -> LhmmModel:
    model = fit_model(config)
    out = _out(config)
    path = Path(config.model) if config.model else out / "model.json"
    model.save(path)
    _write_json(out / "fit_report.json", _fit_report(model))
    return model


def _load_model(config: RunConfig) -> LhmmModel:
    path = Path(config.model) if config.model else Path(config.output_dir) / "model.json"
    if not path.exists():
        raise ConfigError(f"model file {path} not found; run `fit` first")
    return LhmmModel.load(path)


def cmd_simulate(config: RunConfig, model: LhmmModel | None = None) -> np.ndarray:
    model = model or _load_model(config)
    _, rep_ss, _ = config.seeds()
    R = simulate_cumulative_returns(model, config.n_simulations, config.n_weeks, np.random.default_rng(rep_ss.spawn(1)[0]))
    out = _out(config)
    with open(out / "simulated_returns.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(model.tickers)
        w.writerows([[repr(float(v)) for v in row] for row in R])
    return R


def _solve(model: LhmmModel, config: RunConfig, rng) -> dict[str, PortfolioWeights]:
    R = simulate_cumulative_returns(model, config.n_simulations, config.n_weeks, rng)
    m = estimate_moments(R)
    mv = optimize_min_variance(m, starts=config.starts, rng=rng, long_only=config.long_only)
    bal = optimize_balanced(m, q=config.q, starts=config.starts, rng=rng, long_only=config.long_only)
    return {
        "min_variance": dataclasses.replace(mv, tickers=list(model.tickers)),
        "balanced": dataclasses.replace(bal, tickers=list(model.tickers)),
    }


def write_weights(path, weights: PortfolioWeights, model: LhmmModel) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["ticker", "sector", "weight"])
        for t, d, x in zip(model.tickers, model.sector_of, weights.w):
            w.writerow([t, model.sector_names[d], repr(float(x))])


def cmd_optimize(config: RunConfig, model: LhmmModel | None = None) -> dict[str, PortfolioWeights]:
    model = model or _load_model(config)
    _, rep_ss, _ = config.seeds()
    sols = _solve(model, config, np.random.default_rng(rep_ss.spawn(1)[0]))
    out = _out(config)
    summary = {}
    for name, pw in sols.items():
        write_weights(out / f"weights_{name}.csv", pw, model)
        summary[name] = {
            "expected_return": pw.expected_return,
            "variance": pw.variance,
            "objective": pw.value,
            "q": pw.q,
            "transactions": transaction_count(pw),
        }
    _write_json(out / "optimize_report.json", summary)
    return sols


def _replicate(model: LhmmModel, config: RunConfig, seed, tpanel: WeeklyReturnPanel) -> dict:
    rng = np.random.default_rng(seed)
    sols = _solve(model, config, rng)
    out = {}
    for name, pw in sols.items():
        g = realized_gain(pw, tpanel)
        out[name] = {
            "gain": g.total,
            "sector_gains": g.by_sector,
            "transactions": transaction_count(pw),
            "expected_return": pw.expected_return,
            "variance": pw.variance,
        }
    return out


def _ci_block(values, rng, config: RunConfig) -> dict:
    values = np.asarray(values, dtype=float)
    if values.size >= 10:
        lo, hi, mean = bootstrap_ci(values, 0.95, config.bootstrap, rng)
        return {"mean": mean, "ci_low": lo, "ci_high": hi}
    return {"mean": float(values.mean()), "ci_low": None, "ci_high": None}


def run_backtest(model: LhmmModel, tpanel: WeeklyReturnPanel, config: RunConfig) -> list[dict]:
    """All replicates for one model; returns one portfolio entry per objective."""
    _, rep_ss, boot_ss = config.seeds()
    seeds = rep_ss.spawn(config.replicates)
    if config.jobs > 1 and config.replicates > 1:
        from joblib import Parallel, delayed

        reps = Parallel(n_jobs=config.jobs)(delayed(_replicate)(model, config, s, tpanel) for s in seeds)
    else:
        reps = []
        for i, s in enumerate(seeds):
            reps.append(_replicate(model, config, s, tpanel))
            log.info("replicate %d/%d done", i + 1, config.replicates)
    sector_names = list(tpanel.sector_names)
    entries = []
    for j, obj in enumerate(OBJECTIVES):
        boot = np.random.default_rng(boot_ss.spawn(len(OBJECTIVES))[j])
        gains = [r[obj]["gain"] for r in reps]
        sec = [r[obj]["sector_gains"] for r in reps]
        tx = [r[obj]["transactions"] for r in reps]
        entries.append({
            "model": model.mode,
            "objective": obj,
            "q": config.q if obj == "balanced" else None,
            "replicates": len(reps),
            "total": _ci_block(gains, boot, config),
            "sectors": {s: _ci_block([x[s] for x in sec], boot, config) for s in sector_names},
            "transactions": {
                "mean": float(np.mean(tx)),
                "sd": float(np.std(tx, ddof=1)) if len(tx) > 1 else None,
                "per_replicate": tx,
            },
            "expected_return": {"mean": float(np.mean([r[obj]["expected_return"] for r in reps]))},
            "variance": {"mean": float(np.mean([r[obj]["variance"] for r in reps]))},
            "replicate_gains": gains,
            "replicate_sector_gains": sec,
        })
    return entries


def _model_summary(model: LhmmModel) -> dict:
    return {
        "Sigma": model.sigma.Sigma.tolist(),
        "observed_spearman": model.observed_spearman.tolist(),
        "bic": model.diagnostics.get("bic", {}),
        "sigma_repaired": bool(model.sigma.repaired),
    }


def build_report(config: RunConfig, models: list[LhmmModel], tpanel: WeeklyReturnPanel) -> dict:
    portfolios = []
    for model in models:
        portfolios.extend(run_backtest(model, tpanel, config))
    index_gain = None
    if config.index:
        index_gain = data_ingest.index_gain_pct(config.index, config.test_start, config.test_end)
    report = {
        "format_version": REPORT_VERSION,
        "config": config.to_dict(),
        "test_window": {
            "start": config.test_start.isoformat(),
            "end": config.test_end.isoformat(),
            "n_weeks": tpanel.n,
        },
        "index_gain_pct": index_gain,
        "sectors": list(tpanel.sector_names),
        "models": {m.mode: _model_summary(m) for m in models},
        "portfolios": portfolios,
    }
    validate_report(report)
    return report


def cmd_backtest(config: RunConfig, model: LhmmModel | None = None) -> dict:
    model = model or _load_model(config)
    prices, sectors = load_universe(config)
    tpanel = load_test_panel(config, prices, sectors, model.tickers)
    report = build_report(config, [model], tpanel)
    _write_json(_out(config) / "report.json", report)
    return report


def cmd_compare(config: RunConfig, mode: str = "both") -> dict:
    """Fit the requested model(s) on the training window and backtest each."""
    modes = MODES if mode == "both" else (mode,)
    prices, sectors = load_universe(config)
    panel = load_train_panel(config, prices, sectors)
    models = [fit_model(config, m, panel) for m in modes]
    out = _out(config)
    for m in models:
        m.save(out / f"model_{m.mode}.json")
    tpanel = load_test_panel(config, prices, sectors, models[0].tickers)
    report = build_report(config, models, tpanel)
    _write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# rendering


def _fmt_ci(block: dict) -> tuple[str, str]:
    mean = f"{block['mean']:.2f}"
    if block.get("ci_low") is None:
        return mean, ""
    return mean, f"({block['ci_low']:.2f},{block['ci_high']:.2f})"


def render_report(report: dict) -> str:
    """Plain-text gain table (sector rows, one column per portfolio) and transaction table."""
    ports = report["portfolios"]
    heads = [f"{p['model']}:{p['objective']}" for p in ports]
    width = max(22, max(len(s) for s in report["sectors"] + ["Total"]) + 2)
    colw = max(20, max(len(h) for h in heads) + 2)
    lines = ["% gain over " + f"{report['test_window']['start']} .. {report['test_window']['end']}"]
    lines.append("".ljust(width) + "".join(h.rjust(colw) for h in heads))
    for s in report["sectors"] + ["Total"]:
        blocks = [p["total"] if s == "Total" else p["sectors"][s] for p in ports]
        cells = [_fmt_ci(b) for b in blocks]
        lines.append(s.ljust(width) + "".join(c[0].rjust(colw) for c in cells))
        if any(c[1] for c in cells):
            lines.append("".ljust(width) + "".join(c[1].rjust(colw) for c in cells))
    if report.get("index_gain_pct") is not None:
        lines.append(f"Index gain: {report['index_gain_pct']:.2f}%")
    lines.append("")
    lines.append("Transactions".ljust(width) + "".join(h.rjust(colw) for h in heads))
    lines.append("Mean".ljust(width) + "".join(f"{p['transactions']['mean']:.2f}".rjust(colw) for p in ports))
    lines.append("SD".ljust(width) + "".join(
        ("-" if p["transactions"]["sd"] is None else f"{p['transactions']['sd']:.2f}").rjust(colw) for p in ports
    ))
    return "\n".join(lines)
