"""Linked hidden Markov models for sector-coupled bull/bear regimes, and
Monte-Carlo mean-variance portfolio selection built on them."""

from lhmm_portfolio.data_ingest import (
    PricePanel,
    SectorMap,
    WeeklyReturnPanel,
    compute_weekly_returns,
    filter_history,
    load_prices,
)
from lhmm_portfolio.hmm_core import GaussianHmmParams
from lhmm_portfolio.lhmm import LhmmModel, fit_two_stage, simulate_dataset
from lhmm_portfolio.portfolio import (
    PortfolioWeights,
    ReturnMoments,
    optimize_balanced,
    optimize_min_variance,
)

__all__ = [
    "GaussianHmmParams",
    "LhmmModel",
    "PortfolioWeights",
    "PricePanel",
    "ReturnMoments",
    "SectorMap",
    "WeeklyReturnPanel",
    "compute_weekly_returns",
    "filter_history",
    "fit_two_stage",
    "load_prices",
    "optimize_balanced",
    "optimize_min_variance",
    "simulate_dataset",
]

__version__ = "0.1.0"
