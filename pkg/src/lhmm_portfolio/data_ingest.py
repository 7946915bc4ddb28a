"""Loading weekly closing prices and sector labels into return panels.

Price files are long-format CSV (``date,ticker,close``), sector files map
``ticker,sector``. Panels are aligned on the union of dates with absent cells
stored as NaN; :func:`filter_history` then keeps only tickers with a complete
trailing window, so nothing is ever imputed.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lhmm_portfolio.errors import ParseError, ValidationError

# Sector order used for all downstream matrix indices. Sectors not listed
# here are appended alphabetically.
SECTOR_ORDER = (
    "Communication Services",
    "Consumer Discretionary",
    "Consumer Staples",
    "Energy",
    "Financials",
    "Health Care",
    "Industrials",
    "Information Technology",
    "Materials",
    "Real Estate",
    "Telecommunications",
    "Utilities",
)

DEFAULT_MIN_WEEKS = 260


@dataclass(frozen=True)
class SectorMap:
    """Ticker to sector assignment with a fixed sector ordering."""

    assignments: dict[str, str]
    sector_names: tuple[str, ...]

    @classmethod
    def from_assignments(cls, assignments: dict[str, str]) -> "SectorMap":
        present = set(assignments.values())
        if not present:
            raise ValidationError("sector map is empty")
        known = [s for s in SECTOR_ORDER if s in present]
        extra = sorted(present.difference(SECTOR_ORDER))
        return cls(dict(assignments), tuple(known + extra))

    @property
    def D(self) -> int:
        return len(self.sector_names)

    def sector_of(self, ticker: str) -> str:
        try:
            return self.assignments[ticker]
        except KeyError:
            raise ValidationError(f"ticker {ticker!r} has no sector") from None

    def index_of(self, ticker: str) -> int:
        """0-based sector index of ``ticker``."""
        return self.sector_names.index(self.sector_of(ticker))

    def order_tickers(self, tickers) -> list[str]:
        """Sort tickers by sector order, then lexicographically."""
        return sorted(tickers, key=lambda t: (self.index_of(t), t))


@dataclass(frozen=True)
class PricePanel:
    tickers: list[str]
    dates: list[dt.date]
    closes: np.ndarray  # (K, T); NaN marks an absent observation

    def __post_init__(self):
        closes = np.asarray(self.closes, dtype=float)
        if closes.shape != (len(self.tickers), len(self.dates)):
            raise ValidationError(
                f"closes shape {closes.shape} does not match "
                f"{len(self.tickers)} tickers x {len(self.dates)} dates"
            )
        if len(set(self.tickers)) != len(self.tickers):
            raise ValidationError("duplicate tickers in panel")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise ValidationError("dates must be strictly increasing")
        present = closes[~np.isnan(closes)]
        if np.any(present <= 0) or not np.all(np.isfinite(present)):
            raise ValidationError("closing prices must be positive and finite")
        object.__setattr__(self, "closes", closes)

    @property
    def K(self) -> int:
        return len(self.tickers)

    def window(self, start: dt.date | None = None, end: dt.date | None = None) -> "PricePanel":
        """Restrict to dates in ``[start, end]``."""
        keep = [
            i
            for i, d in enumerate(self.dates)
            if (start is None or d >= start) and (end is None or d <= end)
        ]
        return PricePanel(list(self.tickers), [self.dates[i] for i in keep], self.closes[:, keep])

    def subset(self, tickers) -> "PricePanel":
        idx = {t: i for i, t in enumerate(self.tickers)}
        missing = [t for t in tickers if t not in idx]
        if missing:
            raise ValidationError(f"tickers missing from panel: {', '.join(missing)}")
        rows = [idx[t] for t in tickers]
        return PricePanel(list(tickers), list(self.dates), self.closes[rows])


@dataclass(frozen=True)
class WeeklyReturnPanel:
    """Relative weekly price changes ``(X_t - X_{t-1}) / X_{t-1}``.

    ``returns`` is (K, n); ``sector_of[k]`` is the 0-based sector index of
    row ``k`` and ``dates[t]`` the week-ending date of column ``t``.
    """

    tickers: list[str]
    sector_names: tuple[str, ...]
    sector_of: np.ndarray
    returns: np.ndarray
    dates: list[dt.date] = field(default_factory=list)

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=float)
        sector_of = np.asarray(self.sector_of, dtype=int)
        if returns.ndim != 2 or returns.shape[0] != len(self.tickers):
            raise ValidationError("returns must be (K, n) with one row per ticker")
        if sector_of.shape != (len(self.tickers),):
            raise ValidationError("sector_of must have one entry per ticker")
        if sector_of.size and (sector_of.min() < 0 or sector_of.max() >= len(self.sector_names)):
            raise ValidationError("sector index out of range")
        if not np.all(returns > -1):
            raise ValidationError("weekly returns must exceed -1")
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "sector_of", sector_of)

    @property
    def K(self) -> int:
        return self.returns.shape[0]

    @property
    def n(self) -> int:
        return self.returns.shape[1]

    @property
    def D(self) -> int:
        return len(self.sector_names)

    def sector_indices(self) -> list[np.ndarray]:
        """Row indices of each sector's stocks, in sector order."""
        return [np.flatnonzero(self.sector_of == d) for d in range(self.D)]

    def sector_block(self, d: int) -> np.ndarray:
        return self.returns[self.sector_of == d]

    def sector_tickers(self, d: int) -> list[str]:
        return [t for t, s in zip(self.tickers, self.sector_of) if s == d]


def _parse_date(text: str, line: int, path: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"bad date {text!r} (expected YYYY-MM-DD)", line, path) from None


def _read_rows(path: Path, header: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1, str(path)) from None
        got = tuple(c.strip().lstrip("﻿") for c in first)
        if got != header:
            raise ParseError(f"expected header {','.join(header)}, got {','.join(got)}", 1, str(path))
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line, str(path))
            yield line, [c.strip() for c in row]


def load_sectors(sector_file) -> SectorMap:
    path = Path(sector_file)
    assignments: dict[str, str] = {}
    for line, (ticker, sector) in _read_rows(path, ("ticker", "sector")):
        if not ticker or not sector:
            raise ParseError("empty ticker or sector", line, str(path))
        if ticker in assignments and assignments[ticker] != sector:
            raise ValidationError(f"{path}:{line}: ticker {ticker!r} assigned to two sectors")
        assignments[ticker] = sector
    return SectorMap.from_assignments(assignments)


def load_prices(price_file, sector_file) -> tuple[PricePanel, SectorMap]:
    """Read the price and sector CSVs into an aligned panel.

    Rows are ordered by sector then ticker; columns are the sorted union of
    all observation dates. A (ticker, date) pair with no row is NaN.
    """
    sectors = load_sectors(sector_file)
    path = Path(price_file)
    obs: dict[str, dict[dt.date, float]] = {}
    for line, (date_s, ticker, close_s) in _read_rows(path, ("date", "ticker", "close")):
        date = _parse_date(date_s, line, str(path))
        if not ticker:
            raise ParseError("empty ticker", line, str(path))
        try:
            close = float(close_s)
        except ValueError:
            raise ParseError(f"bad close {close_s!r}", line, str(path)) from None
        if not math.isfinite(close) or close <= 0:
            raise ValidationError(f"{path}:{line}: non-positive or non-finite price {close_s!r}")
        series = obs.setdefault(ticker, {})
        if date in series:
            raise ParseError(f"duplicate observation for {ticker} on {date}", line, str(path))
        series[date] = close
    if not obs:
        raise ParseError("no price rows", None, str(path))
    for ticker in obs:
        if ticker not in sectors.assignments:
            raise ValidationError(f"ticker {ticker!r} has no sector")

    tickers = sectors.order_tickers(obs)
    dates = sorted({d for series in obs.values() for d in series})
    col = {d: j for j, d in enumerate(dates)}
    closes = np.full((len(tickers), len(dates)), np.nan)
    for i, t in enumerate(tickers):
        for d, v in obs[t].items():
            closes[i, col[d]] = v
    # drop sectors that have no priced tickers so D counts only live sectors
    live = SectorMap.from_assignments({t: sectors.assignments[t] for t in tickers})
    return PricePanel(tickers, dates, closes), live


def filter_history(panel: PricePanel, min_weeks: int = DEFAULT_MIN_WEEKS) -> PricePanel:
    """Keep tickers with a complete trailing window of ``min_weeks + 1`` closes.

    The window is the last ``min_weeks + 1`` dates of the panel, so every
    retained series yields exactly ``min_weeks`` weekly returns. A ticker with
    any gap inside the window is dropped.
    """
    if min_weeks < 1:
        raise ValueError("min_weeks must be >= 1")
    width = min_weeks + 1
    if len(panel.dates) < width:
        raise ValidationError("no tickers satisfy history requirement")
    tail = panel.closes[:, -width:]
    keep = np.flatnonzero(~np.isnan(tail).any(axis=1))
    if keep.size == 0:
        raise ValidationError("no tickers satisfy history requirement")
    return PricePanel(
        [panel.tickers[i] for i in keep],
        list(panel.dates[-width:]),
        tail[keep],
    )


def compute_weekly_returns(panel: PricePanel, sectors: SectorMap) -> WeeklyReturnPanel:
    """Relative changes between consecutive closes of a complete panel."""
    if np.isnan(panel.closes).any():
        raise ValidationError("panel has absent observations; run filter_history first")
    if len(panel.dates) < 2:
        raise ValidationError("need at least two closes per ticker")
    tickers = sectors.order_tickers(panel.tickers)
    if tickers != list(panel.tickers):
        panel = panel.subset(tickers)
    live = [s for s in sectors.sector_names if any(sectors.sector_of(t) == s for t in tickers)]
    X = panel.closes
    Y = (X[:, 1:] - X[:, :-1]) / X[:, :-1]
    sector_of = np.array([live.index(sectors.sector_of(t)) for t in tickers], dtype=int)
    return WeeklyReturnPanel(tickers, tuple(live), sector_of, Y, list(panel.dates[1:]))


def load_index_series(index_file) -> tuple[list[dt.date], np.ndarray]:
    """Read a benchmark index CSV with header ``date,close``."""
    path = Path(index_file)
    rows = []
    for line, (date_s, close_s) in _read_rows(path, ("date", "close")):
        date = _parse_date(date_s, line, str(path))
        try:
            close = float(close_s)
        except ValueError:
            raise ParseError(f"bad close {close_s!r}", line, str(path)) from None
        if not math.isfinite(close) or close <= 0:
            raise ValidationError(f"{path}:{line}: non-positive or non-finite price {close_s!r}")
        rows.append((date, close))
    rows.sort()
    return [d for d, _ in rows], np.array([c for _, c in rows])


def index_gain_pct(index_file, start: dt.date, end: dt.date) -> float:
    """Percent change of the index between the first and last close in ``[start, end]``."""
    dates, closes = load_index_series(index_file)
    sel = [i for i, d in enumerate(dates) if start <= d <= end]
    if len(sel) < 2:
        raise ValidationError("index series has fewer than two closes in the test window")
    return 100.0 * (closes[sel[-1]] / closes[sel[0]] - 1.0)
