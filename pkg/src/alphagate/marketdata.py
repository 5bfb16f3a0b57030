"""Market data model: bars, series, chronological splits, fold schedules,
CSV persistence, and the synthetic regime-switching generator.

Conventions fixed here and relied on everywhere else:
  * all timestamps are aware UTC instants (bar open time);
  * all intervals are half-open [start, end);
  * a trading day is a calendar date (UTC) with at least one bar;
  * ask = bid + spread.
"""

from __future__ import annotations

import csv
import logging
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta

import numpy as np

from .canonical import as_utc, format_timestamp, midnight_utc, parse_timestamp, sha256_hex
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

CSV_HEADER = ["timestamp_iso8601", "bid_open", "bid_high", "bid_low", "bid_close", "spread", "volume"]

_DAY_US = 86_400_000_000


@dataclass(frozen=True, slots=True)
class Bar:
    """One OHLC bid bar. ask = bid + spread at any of the four marks."""

    timestamp: datetime
    bid_open: float
    bid_high: float
    bid_low: float
    bid_close: float
    spread: float
    volume: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "timestamp", as_utc(self.timestamp))
        lo, hi = self.bid_low, self.bid_high
        if not (lo > 0 and hi > 0 and self.bid_open > 0 and self.bid_close > 0):
            raise DataError(f"non-positive price in bar at {self.timestamp}")
        if hi < max(self.bid_open, self.bid_close) or lo > min(self.bid_open, self.bid_close):
            raise DataError(f"OHLC ordering violated in bar at {self.timestamp}")
        if self.spread < 0:
            raise DataError(f"negative spread in bar at {self.timestamp}")
        if self.volume is not None and self.volume < 0:
            raise DataError(f"negative volume in bar at {self.timestamp}")


@dataclass(frozen=True, slots=True)
class TimeRange:
    """Half-open interval [start, end); empty when start == end."""

    start: datetime
    end: datetime

    def __post_init__(self):
        object.__setattr__(self, "start", as_utc(self.start))
        object.__setattr__(self, "end", as_utc(self.end))
        if self.start > self.end:
            raise ConfigError(f"interval start {self.start} after end {self.end}")

    def contains(self, ts: datetime) -> bool:
        return self.start <= ts < self.end

    @property
    def empty(self) -> bool:
        return self.start == self.end

    def to_doc(self) -> dict:
        return {"start": format_timestamp(self.start), "end": format_timestamp(self.end)}

    @classmethod
    def from_doc(cls, doc: dict) -> "TimeRange":
        return cls(parse_timestamp(doc["start"]), parse_timestamp(doc["end"]))


class MarketSeries:
    """Immutable, chronologically ordered bar sequence for one symbol.

    Args:
        bars: non-empty iterable of Bar with strictly increasing timestamps.
        symbol: instrument identifier.
        bar_period: nominal bar duration (timestamps may skip weekends).
        regime_labels: optional per-bar generator regime indices, kept for
            test introspection only.
    """

    __slots__ = ("bars", "symbol", "bar_period", "regime_labels", "_ts")

    def __init__(self, bars, symbol: str, bar_period: timedelta, regime_labels=None):
        bars = tuple(bars)
        if not bars:
            raise DataError("market series must contain at least one bar")
        if bar_period <= timedelta(0):
            raise ConfigError("bar_period must be positive")
        ts = [b.timestamp for b in bars]
        for i in range(1, len(ts)):
            if ts[i] <= ts[i - 1]:
                raise DataError(f"non-increasing timestamp at index {i}: {ts[i]} after {ts[i - 1]}")
        if regime_labels is not None:
            regime_labels = tuple(regime_labels)
            if len(regime_labels) != len(bars):
                raise DataError("regime label sequence length mismatch")
        self.bars = bars
        self.symbol = symbol
        self.bar_period = bar_period
        self.regime_labels = regime_labels
        self._ts = ts

    def __len__(self) -> int:
        return len(self.bars)

    def __iter__(self):
        return iter(self.bars)

    def span(self) -> TimeRange:
        return TimeRange(self._ts[0], self._ts[-1] + self.bar_period)

    def index_range(self, rng: TimeRange) -> tuple[int, int]:
        """Indices [lo, hi) of bars whose timestamps fall in rng."""
        return bisect_left(self._ts, rng.start), bisect_left(self._ts, rng.end)

    def count_in(self, rng: TimeRange) -> int:
        lo, hi = self.index_range(rng)
        return hi - lo

    def slice(self, rng: TimeRange) -> "MarketSeries":
        """Sub-series of bars inside rng; empty result is an error."""
        span = self.span()
        if rng.end <= span.start or rng.start >= span.end:
            raise DataError(
                f"range {rng.start}..{rng.end} outside data span {span.start}..{span.end}"
            )
        lo, hi = self.index_range(rng)
        if hi <= lo:
            raise DataError(f"empty segment for range {rng.start}..{rng.end}")
        labels = self.regime_labels[lo:hi] if self.regime_labels is not None else None
        return MarketSeries(self.bars[lo:hi], self.symbol, self.bar_period, labels)

    def fingerprint(self) -> dict:
        """Content hash and bar count, for audit manifests."""
        digest = sha256_hex("\n".join(_csv_row_text(b) for b in self.bars))
        return {
            "bars": len(self.bars),
            "sha256": digest,
            "first": format_timestamp(self._ts[0]),
            "last": format_timestamp(self._ts[-1]),
        }


@dataclass(frozen=True, slots=True)
class SplitSpec:
    """Chronological in-sample / walk-forward / holdout partition."""

    is_range: TimeRange
    wfa_range: TimeRange
    oos_range: TimeRange

    def __post_init__(self):
        if self.is_range.end > self.wfa_range.start or self.wfa_range.end > self.oos_range.start:
            raise ConfigError("split ranges must be disjoint and in is < wfa < oos order")
        if self.is_range.empty or self.wfa_range.empty or self.oos_range.empty:
            raise ConfigError("split ranges must be non-empty intervals")

    def to_doc(self) -> dict:
        return {
            "is": self.is_range.to_doc(),
            "wfa": self.wfa_range.to_doc(),
            "oos": self.oos_range.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SplitSpec":
        return cls(
            TimeRange.from_doc(doc["is"]),
            TimeRange.from_doc(doc["wfa"]),
            TimeRange.from_doc(doc["oos"]),
        )


@dataclass(frozen=True, slots=True)
class Fold:
    """One rolling fold: train window, purge gap, forward-test window."""

    index: int
    train_range: TimeRange
    purge_range: TimeRange
    test_range: TimeRange

    def to_doc(self) -> dict:
        return {
            "index": self.index,
            "train": self.train_range.to_doc(),
            "purge": self.purge_range.to_doc(),
            "test": self.test_range.to_doc(),
        }


@dataclass(frozen=True, slots=True)
class FoldSchedule:
    folds: tuple[Fold, ...]
    purge_days: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def to_doc(self) -> dict:
        return {"purge_days": self.purge_days, "folds": [f.to_doc() for f in self.folds]}


def partition(series: MarketSeries, split: SplitSpec) -> dict[str, MarketSeries]:
    """Cut a series into the three protocol segments.

    Each output holds exactly the bars whose timestamps fall in its half-open
    range; no bar lands in two segments.
    """
    return {
        "is": series.slice(split.is_range),
        "wfa": series.slice(split.wfa_range),
        "oos": series.slice(split.oos_range),
    }


def trading_dates(series: MarketSeries, rng: TimeRange | None = None) -> tuple[date, ...]:
    """Distinct UTC dates having at least one bar in rng (whole series if None)."""
    if rng is None:
        lo, hi = 0, len(series.bars)
    else:
        lo, hi = series.index_range(rng)
    out: list[date] = []
    last = None
    ts = series._ts
    for i in range(lo, hi):
        d = ts[i].date()
        if d != last:
            out.append(d)
            last = d
    return tuple(out)


def trading_days(series: MarketSeries, rng: TimeRange | None = None) -> int:
    """Count of distinct calendar dates in rng containing >= 1 bar."""
    return len(trading_dates(series, rng))


def build_fold_schedule(wfa: MarketSeries, n_folds: int, g: int) -> FoldSchedule:
    """Pre-commit a rolling train/purge/test schedule over the WFA segment.

    The span is cut into n_folds + 1 contiguous segments of near-equal width
    (interior boundaries floored to midnight UTC; the final segment absorbs
    any remainder). Fold i trains on segment i; its purge gap covers the
    first g trading days of segment i+1 and the test window is the rest, so
    the test of fold i may overlap the train of fold i+1 by design.

    Raises:
        DataError: when the segment is too short for the requested layout.
    """
    if n_folds < 1:
        raise ConfigError("n_folds must be >= 1")
    if g < 0:
        raise ConfigError("purge gap must be >= 0 trading days")
    span = wfa.span()
    total_us = (span.end - span.start) // timedelta(microseconds=1)
    n_seg = n_folds + 1
    bounds = [span.start]
    for k in range(1, n_seg):
        cut = span.start + timedelta(microseconds=total_us * k // n_seg)
        bounds.append(midnight_utc(cut.date()))
    bounds.append(span.end)
    for a, b in zip(bounds, bounds[1:]):
        if a >= b:
            raise DataError(f"insufficient data for {n_folds} folds over {span.start}..{span.end}")

    folds = []
    for i in range(1, n_seg):
        train = TimeRange(bounds[i - 1], bounds[i])
        seg = TimeRange(bounds[i], bounds[i + 1])
        if wfa.count_in(train) == 0:
            raise DataError(f"fold {i}: empty train window")
        seg_dates = trading_dates(wfa, seg)
        if g == 0:
            purge = TimeRange(bounds[i], bounds[i])
            test = seg
        else:
            if len(seg_dates) <= g:
                raise DataError(f"fold {i}: purge gap of {g} trading days leaves no test data")
            test_start = midnight_utc(seg_dates[g])
            purge = TimeRange(bounds[i], test_start)
            test = TimeRange(test_start, bounds[i + 1])
        if wfa.count_in(test) == 0:
            raise DataError(f"fold {i}: empty test window")
        folds.append(Fold(index=i, train_range=train, purge_range=purge, test_range=test))
    schedule = FoldSchedule(folds=tuple(folds), purge_days=g)
    logger.info("fold schedule: %d folds, purge %d trading days", n_folds, g)
    return schedule


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True, slots=True)
class RegimeSpec:
    """One market regime: daily log-return drift and volatility, mean spread."""

    drift: float
    volatility: float
    mean_spread: float

    def __post_init__(self):
        if self.volatility < 0:
            raise ConfigError("regime volatility must be >= 0")
        if self.mean_spread < 0:
            raise ConfigError("regime mean_spread must be >= 0")

    def to_doc(self) -> dict:
        return {"drift": self.drift, "volatility": self.volatility, "mean_spread": self.mean_spread}

    @classmethod
    def from_doc(cls, doc: dict) -> "RegimeSpec":
        return cls(float(doc["drift"]), float(doc["volatility"]), float(doc["mean_spread"]))


@dataclass(frozen=True, slots=True)
class SyntheticConfig:
    """Config for the regime-switching geometric random walk generator.

    drift/volatility are per trading day (log-return units); spreads are
    lognormal with the configured per-regime mean. Bars cover weekdays only,
    bars_per_day evenly spaced from midnight UTC.
    """

    n_days: int
    bars_per_day: int
    regimes: tuple[RegimeSpec, ...]
    regime_switch_prob: float = 0.0
    start_date: date = date(2022, 1, 3)
    initial_price: float = 150.0
    spread_sigma: float = 0.25
    symbol: str = "SYN"
    emit_volume: bool = True

    def __post_init__(self):
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if self.bars_per_day < 1 or _DAY_US % self.bars_per_day:
            raise ConfigError("bars_per_day must divide the day evenly")
        if not self.regimes:
            raise ConfigError("at least one regime required")
        if not 0.0 <= self.regime_switch_prob <= 1.0:
            raise ConfigError("regime_switch_prob must be in [0, 1]")
        if self.initial_price <= 0:
            raise ConfigError("initial_price must be positive")
        if self.spread_sigma < 0:
            raise ConfigError("spread_sigma must be >= 0")

    @property
    def bar_period(self) -> timedelta:
        return timedelta(microseconds=_DAY_US // self.bars_per_day)

    def to_doc(self) -> dict:
        return {
            "n_days": self.n_days,
            "bars_per_day": self.bars_per_day,
            "regimes": [r.to_doc() for r in self.regimes],
            "regime_switch_prob": self.regime_switch_prob,
            "start_date": self.start_date.isoformat(),
            "initial_price": self.initial_price,
            "spread_sigma": self.spread_sigma,
            "symbol": self.symbol,
            "emit_volume": self.emit_volume,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SyntheticConfig":
        kwargs = {
            "n_days": int(doc["n_days"]),
            "bars_per_day": int(doc["bars_per_day"]),
            "regimes": tuple(RegimeSpec.from_doc(r) for r in doc["regimes"]),
        }
        if "regime_switch_prob" in doc:
            kwargs["regime_switch_prob"] = float(doc["regime_switch_prob"])
        if "start_date" in doc:
            kwargs["start_date"] = date.fromisoformat(doc["start_date"])
        for key in ("initial_price", "spread_sigma"):
            if key in doc:
                kwargs[key] = float(doc[key])
        if "symbol" in doc:
            kwargs["symbol"] = str(doc["symbol"])
        if "emit_volume" in doc:
            kwargs["emit_volume"] = bool(doc["emit_volume"])
        return cls(**kwargs)


def _weekday_dates(start: date, n_days: int) -> list[date]:
    out = []
    d = start
    while len(out) < n_days:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def generate_synthetic(config: SyntheticConfig, seed: int) -> MarketSeries:
    """Deterministic synthetic series: pure function of (config, seed).

    Per bar: the regime redraws uniformly with probability
    regime_switch_prob, close follows a geometric walk with per-bar drift
    drift/bars_per_day and sigma volatility/sqrt(bars_per_day), wicks extend
    the body by folded-normal factors scaled with the bar sigma, and spread
    is lognormal around the regime mean. The realized regime label sequence
    is recorded on the series.
    """
    bpd = config.bars_per_day
    n_bars = config.n_days * bpd
    n_regimes = len(config.regimes)
    rng = np.random.default_rng(seed)
    # draw order is part of the determinism contract; never reorder
    switch_u = rng.random(n_bars)
    regime_pick = rng.integers(0, n_regimes, n_bars)
    z = rng.standard_normal(n_bars)
    wick_hi = np.abs(rng.standard_normal(n_bars))
    wick_lo = np.abs(rng.standard_normal(n_bars))
    spread_z = rng.standard_normal(n_bars)
    volume = rng.integers(50, 500, n_bars) if config.emit_volume else None

    switch = switch_u < config.regime_switch_prob
    switch_idx = np.where(switch, np.arange(n_bars), -1)
    last_switch = np.maximum.accumulate(switch_idx)
    labels = np.where(last_switch >= 0, regime_pick[np.maximum(last_switch, 0)], 0)

    drift = np.array([r.drift for r in config.regimes])[labels] / bpd
    sigma = np.array([r.volatility for r in config.regimes])[labels] / math.sqrt(bpd)
    mean_spread = np.array([r.mean_spread for r in config.regimes])[labels]

    log_ret = drift + sigma * z
    closes = config.initial_price * np.exp(np.cumsum(log_ret))
    opens = np.concatenate(([config.initial_price], closes[:-1]))
    body_hi = np.maximum(opens, closes)
    body_lo = np.minimum(opens, closes)
    highs = body_hi * np.exp(0.5 * sigma * wick_hi)
    lows = body_lo * np.exp(-0.5 * sigma * wick_lo)
    s = config.spread_sigma
    spreads = mean_spread * np.exp(s * spread_z - 0.5 * s * s)

    period_us = _DAY_US // bpd
    dates = _weekday_dates(config.start_date, config.n_days)
    stamps: list[datetime] = []
    for d in dates:
        base = midnight_utc(d)
        stamps.extend(base + timedelta(microseconds=period_us * k) for k in range(bpd))

    o = opens.tolist()
    h = highs.tolist()
    lo_ = lows.tolist()
    c = closes.tolist()
    sp = spreads.tolist()
    vol = volume.tolist() if volume is not None else None
    bars = [
        Bar(stamps[i], o[i], h[i], lo_[i], c[i], sp[i], vol[i] if vol is not None else None)
        for i in range(n_bars)
    ]
    return MarketSeries(bars, config.symbol, config.bar_period, regime_labels=labels.tolist())


# ---------------------------------------------------------------------------
# CSV persistence

def _csv_row_text(bar: Bar) -> str:
    vol = "" if bar.volume is None else str(bar.volume)
    return ",".join(
        (
            format_timestamp(bar.timestamp),
            repr(bar.bid_open),
            repr(bar.bid_high),
            repr(bar.bid_low),
            repr(bar.bid_close),
            repr(bar.spread),
            vol,
        )
    )


def save_csv(series: MarketSeries, path) -> None:
    """Write a series in the documented CSV schema (round-trips exactly)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for bar in series.bars:
            fh.write(_csv_row_text(bar) + "\n")


def load_csv(path, symbol: str, bar_period: timedelta) -> MarketSeries:
    """Load and validate a bar series from CSV.

    Raises:
        DataError: missing file, bad header, malformed row (with line
            number), invariant violations, or an empty file body.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    bars = []
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [col.strip() for col in header] != CSV_HEADER:
            raise DataError(f"{path}: header mismatch, expected {','.join(CSV_HEADER)}")
        prev_ts = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}: line {lineno}: expected {len(CSV_HEADER)} fields")
            try:
                ts = parse_timestamp(row[0])
                vol = int(row[6]) if row[6].strip() else None
                bar = Bar(ts, float(row[1]), float(row[2]), float(row[3]), float(row[4]),
                          float(row[5]), vol)
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if prev_ts is not None and bar.timestamp <= prev_ts:
                raise DataError(f"{path}: line {lineno}: non-increasing timestamp {row[0]}")
            prev_ts = bar.timestamp
            bars.append(bar)
    if not bars:
        raise DataError(f"{path}: no data rows")
    logger.info("loaded %d bars from %s", len(bars), path)
    return MarketSeries(bars, symbol, bar_period)
