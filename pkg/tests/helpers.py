"""Shared test fixtures: scripted strategy, tiny bar builders, oracles."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np

from alphagate.marketdata import Bar, MarketSeries
from alphagate.strategy import ParameterPoint, Strategy, StrategyState, apply_executed

UTC = timezone.utc


class ScriptedStrategy(Strategy):
    """Emits a pre-committed action list per bar timestamp.

    Decisions are independent of prices, which makes it the
    cost-independent probe for stress/cost monotonicity tests. The script
    references position ids as the engine will assign them (1, 2, ... in
    open order).
    """

    name = "scripted"

    def __init__(self, script=None, lot: float = 0.1):
        super().__init__(lot=lot)
        self.script = dict(script or {})

    def validate_params(self, params: ParameterPoint) -> None:
        pass

    def decide(self, params, bar, state):
        return tuple(self.script.get(bar.timestamp, ()))

    def transition(self, params, state, bar, executed):
        positions = apply_executed(state.open_positions, bar, executed)
        c = dict(state.counters)
        c["bars_seen"] = c.get("bars_seen", 0.0) + 1.0
        return StrategyState(open_positions=positions, counters=c)


def ts(day: int, hour: int = 0, minute: int = 0, year: int = 2024, month: int = 1) -> datetime:
    return datetime(year, month, day, hour, minute, tzinfo=UTC)


def make_bar(when: datetime, close: float, spread: float = 0.0, open_=None,
             high=None, low=None, volume=None) -> Bar:
    o = close if open_ is None else open_
    hi = max(o, close) if high is None else high
    lo = min(o, close) if low is None else low
    return Bar(when, o, hi, lo, close, spread, volume)


def series_from_closes(closes, start: datetime | None = None,
                       period: timedelta = timedelta(hours=1), spread: float = 0.0,
                       symbol: str = "TST") -> MarketSeries:
    """Flat-bodied hourly bars at the given closes (weekday-agnostic)."""
    start = start or ts(1)
    bars = []
    when = start
    prev = closes[0]
    for c in closes:
        bars.append(make_bar(when, c, spread=spread, open_=prev))
        prev = c
        when = when + period
    return MarketSeries(bars, symbol, period)


def daily_series_from_closes(closes, start: datetime | None = None, spread: float = 0.0,
                             symbol: str = "TST") -> MarketSeries:
    """One bar per weekday at midnight UTC."""
    start = start or ts(1)
    bars = []
    when = start
    prev = closes[0]
    i = 0
    while i < len(closes):
        if when.weekday() < 5:
            bars.append(make_bar(when, closes[i], spread=spread, open_=prev))
            prev = closes[i]
            i += 1
        when = when + timedelta(days=1)
    return MarketSeries(bars, symbol, timedelta(days=1))


def mdd_pairwise_oracle(values) -> float:
    """O(n^2) brute force: max over ordered (peak, trough) pairs."""
    v = np.asarray(values, dtype=float)
    n = v.size
    ratios = 1.0 - v[None, :] / v[:, None]  # drawdown for (peak i, trough j)
    best = 0.0
    for i in range(n):
        m = ratios[i, i:].max()
        if m > best:
            best = m
    return float(best)


def random_positive_curve(rng: np.random.Generator, n: int) -> list[float]:
    steps = rng.normal(0.0, 0.03, size=n)
    return list(100.0 * np.exp(np.cumsum(steps)))
