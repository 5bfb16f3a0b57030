"""Performance and risk metrics over equity curves and trade lists.

Equity-based conventions: log returns R_t = ln(E_t / E_{t-1}), daily
sampling (last equity of each UTC trading date), K = 252 periods/year and
r_f = 0 as defaults. Undefined metrics are explicit (error or None), never
NaN propagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .canonical import midnight_utc
from .errors import ConfigError, UndefinedMetricError

YEAR_DAYS = 365.25

# doc/benchmark metric name -> MetricVector attribute
METRIC_ATTRS = {
    "sharpe": "sharpe_ann",
    "cagr": "cagr",
    "mdd": "mdd_eq",
    "calmar": "calmar",
    "n_trades": "n_trades",
    "trades_per_day": "trades_per_day",
    "c_max": "c_max",
}


@dataclass(slots=True)
class EquityCurve:
    """Per-sample account equity: parallel timestamp/value lists."""

    timestamps: list[datetime]
    values: list[float]

    def __post_init__(self):
        if len(self.timestamps) != len(self.values):
            raise ConfigError("equity curve timestamp/value length mismatch")

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def from_daily(cls, values, start=None) -> "EquityCurve":
        """Build a one-sample-per-weekday curve from plain values (test helper)."""
        start = start or midnight_utc(datetime(2024, 1, 1).date())
        stamps: list[datetime] = []
        ts = start
        while len(stamps) < len(values):
            if ts.weekday() < 5:
                stamps.append(ts)
            ts += timedelta(days=1)
        return cls(stamps, [float(v) for v in values])


@dataclass(eq=False)
class ReturnSeries:
    """Ordered per-period log returns with their sampling convention."""

    returns: np.ndarray
    sampling: str
    periods_per_year: float

    def __post_init__(self):
        if self.periods_per_year <= 0:
            raise ConfigError("periods_per_year must be positive")
        if self.sampling not in ("daily", "per_bar"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")


@dataclass(frozen=True, slots=True)
class MetricsSettings:
    """Return-sampling conventions, constant within any cross-stage comparison."""

    sampling: str = "daily"
    periods_per_year: float = 252.0
    risk_free_rate: float = 0.0

    def to_doc(self) -> dict:
        return {
            "sampling": self.sampling,
            "periods_per_year": self.periods_per_year,
            "risk_free_rate": self.risk_free_rate,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "MetricsSettings":
        return cls(
            sampling=str(doc.get("sampling", "daily")),
            periods_per_year=float(doc.get("periods_per_year", 252.0)),
            risk_free_rate=float(doc.get("risk_free_rate", 0.0)),
        )


def returns_from_equity(curve: EquityCurve, sampling: str = "daily",
                        periods_per_year: float = 252.0) -> ReturnSeries:
    """Log returns from an equity curve.

    Daily sampling takes the last equity of each trading date; per_bar uses
    every sample. Raises ValueError on non-positive equity or fewer than two
    samples after resampling.
    """
    ts, vals = curve.timestamps, curve.values
    if min(vals, default=0.0) <= 0.0:
        raise ValueError("equity must be positive to form log returns")
    if sampling == "daily":
        keep = [i for i in range(len(ts) - 1) if ts[i].date() != ts[i + 1].date()]
        if ts:
            keep.append(len(ts) - 1)
        sampled = [vals[i] for i in keep]
    elif sampling == "per_bar":
        sampled = vals
    else:
        raise ConfigError(f"unknown sampling {sampling!r}")
    if len(sampled) < 2:
        raise ValueError("need at least 2 equity samples to form returns")
    arr = np.asarray(sampled, dtype=float)
    return ReturnSeries(np.diff(np.log(arr)), sampling, periods_per_year)


def sharpe(rs: ReturnSeries, risk_free: float = 0.0) -> float:
    """Annualized Sharpe: ((mean - r_f) / sample std) * sqrt(K).

    Raises UndefinedMetricError on zero variance instead of returning a
    number; degenerate series are a status, not a value.
    """
    r = rs.returns
    if r.size < 2:
        raise ValueError("need at least 2 returns")
    sd = float(np.std(r, ddof=1))
    if sd == 0.0:
        raise UndefinedMetricError("sharpe", "zero variance")
    return (float(np.mean(r)) - risk_free) / sd * math.sqrt(rs.periods_per_year)


def cagr(e_start: float, e_end: float, n_years: float) -> float:
    """Compound annual growth rate (E_end / E_start)^(1/n) - 1."""
    if e_start <= 0 or e_end <= 0 or n_years <= 0:
        raise ValueError("cagr requires positive equities and span")
    return (e_end / e_start) ** (1.0 / n_years) - 1.0


@dataclass(frozen=True, slots=True)
class MddResult:
    mdd: float
    peak_time: datetime | None
    trough_time: datetime | None
    peak_index: int
    trough_index: int


def max_drawdown(curve) -> MddResult:
    """Running-peak maximum drawdown, single pass.

    Accepts an EquityCurve or a plain positive value sequence. Ties resolve
    to the earliest peak/trough.
    """
    if isinstance(curve, EquityCurve):
        values, stamps = curve.values, curve.timestamps
    else:
        values, stamps = list(curve), None
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty equity curve")
    if np.any(v <= 0):
        raise ValueError("equities must be positive")
    peaks = np.maximum.accumulate(v)
    dd = (peaks - v) / peaks
    trough = int(np.argmax(dd))
    peak = int(np.argmax(v[: trough + 1]))
    return MddResult(
        mdd=float(dd[trough]),
        peak_time=stamps[peak] if stamps else None,
        trough_time=stamps[trough] if stamps else None,
        peak_index=peak,
        trough_index=trough,
    )


def calmar(cagr_value: float, mdd: float) -> float:
    """CAGR / MDD; undefined (flagged, not NaN) at zero drawdown."""
    if mdd < 0:
        raise ValueError("mdd must be >= 0")
    if mdd == 0.0:
        raise UndefinedMetricError("calmar", "zero drawdown")
    return cagr_value / mdd


def cost_cushion(trades) -> float:
    """Average net profit per trade: the mean per-trade cost the strategy
    could absorb before break-even."""
    n = len(trades)
    if n == 0:
        raise ValueError("cost cushion requires at least one trade")
    return sum(t.profit for t in trades) / n


def execution_fragile(c_max: float, assumed_cost: float) -> bool:
    """Flag: cushion below the assumed per-trade execution cost."""
    return c_max < assumed_cost


@dataclass(frozen=True, slots=True)
class MetricVector:
    """One stage's metric values; None marks an unavailable metric.

    mdd_eq uses 1.0 as the wiped-account sentinel (equity reached zero or
    below; log-based metrics are unavailable there).
    """

    sharpe_ann: float | None = None
    cagr: float | None = None
    mdd_eq: float | None = None
    calmar: float | None = None
    n_trades: int = 0
    trades_per_day: float | None = None
    c_max: float | None = None
    span_years: float | None = None

    def __post_init__(self):
        if self.mdd_eq is not None and not 0.0 <= self.mdd_eq <= 1.0:
            raise ConfigError(f"mdd_eq out of range: {self.mdd_eq}")
        if self.n_trades < 0:
            raise ConfigError("n_trades must be >= 0")

    def value(self, metric_name: str):
        try:
            return getattr(self, METRIC_ATTRS[metric_name])
        except KeyError:
            raise ConfigError(f"unknown metric {metric_name!r}") from None

    def to_doc(self) -> dict:
        doc = {name: self.value(name) for name in METRIC_ATTRS}
        doc["span_years"] = self.span_years
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "MetricVector":
        def fnum(key):
            return None if doc.get(key) is None else float(doc[key])

        return cls(
            sharpe_ann=fnum("sharpe"),
            cagr=fnum("cagr"),
            mdd_eq=fnum("mdd"),
            calmar=fnum("calmar"),
            n_trades=int(doc.get("n_trades") or 0),
            trades_per_day=fnum("trades_per_day"),
            c_max=fnum("c_max"),
            span_years=fnum("span_years"),
        )


def compute_metric_vector(curve: EquityCurve, trades, settings: MetricsSettings,
                          trading_day_count: int | None = None,
                          span_years: float | None = None) -> MetricVector:
    """Full metric vector for one session.

    trades_per_day uses trading_day_count (dates with bars) as denominator;
    span_years defaults to the curve's endpoint span in Julian years.
    Metrics that cannot be computed come back as None.
    """
    n_trades = len(trades)
    tpd = None
    if trading_day_count is not None and trading_day_count > 0:
        tpd = n_trades / trading_day_count
    c_max = cost_cushion(trades) if n_trades else None

    if len(curve) == 0:
        return MetricVector(n_trades=n_trades, trades_per_day=tpd, c_max=c_max)

    if span_years is None:
        delta = curve.timestamps[-1] - curve.timestamps[0]
        span_years = delta.total_seconds() / (YEAR_DAYS * 86400.0)

    if min(curve.values) <= 0.0:
        # wiped account: drawdown saturates, log-based metrics undefined
        return MetricVector(mdd_eq=1.0, n_trades=n_trades, trades_per_day=tpd,
                            c_max=c_max, span_years=span_years)

    mdd = max_drawdown(curve).mdd
    sr = None
    try:
        rs = returns_from_equity(curve, settings.sampling, settings.periods_per_year)
        sr = sharpe(rs, settings.risk_free_rate)
    except (ValueError, UndefinedMetricError):
        pass
    growth = None
    if span_years > 0:
        growth = cagr(curve.values[0], curve.values[-1], span_years)
    cal = None
    if growth is not None and mdd > 0.0:
        cal = growth / mdd
    return MetricVector(sharpe_ann=sr, cagr=growth, mdd_eq=mdd, calmar=cal,
                        n_trades=n_trades, trades_per_day=tpd, c_max=c_max,
                        span_years=span_years)


# ---------------------------------------------------------------------------
# benchmark evaluation

DEFAULT_BENCHMARK_DOC = {
    "sharpe": {">=": 2.0},
    "calmar": {">=": 1.5},
    "mdd": {"<": 0.07},
    "trades_per_day": {">=": 5.0},
}


@dataclass(frozen=True, slots=True)
class Threshold:
    metric: str
    direction: str
    bound: float

    def __post_init__(self):
        if self.metric not in METRIC_ATTRS:
            raise ConfigError(f"unknown benchmark metric {self.metric!r}")
        if self.direction not in (">=", "<"):
            raise ConfigError(f"unknown comparison direction {self.direction!r}")

    def satisfied(self, value: float) -> bool:
        return value >= self.bound if self.direction == ">=" else value < self.bound


@dataclass(frozen=True, slots=True)
class Benchmark:
    """Pre-committed per-metric thresholds with comparison directions."""

    thresholds: tuple[Threshold, ...]

    def __post_init__(self):
        names = [t.metric for t in self.thresholds]
        if len(names) != len(set(names)):
            raise ConfigError("benchmark metric listed more than once")

    @classmethod
    def default(cls) -> "Benchmark":
        return cls.from_doc(DEFAULT_BENCHMARK_DOC)

    @classmethod
    def from_doc(cls, doc: dict) -> "Benchmark":
        thresholds = []
        for metric in doc:
            spec = doc[metric]
            if not isinstance(spec, dict) or len(spec) != 1:
                raise ConfigError(f"benchmark entry for {metric!r} must be one direction: bound")
            (direction, bound), = spec.items()
            thresholds.append(Threshold(metric, direction, float(bound)))
        return cls(tuple(thresholds))

    def to_doc(self) -> dict:
        return {t.metric: {t.direction: t.bound} for t in self.thresholds}


@dataclass(frozen=True, slots=True)
class BenchmarkResult:
    """Gate outcome: overall status and per-metric detail.

    status is "pass", "fail", or "open_item" (any named metric unavailable
    and nothing failed); per_metric values are "pass"/"fail"/"unavailable".
    An unavailable metric never silently passes.
    """

    status: str
    per_metric: dict

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_doc(self) -> dict:
        return {"status": self.status, "per_metric": dict(self.per_metric)}


def meets_benchmark(m: MetricVector, b: Benchmark) -> BenchmarkResult:
    """Directional comparison of a metric vector against a benchmark.

    A zero-drawdown curve treats Calmar as passing any >= threshold (no
    drawdown to recover from).
    """
    per_metric = {}
    any_fail = False
    any_open = False
    for t in b.thresholds:
        value = m.value(t.metric)
        if value is None:
            if t.metric == "calmar" and m.mdd_eq == 0.0 and t.direction == ">=":
                per_metric[t.metric] = "pass"
                continue
            per_metric[t.metric] = "unavailable"
            any_open = True
            continue
        ok = t.satisfied(float(value))
        per_metric[t.metric] = "pass" if ok else "fail"
        any_fail = any_fail or not ok
    status = "fail" if any_fail else ("open_item" if any_open else "pass")
    return BenchmarkResult(status=status, per_metric=per_metric)
