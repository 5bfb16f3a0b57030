"""Stage I: in-sample stability mapping and shortlist locking.

The parameter grid is swept with one independent session per point. A run
is viable only when the best observed Sharpe clears a floor; around that
optimum, the stable region keeps every point whose Sharpe is within a
fixed fraction of the best. Points with too few trades or with a
performance cliff at one grid step of distance are rejected, and the
survivors are ranked into a shortlist that is locked for the walk-forward
stage.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime

from .canonical import doc_hash, format_timestamp, parse_timestamp
from .engine import ConstraintSet, ExecutionConfig, SessionResult, run_session
from .errors import BudgetExceededError, ConfigError
from .marketdata import MarketSeries, trading_days
from .metrics import (
    Benchmark,
    BenchmarkResult,
    MetricVector,
    MetricsSettings,
    compute_metric_vector,
    meets_benchmark,
)
from .strategy import ParameterGrid, ParameterPoint, Strategy

logger = logging.getLogger(__name__)

VIABLE = "pass"
REFACTOR = "refactor"


@dataclass(frozen=True, slots=True)
class IsConfig:
    """Stage I knobs.

    alpha is the plateau threshold: a point stays in the stable region when
    its Sharpe is at least alpha times the best observed Sharpe. tau_sr and
    tau_dd bound the tolerated one-step performance cliff.
    """

    alpha: float = 0.9
    sr_min: float = 1.0
    n_min: int = 100
    tau_sr: float = 0.5
    tau_dd: float = 0.03
    shortlist_size: int = 5

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.sr_min <= 0.0:
            raise ConfigError("sr_min must be > 0")
        if self.n_min < 1:
            raise ConfigError("n_min must be >= 1")
        if self.tau_sr < 0.0 or self.tau_dd < 0.0:
            raise ConfigError("cliff thresholds must be >= 0")
        if self.shortlist_size < 1:
            raise ConfigError("shortlist_size must be >= 1")

    def to_doc(self) -> dict:
        return {
            "alpha": self.alpha,
            "sr_min": self.sr_min,
            "n_min": self.n_min,
            "tau_sr": self.tau_sr,
            "tau_dd": self.tau_dd,
            "shortlist_size": self.shortlist_size,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "IsConfig":
        return cls(
            alpha=float(doc.get("alpha", 0.9)),
            sr_min=float(doc.get("sr_min", 1.0)),
            n_min=int(doc.get("n_min", 100)),
            tau_sr=float(doc.get("tau_sr", 0.5)),
            tau_dd=float(doc.get("tau_dd", 0.03)),
            shortlist_size=int(doc.get("shortlist_size", 5)),
        )


@dataclass(slots=True)
class StabilityMap:
    """Metric vector per swept grid point."""

    entries: dict[ParameterPoint, MetricVector]
    grid: ParameterGrid
    budget_used: int

    @property
    def sr_opt(self) -> float | None:
        """Best observed Sharpe, None when no point has a defined Sharpe."""
        best = None
        for m in self.entries.values():
            if m.sharpe_ann is not None and (best is None or m.sharpe_ann > best):
                best = m.sharpe_ann
        return best

    def sorted_points(self) -> list[ParameterPoint]:
        return sorted(self.entries, key=lambda p: p.values)

    def with_grid(self, point: ParameterPoint) -> ParameterPoint:
        """The given point re-bound to this map's grid (for neighbor walks)."""
        if point.grid is not None:
            return point
        return ParameterPoint.of(self.grid, **point.as_dict())

    def to_doc(self) -> dict:
        return {
            "grid": self.grid.to_doc(),
            "budget_used": self.budget_used,
            "sr_opt": self.sr_opt,
            "entries": [
                {"params": p.as_dict(), "metrics": self.entries[p].to_doc()}
                for p in self.sorted_points()
            ],
        }


_WORKER_CTX: dict = {}


def _init_worker(payload) -> None:
    _WORKER_CTX["payload"] = payload


def _eval_in_worker(point: ParameterPoint) -> MetricVector:
    segment, strategy, exec_cfg, constraints, settings, day_count = _WORKER_CTX["payload"]
    return _evaluate_point(segment, strategy, point, exec_cfg, constraints,
                           settings, day_count)


def _evaluate_point(segment, strategy, point, exec_cfg, constraints, settings,
                    day_count) -> MetricVector:
    res = run_session(segment, strategy, point, exec_cfg, constraints)
    return compute_metric_vector(res.equity_curve, res.trades, settings, day_count)


def map_parameter_space(is_segment: MarketSeries, strategy: Strategy,
                        grid: ParameterGrid, exec_cfg: ExecutionConfig,
                        constraints: ConstraintSet, *,
                        settings: MetricsSettings | None = None,
                        jobs: int = 1) -> StabilityMap:
    """Sweep the grid: one session per point, full metric vector each.

    Points are enumerated in deterministic lexicographic order and the
    enumerated size must fit the grid's budget. Sessions are independent,
    so jobs > 1 distributes them across processes; the reduction is keyed
    by parameter point and therefore order-independent.

    Raises:
        ConfigError: empty grid.
        BudgetExceededError: enumerated size exceeds the declared budget.
    """
    points = grid.enumerate_points()
    if not points:
        raise ConfigError("parameter grid is empty")
    if grid.budget is not None and len(points) > grid.budget:
        raise BudgetExceededError(
            f"grid enumerates {len(points)} points, budget is {grid.budget}"
        )
    settings = settings or MetricsSettings()
    day_count = trading_days(is_segment)

    if jobs > 1:
        payload = (is_segment, strategy, exec_cfg, constraints, settings, day_count)
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(payload,)) as pool:
            vectors = list(pool.map(_eval_in_worker, points, chunksize=4))
    else:
        vectors = [
            _evaluate_point(is_segment, strategy, p, exec_cfg, constraints,
                            settings, day_count)
            for p in points
        ]

    entries = dict(zip(points, vectors))
    logger.info("mapped %d grid points (%d workers)", len(entries), max(jobs, 1))
    return StabilityMap(entries=entries, grid=grid, budget_used=len(entries))


def viability_check(stability_map: StabilityMap, sr_min: float) -> str:
    """Viability gate on the best observed Sharpe: 'pass' or 'refactor'."""
    if not stability_map.entries:
        raise ConfigError("stability map is empty")
    sr_opt = stability_map.sr_opt
    if sr_opt is None or sr_opt < sr_min:
        return REFACTOR
    return VIABLE


def stable_region(stability_map: StabilityMap, alpha: float) -> set[ParameterPoint]:
    """Points whose Sharpe is >= alpha times the best observed Sharpe."""
    sr_opt = stability_map.sr_opt
    if sr_opt is None:
        return set()
    floor = alpha * sr_opt
    return {
        p for p, m in stability_map.entries.items()
        if m.sharpe_ann is not None and m.sharpe_ann >= floor
    }


def trade_count_filter(region: set[ParameterPoint], stability_map: StabilityMap,
                       n_min: int) -> set[ParameterPoint]:
    """Drop region members with fewer than n_min trades."""
    kept = {
        p for p in region
        if stability_map.entries[p].n_trades is not None
        and stability_map.entries[p].n_trades >= n_min
    }
    removed = len(region) - len(kept)
    if removed:
        logger.info("trade-count filter removed %d of %d points", removed, len(region))
    return kept


def _neighbor_vectors(stability_map: StabilityMap, point: ParameterPoint):
    point = stability_map.with_grid(point)
    for dim in stability_map.grid.dimensions:
        for delta in (-1, 1):
            nb = point.neighbor(dim.name, delta)
            if nb is not None and nb in stability_map.entries:
                yield stability_map.entries[nb]


def cliff_sr(stability_map: StabilityMap, point: ParameterPoint) -> float:
    """Worst one-step Sharpe drop around a point, clamped at zero.

    Axis-aligned one-step neighbors only; neighbors outside the grid are
    absent, so edge points see fewer and an isolated point scores 0.
    """
    if point not in stability_map.entries:
        raise ConfigError(f"point {point.as_dict()} not in stability map")
    base = stability_map.entries[point].sharpe_ann
    worst = 0.0
    if base is None:
        return worst
    for m in _neighbor_vectors(stability_map, point):
        if m.sharpe_ann is None:
            continue
        drop = base - m.sharpe_ann
        if drop > worst:
            worst = drop
    return worst


def cliff_dd(stability_map: StabilityMap, point: ParameterPoint) -> float:
    """Worst one-step drawdown increase around a point, clamped at zero."""
    if point not in stability_map.entries:
        raise ConfigError(f"point {point.as_dict()} not in stability map")
    base = stability_map.entries[point].mdd_eq
    worst = 0.0
    if base is None:
        return worst
    for m in _neighbor_vectors(stability_map, point):
        if m.mdd_eq is None:
            continue
        rise = m.mdd_eq - base
        if rise > worst:
            worst = rise
    return worst


def cliff_veto(region: set[ParameterPoint], stability_map: StabilityMap,
               tau_sr: float, tau_dd: float):
    """Reject region members that sit next to a performance cliff.

    A point is rejected when its one-step Sharpe drop exceeds tau_sr or its
    one-step drawdown rise exceeds tau_dd (either is enough).

    Returns:
        (kept, rejected): surviving set and {point: reason} map.
    """
    kept: set[ParameterPoint] = set()
    rejected: dict[ParameterPoint, str] = {}
    for p in sorted(region, key=lambda q: q.values):
        c_sr = cliff_sr(stability_map, p)
        c_dd = cliff_dd(stability_map, p)
        reasons = []
        if c_sr > tau_sr:
            reasons.append(f"sharpe cliff {c_sr:.6g} > {tau_sr:.6g}")
        if c_dd > tau_dd:
            reasons.append(f"drawdown cliff {c_dd:.6g} > {tau_dd:.6g}")
        if reasons:
            rejected[p] = "; ".join(reasons)
        else:
            kept.add(p)
    if rejected:
        logger.info("cliff veto rejected %d of %d points", len(rejected), len(region))
    return kept, rejected


@dataclass(frozen=True, slots=True)
class LockRecord:
    """Immutable record written when the shortlist is locked."""

    locked_dimensions: tuple[str, ...]
    timestamp: datetime
    is_config: dict = field(hash=False)

    def to_doc(self) -> dict:
        return {
            "locked_dimensions": list(self.locked_dimensions),
            "timestamp": format_timestamp(self.timestamp),
            "is_config": dict(self.is_config),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "LockRecord":
        return cls(
            locked_dimensions=tuple(doc["locked_dimensions"]),
            timestamp=parse_timestamp(doc["timestamp"]),
            is_config=dict(doc["is_config"]),
        )


@dataclass(frozen=True, slots=True)
class Shortlist:
    """Ordered, locked candidate list for the walk-forward stage."""

    candidates: tuple[ParameterPoint, ...]
    lock_record: LockRecord

    def lock_hash(self) -> str:
        return doc_hash(self.to_doc())

    def to_doc(self) -> dict:
        return {
            "candidates": [p.as_dict() for p in self.candidates],
            "lock_record": self.lock_record.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Shortlist":
        return cls(
            candidates=tuple(ParameterPoint.of(**c) for c in doc["candidates"]),
            lock_record=LockRecord.from_doc(doc["lock_record"]),
        )


def _rank_key(stability_map: StabilityMap, point: ParameterPoint):
    m = stability_map.entries[point]
    mdd = m.mdd_eq if m.mdd_eq is not None else float("inf")
    if m.calmar is not None:
        calmar = m.calmar
    elif m.mdd_eq == 0.0 and m.cagr is not None and m.cagr > 0.0:
        calmar = float("inf")  # gain with no drawdown outranks any ratio
    else:
        calmar = float("-inf")
    return (-calmar, mdd, point.values)


def rank_shortlist(kept: set[ParameterPoint], stability_map: StabilityMap,
                   shortlist_size: int, *, is_config: IsConfig,
                   lock_timestamp: datetime) -> Shortlist:
    """Rank survivors and lock the top of the list.

    Order: Calmar descending, then max drawdown ascending, then
    lexicographic parameter values; the first shortlist_size points are
    locked together with the ranking rule and the stage configuration.
    """
    if not kept:
        raise ConfigError("cannot rank an empty candidate set")
    ranked = sorted(kept, key=lambda p: _rank_key(stability_map, p))
    candidates = tuple(ranked[:shortlist_size])
    dims = tuple(d.name for d in stability_map.grid.dimensions)
    record = LockRecord(
        locked_dimensions=dims,
        timestamp=lock_timestamp,
        is_config={**is_config.to_doc(), "ranking": "calmar_desc,mdd_asc,params_lex"},
    )
    return Shortlist(candidates=candidates, lock_record=record)


@dataclass(slots=True)
class IsReport:
    """Stage I outcome: map, partition of the stable region, gate verdict.

    Every stable-region member lands in exactly one of rejected_by_trades,
    rejected_by_cliff, shortlist.candidates, or ranked_out.
    """

    viability: str
    sr_opt: float | None
    stability_map: StabilityMap
    omega_stable: tuple[ParameterPoint, ...]
    rejected_by_trades: dict[ParameterPoint, str]
    rejected_by_cliff: dict[ParameterPoint, str]
    ranked_out: tuple[ParameterPoint, ...]
    shortlist: Shortlist | None
    best_metrics: MetricVector | None
    benchmark_result: BenchmarkResult | None
    gate_g1: str
    best_session: SessionResult | None = None

    def to_doc(self) -> dict:
        def points_doc(points):
            return [p.as_dict() for p in sorted(points, key=lambda q: q.values)]

        def reasons_doc(reasons):
            return [
                {"params": p.as_dict(), "reason": reasons[p]}
                for p in sorted(reasons, key=lambda q: q.values)
            ]

        return {
            "viability": self.viability,
            "sr_opt": self.sr_opt,
            "stability_map": self.stability_map.to_doc(),
            "omega_stable": points_doc(self.omega_stable),
            "rejected_by_trades": reasons_doc(self.rejected_by_trades),
            "rejected_by_cliff": reasons_doc(self.rejected_by_cliff),
            "ranked_out": points_doc(self.ranked_out),
            "shortlist": None if self.shortlist is None else self.shortlist.to_doc(),
            "shortlist_hash": None if self.shortlist is None else self.shortlist.lock_hash(),
            "best_metrics": None if self.best_metrics is None else self.best_metrics.to_doc(),
            "benchmark_result": (
                None if self.benchmark_result is None else self.benchmark_result.to_doc()
            ),
            "gate_g1": self.gate_g1,
        }


def run_stage_is(is_segment: MarketSeries, strategy: Strategy, grid: ParameterGrid,
                 exec_cfg: ExecutionConfig, constraints: ConstraintSet,
                 is_config: IsConfig, benchmark: Benchmark, *,
                 settings: MetricsSettings | None = None, jobs: int = 1) -> IsReport:
    """Run the full Stage I pipeline and produce the gate verdict.

    The gate passes when the map is viable, the top-ranked candidate does
    not fail the benchmark, and the shortlist is non-empty. An unavailable
    benchmark metric leaves the gate passable but surfaces as an open item
    in the benchmark result.
    """
    settings = settings or MetricsSettings()
    smap = map_parameter_space(is_segment, strategy, grid, exec_cfg, constraints,
                               settings=settings, jobs=jobs)
    viability = viability_check(smap, is_config.sr_min)
    if viability != VIABLE:
        logger.info("stage I not viable: sr_opt=%s < %s", smap.sr_opt, is_config.sr_min)
        return IsReport(
            viability=viability, sr_opt=smap.sr_opt, stability_map=smap,
            omega_stable=(), rejected_by_trades={}, rejected_by_cliff={},
            ranked_out=(), shortlist=None, best_metrics=None,
            benchmark_result=None, gate_g1="fail",
        )

    region = stable_region(smap, is_config.alpha)
    after_trades = trade_count_filter(region, smap, is_config.n_min)
    rejected_by_trades = {
        p: f"n_trades {smap.entries[p].n_trades} < {is_config.n_min}"
        for p in region - after_trades
    }
    kept, rejected_by_cliff = cliff_veto(after_trades, smap,
                                         is_config.tau_sr, is_config.tau_dd)

    omega = tuple(sorted(region, key=lambda p: p.values))
    if not kept:
        logger.info("stage I: no survivors after filters")
        return IsReport(
            viability=viability, sr_opt=smap.sr_opt, stability_map=smap,
            omega_stable=omega, rejected_by_trades=rejected_by_trades,
            rejected_by_cliff=rejected_by_cliff, ranked_out=(), shortlist=None,
            best_metrics=None, benchmark_result=None, gate_g1="fail",
        )

    shortlist = rank_shortlist(kept, smap, is_config.shortlist_size,
                               is_config=is_config,
                               lock_timestamp=is_segment.bars[-1].timestamp)
    in_list = set(shortlist.candidates)
    ranked_out = tuple(sorted(kept - in_list, key=lambda p: p.values))

    best = shortlist.candidates[0]
    best_session = run_session(is_segment, strategy, best, exec_cfg, constraints)
    best_metrics = smap.entries[best]
    benchmark_result = meets_benchmark(best_metrics, benchmark)
    gate_g1 = "pass" if benchmark_result.status != "fail" else "fail"
    logger.info("stage I gate: %s (benchmark %s, %d shortlisted)",
                gate_g1, benchmark_result.status, len(shortlist.candidates))
    return IsReport(
        viability=viability, sr_opt=smap.sr_opt, stability_map=smap,
        omega_stable=omega, rejected_by_trades=rejected_by_trades,
        rejected_by_cliff=rejected_by_cliff, ranked_out=ranked_out,
        shortlist=shortlist, best_metrics=best_metrics,
        benchmark_result=benchmark_result, gate_g1=gate_g1,
        best_session=best_session,
    )
