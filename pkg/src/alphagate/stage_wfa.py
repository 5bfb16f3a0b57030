"""Stage II: walk-forward evaluation under the locked shortlist.

Each fold re-selects a parameter point from the shortlist using only its
train window, then runs the test window as an independent session from
canonical state with a purge gap between the two. Folds pass or fail the
shared benchmark; the stage passes when enough evaluable folds pass and no
fold trips the catastrophic veto (excessive test drawdown or a hard
constraint violation). On a pass, a single parameter point is selected by
a pre-committed median rule and locked for the holdout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from statistics import median

from .canonical import doc_hash, format_timestamp, parse_timestamp
from .engine import ConstraintSet, ExecutionConfig, SessionResult, run_session
from .errors import ConfigError, DataError, SimulationError
from .marketdata import Fold, FoldSchedule, MarketSeries, trading_days
from .metrics import (
    Benchmark,
    BenchmarkResult,
    MetricVector,
    MetricsSettings,
    compute_metric_vector,
    meets_benchmark,
)
from .stage_is import Shortlist
from .strategy import ParameterPoint, Strategy

logger = logging.getLogger(__name__)

PASS = "PASS"
FAIL = "FAIL"

THETA_RULE = "median_test_sharpe,fold_count,shortlist_rank"


@dataclass(frozen=True, slots=True)
class WfaConfig:
    """Stage II knobs; q is the minimum fraction of evaluable folds that
    must pass, veto_mdd the catastrophic test-window drawdown bound."""

    q: float = 2.0 / 3.0
    benchmark: Benchmark = field(default_factory=Benchmark.default)
    veto_mdd: float = 0.07
    min_fold_trades: int = 10

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError("q must lie in (0, 1]")
        if not 0.0 < self.veto_mdd < 1.0:
            raise ConfigError("veto_mdd must lie in (0, 1)")
        if self.min_fold_trades < 0:
            raise ConfigError("min_fold_trades must be >= 0")

    def to_doc(self) -> dict:
        return {
            "q": self.q,
            "benchmark": self.benchmark.to_doc(),
            "veto_mdd": self.veto_mdd,
            "min_fold_trades": self.min_fold_trades,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "WfaConfig":
        kwargs = {}
        if "q" in doc:
            kwargs["q"] = float(doc["q"])
        if "benchmark" in doc:
            kwargs["benchmark"] = Benchmark.from_doc(doc["benchmark"])
        if "veto_mdd" in doc:
            kwargs["veto_mdd"] = float(doc["veto_mdd"])
        if "min_fold_trades" in doc:
            kwargs["min_fold_trades"] = int(doc["min_fold_trades"])
        return cls(**kwargs)


@dataclass(frozen=True, slots=True)
class FoldDiagnostics:
    """Train-to-test shift measures; report-only by interface.

    eta is undefined when the train Sharpe is zero; a negative eta (train
    and test Sharpe of opposite sign) is flagged for audit.
    """

    delta_sr: float | None
    eta: float | None
    eta_undefined: bool
    audit_flag: bool

    def to_doc(self) -> dict:
        return {
            "delta_sr": self.delta_sr,
            "eta": self.eta,
            "eta_undefined": self.eta_undefined,
            "audit_flag": self.audit_flag,
        }


def fold_diagnostics(sr_train: float | None, sr_test: float | None) -> FoldDiagnostics:
    """Shift diagnostics for one fold, with explicit undefined flags."""
    if sr_train is None or sr_test is None:
        return FoldDiagnostics(None, None, True, False)
    delta = sr_test - sr_train
    if sr_train == 0.0:
        return FoldDiagnostics(delta, None, True, False)
    eta = sr_test / sr_train
    return FoldDiagnostics(delta, eta, False, eta < 0.0)


@dataclass(slots=True)
class FoldResult:
    """Outcome of one walk-forward fold.

    fold_pass is None when the fold is not evaluable. post_veto marks a
    fold simulated only for reporting after an earlier fold's veto already
    decided the stage.
    """

    index: int
    theta: ParameterPoint | None
    m_train: MetricVector | None
    m_test: MetricVector | None
    evaluable: bool
    fold_pass: bool | None
    veto_triggered: bool
    diagnostics: FoldDiagnostics
    benchmark_result: BenchmarkResult | None = None
    selection_table: tuple = ()
    post_veto: bool = False
    note: str = ""
    test_session: SessionResult | None = None

    def to_doc(self) -> dict:
        return {
            "index": self.index,
            "theta": None if self.theta is None else self.theta.as_dict(),
            "m_train": None if self.m_train is None else self.m_train.to_doc(),
            "m_test": None if self.m_test is None else self.m_test.to_doc(),
            "evaluable": self.evaluable,
            "fold_pass": self.fold_pass,
            "veto_triggered": self.veto_triggered,
            "benchmark_result": (
                None if self.benchmark_result is None else self.benchmark_result.to_doc()
            ),
            "selection_table": [
                {"params": p.as_dict(), "train_sharpe": sr}
                for p, sr in self.selection_table
            ],
            "post_veto": self.post_veto,
            "note": self.note,
        }


@dataclass(frozen=True, slots=True)
class SelectionResult:
    """Per-fold restricted re-selection over the locked shortlist."""

    theta: ParameterPoint
    m_train: MetricVector
    table: tuple


def select_fold_params(train_segment: MarketSeries, shortlist: Shortlist,
                       strategy: Strategy, exec_cfg: ExecutionConfig,
                       constraints: ConstraintSet, *,
                       settings: MetricsSettings | None = None) -> SelectionResult:
    """Pick the shortlist candidate with the best train-window Sharpe.

    Every candidate runs on the train segment from canonical state; ties
    (including all-undefined Sharpe) resolve to the better shortlist rank.
    The function receives only the train segment, so test data cannot
    influence the choice.
    """
    if not shortlist.candidates:
        raise ConfigError("shortlist is empty")
    settings = settings or MetricsSettings()
    day_count = trading_days(train_segment)
    table = []
    vectors = []
    for candidate in shortlist.candidates:
        res = run_session(train_segment, strategy, candidate, exec_cfg, constraints)
        m = compute_metric_vector(res.equity_curve, res.trades, settings, day_count)
        table.append((candidate, m.sharpe_ann))
        vectors.append(m)
    best = 0
    for i in range(1, len(table)):
        best_sr = table[best][1]
        sr = table[i][1]
        if sr is not None and (best_sr is None or sr > best_sr):
            best = i
    return SelectionResult(theta=table[best][0], m_train=vectors[best],
                           table=tuple(table))


def judge_fold(m_test: MetricVector, config: WfaConfig):
    """Benchmark verdict and veto flag for one fold's test metrics.

    The fold passes only on a clean benchmark pass; the veto trips when the
    test drawdown reaches veto_mdd.

    Returns:
        (fold_pass, veto_triggered, benchmark_result).
    """
    result = meets_benchmark(m_test, config.benchmark)
    veto = m_test.mdd_eq is not None and m_test.mdd_eq >= config.veto_mdd
    return result.status == "pass", veto, result


def _fold_ranges_consistent(fold: Fold) -> bool:
    if fold.purge_range.start == fold.purge_range.end:
        return fold.train_range.end <= fold.test_range.start
    return (fold.train_range.end <= fold.purge_range.start
            and fold.purge_range.end <= fold.test_range.start)


def run_fold(series: MarketSeries, fold: Fold, shortlist: Shortlist,
             strategy: Strategy, exec_cfg: ExecutionConfig,
             constraints: ConstraintSet, config: WfaConfig, *,
             settings: MetricsSettings | None = None,
             post_veto: bool = False) -> FoldResult:
    """Run one fold: restricted re-selection on train, forward test session.

    The test session starts from canonical state. A simulation or data
    failure makes the fold non-evaluable instead of raising. The purge gap
    is enforced: neither session sees a purge-range bar.
    """
    settings = settings or MetricsSettings()
    if not _fold_ranges_consistent(fold):
        raise DataError(f"fold {fold.index}: purge range overlaps train or test")

    def failed(note, theta=None, m_train=None, table=()):
        logger.warning("fold %d not evaluable: %s", fold.index, note)
        return FoldResult(
            index=fold.index, theta=theta, m_train=m_train, m_test=None,
            evaluable=False, fold_pass=None, veto_triggered=False,
            diagnostics=fold_diagnostics(None, None), selection_table=table,
            post_veto=post_veto, note=note,
        )

    try:
        train_segment = series.slice(fold.train_range)
        selection = select_fold_params(train_segment, shortlist, strategy,
                                       exec_cfg, constraints, settings=settings)
    except (DataError, SimulationError) as exc:
        return failed(f"train selection failed: {exc}")

    try:
        test_segment = series.slice(fold.test_range)
        session = run_session(test_segment, strategy, selection.theta,
                              exec_cfg, constraints)
    except (DataError, SimulationError) as exc:
        return failed(f"test session failed: {exc}", theta=selection.theta,
                      m_train=selection.m_train, table=selection.table)

    m_test = compute_metric_vector(session.equity_curve, session.trades, settings,
                                   trading_days(test_segment))
    evaluable = m_test.n_trades >= config.min_fold_trades
    hard_violation = not session.feasible
    mdd_veto = m_test.mdd_eq is not None and m_test.mdd_eq >= config.veto_mdd
    veto = mdd_veto or hard_violation
    if evaluable:
        fold_pass, _, benchmark_result = judge_fold(m_test, config)
    else:
        fold_pass, benchmark_result = None, None
    note = ""
    if not evaluable:
        note = f"insufficient forward sample: {m_test.n_trades} trades"
    elif hard_violation:
        note = "hard constraint violation in test window"
    diag = fold_diagnostics(selection.m_train.sharpe_ann, m_test.sharpe_ann)
    return FoldResult(
        index=fold.index, theta=selection.theta, m_train=selection.m_train,
        m_test=m_test, evaluable=evaluable, fold_pass=fold_pass,
        veto_triggered=veto, diagnostics=diag, benchmark_result=benchmark_result,
        selection_table=selection.table, post_veto=post_veto, note=note,
        test_session=session,
    )


@dataclass(frozen=True, slots=True)
class MajorityDecision:
    verdict: str
    pass_fraction: float
    evaluable_set: tuple[int, ...]


def majority_gate(folds, q: float) -> MajorityDecision:
    """Stage verdict: any veto or an empty evaluable set fails outright;
    otherwise pass iff the passing fraction of evaluable folds reaches q.

    pass_fraction is reported as 0.0 when no fold is evaluable.
    """
    evaluable = tuple(f.index for f in folds if f.evaluable)
    passes = sum(1 for f in folds if f.evaluable and f.fold_pass)
    fraction = passes / len(evaluable) if evaluable else 0.0
    if any(f.veto_triggered for f in folds):
        return MajorityDecision(FAIL, fraction, evaluable)
    if not evaluable:
        return MajorityDecision(FAIL, fraction, evaluable)
    verdict = PASS if fraction >= q else FAIL
    return MajorityDecision(verdict, fraction, evaluable)


def lock_theta_star(folds, shortlist: Shortlist) -> ParameterPoint:
    """Pre-committed selection among the parameter points used in folds.

    Highest median test Sharpe over the evaluable folds where the point was
    selected; ties go to the point used in more folds, then to the better
    shortlist rank.
    """
    rank = {p: i for i, p in enumerate(shortlist.candidates)}
    groups: dict[ParameterPoint, list] = {}
    for f in folds:
        if f.evaluable and f.theta is not None:
            sr = None if f.m_test is None else f.m_test.sharpe_ann
            groups.setdefault(f.theta, []).append(sr)
    if not groups:
        raise ConfigError("no evaluable folds to select from")

    def key(theta: ParameterPoint):
        srs = [s for s in groups[theta] if s is not None]
        med = median(srs) if srs else -math.inf
        return (-med, -len(groups[theta]), rank.get(theta, len(rank)))

    return min(groups, key=key)


@dataclass(frozen=True, slots=True)
class WfaLock:
    """Immutable record locking the holdout parameter point."""

    theta_star: ParameterPoint
    rule: str
    timestamp: datetime
    wfa_config: dict = field(hash=False)
    shortlist_hash: str = ""

    def to_doc(self) -> dict:
        return {
            "theta_star": self.theta_star.as_dict(),
            "rule": self.rule,
            "timestamp": format_timestamp(self.timestamp),
            "wfa_config": dict(self.wfa_config),
            "shortlist_hash": self.shortlist_hash,
        }

    def lock_hash(self) -> str:
        return doc_hash(self.to_doc())

    @classmethod
    def from_doc(cls, doc: dict) -> "WfaLock":
        return cls(
            theta_star=ParameterPoint.of(**doc["theta_star"]),
            rule=doc["rule"],
            timestamp=parse_timestamp(doc["timestamp"]),
            wfa_config=dict(doc["wfa_config"]),
            shortlist_hash=doc["shortlist_hash"],
        )


@dataclass(slots=True)
class WfaReport:
    """Stage II outcome with the fold table and, on PASS, the lock."""

    folds: tuple[FoldResult, ...]
    evaluable_set: tuple[int, ...]
    pass_fraction: float
    verdict: str
    theta_star: ParameterPoint | None
    lock_record: WfaLock | None

    def to_doc(self) -> dict:
        return {
            "folds": [f.to_doc() for f in self.folds],
            "evaluable_set": list(self.evaluable_set),
            "pass_fraction": self.pass_fraction,
            "verdict": self.verdict,
            "theta_star": None if self.theta_star is None else self.theta_star.as_dict(),
            "lock_record": None if self.lock_record is None else self.lock_record.to_doc(),
            "lock_hash": None if self.lock_record is None else self.lock_record.lock_hash(),
            "diagnostics": [
                {"index": f.index, **f.diagnostics.to_doc()} for f in self.folds
            ],
        }


def run_stage_wfa(series: MarketSeries, schedule: FoldSchedule, shortlist: Shortlist,
                  strategy: Strategy, exec_cfg: ExecutionConfig,
                  constraints: ConstraintSet, config: WfaConfig, *,
                  settings: MetricsSettings | None = None) -> WfaReport:
    """Run every fold in index order and assemble the stage verdict.

    A veto decides the stage the moment it happens; later folds are still
    simulated so the record is complete, but they are flagged post-veto and
    cannot change the verdict. The parameter lock is written only on PASS.
    """
    settings = settings or MetricsSettings()
    results = []
    veto_seen = False
    for fold in schedule.folds:
        result = run_fold(series, fold, shortlist, strategy, exec_cfg, constraints,
                          config, settings=settings, post_veto=veto_seen)
        if result.veto_triggered and not veto_seen:
            veto_seen = True
            logger.info("fold %d vetoed: stage verdict fixed to FAIL", fold.index)
        results.append(result)

    decision = majority_gate(results, config.q)
    theta_star = None
    lock = None
    if decision.verdict == PASS:
        theta_star = lock_theta_star(results, shortlist)
        lock = WfaLock(
            theta_star=theta_star,
            rule=THETA_RULE,
            timestamp=series.bars[-1].timestamp,
            wfa_config=config.to_doc(),
            shortlist_hash=shortlist.lock_hash(),
        )
    logger.info("stage II verdict: %s (pass fraction %.4f over %d evaluable folds)",
                decision.verdict, decision.pass_fraction, len(decision.evaluable_set))
    return WfaReport(
        folds=tuple(results),
        evaluable_set=decision.evaluable_set,
        pass_fraction=decision.pass_fraction,
        verdict=decision.verdict,
        theta_star=theta_star,
        lock_record=lock,
    )
