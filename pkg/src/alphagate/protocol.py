"""End-to-end deployment protocol: three gates, one verdict, one pack.

Stages run strictly in chronological order. The in-sample stage locks a
shortlist (gate G1), the walk-forward stage locks a single parameter point
(gate G2), and the holdout stage runs exactly that point under the
recorded lock (gate G3). The outcome follows one branching policy: a G1
fail asks for a refactor, any later fail rejects, and deployment requires
every gate to pass. Every run, failed or not, emits a canonical evidence
pack that is byte-identical across repeats except for one wall-clock
field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import __version__
from .canonical import doc_hash, format_timestamp
from .engine import (
    AblationResult,
    ConstraintSet,
    ExecutionConfig,
    GUARDS,
    SessionResult,
    StressSpec,
    ablation_run,
    apply_stress,
    run_session,
)
from .errors import ConfigError, LockError
from .marketdata import (
    FoldSchedule,
    MarketSeries,
    SplitSpec,
    build_fold_schedule,
    partition,
    trading_days,
)
from .metrics import (
    Benchmark,
    MetricVector,
    MetricsSettings,
    compute_metric_vector,
    meets_benchmark,
)
from .stage_is import IsConfig, IsReport, run_stage_is
from .stage_wfa import WfaConfig, WfaLock, WfaReport, run_stage_wfa
from .strategy import ParameterGrid, ParameterPoint, Strategy

logger = logging.getLogger(__name__)

DEPLOY = "Deploy"
REJECT = "Reject"
REFACTOR = "Refactor"


@dataclass(frozen=True, slots=True)
class ProtocolConfig:
    """One document driving a full protocol run.

    A single benchmark is shared by all three gates; the walk-forward
    stage's config is derived from it. The hash of this document is
    recorded before the first simulated bar and re-checked before the
    holdout opens.
    """

    split: SplitSpec
    grid: ParameterGrid
    strategy_spec: dict
    benchmark: Benchmark
    is_config: IsConfig = field(default_factory=IsConfig)
    q: float = 2.0 / 3.0
    veto_mdd: float = 0.07
    min_fold_trades: int = 10
    wfa_folds: int = 3
    purge_days: int = 5
    exec_cfg: ExecutionConfig = field(default_factory=ExecutionConfig)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    stress_spec: StressSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.wfa_folds < 1:
            raise ConfigError("wfa_folds must be >= 1")
        if self.purge_days < 0:
            raise ConfigError("purge_days must be >= 0")
        if not self.strategy_spec.get("name"):
            raise ConfigError("strategy_spec needs a name")

    def wfa_config(self) -> WfaConfig:
        return WfaConfig(q=self.q, benchmark=self.benchmark,
                         veto_mdd=self.veto_mdd,
                         min_fold_trades=self.min_fold_trades)

    def to_doc(self) -> dict:
        doc = {
            "split": self.split.to_doc(),
            "grid": self.grid.to_doc(),
            "strategy": dict(self.strategy_spec),
            "benchmark": self.benchmark.to_doc(),
            "stage_is": self.is_config.to_doc(),
            "stage_wfa": {
                "q": self.q,
                "veto_mdd": self.veto_mdd,
                "min_fold_trades": self.min_fold_trades,
                "n_folds": self.wfa_folds,
                "purge_days": self.purge_days,
            },
            "execution": self.exec_cfg.to_doc(),
            "constraints": self.constraints.to_doc(),
            "seed": self.seed,
        }
        doc["stress"] = None if self.stress_spec is None else self.stress_spec.to_doc()
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "ProtocolConfig":
        wfa = doc.get("stage_wfa") or {}
        stress = doc.get("stress")
        return cls(
            split=SplitSpec.from_doc(doc["split"]),
            grid=ParameterGrid.from_doc(doc["grid"]),
            strategy_spec=dict(doc["strategy"]),
            benchmark=Benchmark.from_doc(doc["benchmark"]) if doc.get("benchmark")
            else Benchmark.default(),
            is_config=IsConfig.from_doc(doc.get("stage_is") or {}),
            q=float(wfa.get("q", 2.0 / 3.0)),
            veto_mdd=float(wfa.get("veto_mdd", 0.07)),
            min_fold_trades=int(wfa.get("min_fold_trades", 10)),
            wfa_folds=int(wfa.get("n_folds", 3)),
            purge_days=int(wfa.get("purge_days", 5)),
            exec_cfg=ExecutionConfig.from_doc(doc.get("execution") or {}),
            constraints=ConstraintSet.from_doc(doc.get("constraints") or {}),
            stress_spec=None if stress is None else StressSpec.from_doc(stress),
            seed=int(doc.get("seed", 0)),
        )

    def config_hash(self) -> str:
        """Hash of every decision-relevant field.

        The stress envelope is excluded: stress runs are reporting after
        the final gate and never move a verdict, so attaching one to an
        already locked run must not invalidate the lock.
        """
        doc = self.to_doc()
        doc.pop("stress", None)
        return doc_hash(doc)


@dataclass(frozen=True, slots=True)
class Verdict:
    """Final protocol outcome under the fixed branching policy."""

    outcome: str
    failed_gate: str | None
    conditional: bool
    trace: tuple[dict, ...]

    def to_doc(self) -> dict:
        return {
            "outcome": self.outcome,
            "failed_gate": self.failed_gate,
            "conditional": self.conditional,
            "trace": [dict(entry) for entry in self.trace],
        }


def policy_verdict(g1_pass: bool, g2_pass: bool | None, g3_status: str | None):
    """Map gate outcomes to the protocol verdict.

    G1 fail asks for a refactor; a G2 or G3 fail rejects; deployment needs
    all three. An open-item G3 does not fail the gate.

    Returns:
        (outcome, failed_gate).
    """
    if not g1_pass:
        return REFACTOR, "G1"
    if not g2_pass:
        return REJECT, "G2"
    if g3_status == "fail":
        return REJECT, "G3"
    return DEPLOY, None


@dataclass(slots=True)
class OosReport:
    """Holdout outcome: one session, one locked parameter point."""

    theta_star_used: ParameterPoint
    m_oos: MetricVector
    gate_g3: str
    within_band_note: str
    benchmark_result: object
    lock_hash: str
    session: SessionResult | None = None

    def to_doc(self) -> dict:
        return {
            "theta_star_used": self.theta_star_used.as_dict(),
            "m_oos": self.m_oos.to_doc(),
            "gate_g3": self.gate_g3,
            "within_band_note": self.within_band_note,
            "benchmark_result": self.benchmark_result.to_doc(),
            "lock_hash": self.lock_hash,
        }


def run_oos(oos_segment: MarketSeries, theta_star: ParameterPoint,
            strategy: Strategy, exec_cfg: ExecutionConfig,
            constraints: ConstraintSet, benchmark: Benchmark,
            lock_record: WfaLock, *, expected_hash: str | None = None,
            settings: MetricsSettings | None = None) -> OosReport:
    """Run the strict holdout once, under the recorded parameter lock.

    The lock record is re-hashed and compared against the hash written at
    lock time, and the supplied parameter point must equal the locked one;
    any mismatch is a hard error, because it means something tried to tune
    after the lock. No other parameter point enters this function.

    Raises:
        LockError: hash mismatch or parameter point not equal to the lock.
    """
    actual = lock_record.lock_hash()
    if expected_hash is not None and actual != expected_hash:
        raise LockError("lock record hash mismatch: refusing to open the holdout")
    if theta_star != lock_record.theta_star:
        raise LockError(
            f"parameter point {theta_star.as_dict()} differs from locked "
            f"{lock_record.theta_star.as_dict()}"
        )
    settings = settings or MetricsSettings()
    session = run_session(oos_segment, strategy, theta_star, exec_cfg, constraints)
    m_oos = compute_metric_vector(session.equity_curve, session.trades, settings,
                                  trading_days(oos_segment))
    result = meets_benchmark(m_oos, benchmark)
    open_metrics = [name for name, status in sorted(result.per_metric.items())
                    if status == "unavailable"]
    if result.status == "open_item":
        note = ("open item: " + ", ".join(open_metrics)
                + " unavailable, requires cross-referencing")
    elif result.status == "pass":
        note = "all benchmark bounds met"
    else:
        failed = [name for name, status in sorted(result.per_metric.items())
                  if status == "fail"]
        note = "failed bounds: " + ", ".join(failed)
    logger.info("stage III gate: %s", result.status)
    return OosReport(
        theta_star_used=theta_star, m_oos=m_oos, gate_g3=result.status,
        within_band_note=note, benchmark_result=result, lock_hash=actual,
        session=session,
    )


def _fold_test_values(wfa_report: WfaReport, attr: str) -> list[float]:
    out = []
    for f in wfa_report.folds:
        if f.evaluable and f.m_test is not None:
            v = getattr(f.m_test, attr)
            if v is not None:
                out.append(v)
    return out


def degradation_diagnostics(is_report: IsReport, wfa_report: WfaReport,
                            oos_report: OosReport) -> dict:
    """Cross-stage shift summary; text and deltas only, never a gate input."""
    sr_is = None if is_report.best_metrics is None else is_report.best_metrics.sharpe_ann
    sr_oos = oos_report.m_oos.sharpe_ann
    fold_srs = _fold_test_values(wfa_report, "sharpe_ann")
    sr_wfa_mean = sum(fold_srs) / len(fold_srs) if fold_srs else None

    notes = []
    delta_vs_is = None
    if sr_is is not None and sr_oos is not None:
        delta_vs_is = sr_oos - sr_is
        notes.append("no degradation vs IS" if delta_vs_is >= 0.0
                     else "degradation vs IS")
    delta_vs_wfa = None
    if sr_wfa_mean is not None and sr_oos is not None:
        delta_vs_wfa = sr_oos - sr_wfa_mean
        notes.append("normalization vs WFA" if delta_vs_wfa < 0.0
                     else "no normalization vs WFA")

    mdd_is = None if is_report.best_metrics is None else is_report.best_metrics.mdd_eq
    mdd_oos = oos_report.m_oos.mdd_eq
    fold_mdds = _fold_test_values(wfa_report, "mdd_eq")
    mdd_wfa_worst = max(fold_mdds) if fold_mdds else None
    if mdd_is is not None and mdd_oos is not None and mdd_wfa_worst is not None:
        lo, hi = sorted((mdd_is, mdd_wfa_worst))
        if lo <= mdd_oos <= hi:
            notes.append("drawdown integrity holds")

    return {
        "sr_is": sr_is,
        "sr_wfa_mean": sr_wfa_mean,
        "sr_oos": sr_oos,
        "delta_sr_oos_vs_is": delta_vs_is,
        "delta_sr_oos_vs_wfa_mean": delta_vs_wfa,
        "mdd_is": mdd_is,
        "mdd_wfa_worst": mdd_wfa_worst,
        "mdd_oos": mdd_oos,
        "notes": "; ".join(notes),
    }


@dataclass(slots=True)
class StressReport:
    """Holdout re-run under degraded execution, reporting only."""

    spec: StressSpec
    m_baseline: MetricVector
    m_stressed: MetricVector
    session: SessionResult | None = None

    def to_doc(self) -> dict:
        deltas = {}
        for name in ("sharpe", "calmar", "mdd", "cagr"):
            a, b = self.m_stressed.value(name), self.m_baseline.value(name)
            deltas[name] = None if a is None or b is None else a - b
        return {
            "spec": self.spec.to_doc(),
            "m_baseline": self.m_baseline.to_doc(),
            "m_stressed": self.m_stressed.to_doc(),
            "deltas": deltas,
        }


def run_stress(oos_segment: MarketSeries, theta_star: ParameterPoint,
               strategy: Strategy, exec_cfg: ExecutionConfig,
               constraints: ConstraintSet, stress: StressSpec,
               m_baseline: MetricVector, *,
               settings: MetricsSettings | None = None) -> StressReport:
    """Re-run the holdout under a stressed execution model."""
    settings = settings or MetricsSettings()
    stressed_cfg = apply_stress(exec_cfg, stress)
    session = run_session(oos_segment, strategy, theta_star, stressed_cfg, constraints)
    m = compute_metric_vector(session.equity_curve, session.trades, settings,
                              trading_days(oos_segment))
    return StressReport(spec=stress, m_baseline=m_baseline, m_stressed=m,
                        session=session)


@dataclass(slots=True)
class ProtocolResult:
    """Everything a caller needs after a protocol run."""

    verdict: Verdict
    pack: dict
    config_hash: str
    is_report: IsReport | None
    wfa_report: WfaReport | None
    oos_report: OosReport | None
    stress_report: StressReport | None
    ablations: tuple[AblationResult, ...]
    segments: dict[str, MarketSeries]
    schedule: FoldSchedule | None


class _Trace:
    """Ordered gate/event records with logical sequence numbers."""

    def __init__(self):
        self.entries: list[dict] = []

    def add(self, event: str, **detail) -> None:
        self.entries.append({"seq": len(self.entries), "event": event, **detail})

    def freeze(self) -> tuple[dict, ...]:
        return tuple(self.entries)


def emit_evidence_pack(*, config: ProtocolConfig, config_hash: str,
                       segments: dict[str, MarketSeries], verdict: Verdict,
                       is_report: IsReport | None, wfa_report: WfaReport | None,
                       oos_report: OosReport | None,
                       stress_report: StressReport | None,
                       ablations: tuple[AblationResult, ...],
                       degradation: dict | None,
                       generated_at: datetime | None = None) -> dict:
    """Assemble the audit document for one run, in canonical-ready form.

    generated_at is the single wall-clock field; everything else is a pure
    function of the run inputs.
    """
    if generated_at is None:
        generated_at = datetime.now(tz=timezone.utc)
    return {
        "tool": {"name": "alphagate", "version": __version__},
        "generated_at": format_timestamp(generated_at),
        "seed": config.seed,
        "config": config.to_doc(),
        "config_hash": config_hash,
        "data": {name: seg.fingerprint() for name, seg in sorted(segments.items())},
        "search": {
            "grid_size": config.grid.size(),
            "budget": config.grid.budget,
            "budget_used": None if is_report is None
            else is_report.stability_map.budget_used,
        },
        "stage_is": None if is_report is None else is_report.to_doc(),
        "stage_wfa": None if wfa_report is None else wfa_report.to_doc(),
        "stage_oos": None if oos_report is None else oos_report.to_doc(),
        "stress": None if stress_report is None else stress_report.to_doc(),
        "ablation": [a.to_doc() for a in ablations],
        "degradation": degradation,
        "verdict": verdict.to_doc(),
    }


def run_protocol(series: MarketSeries, strategy: Strategy,
                 config: ProtocolConfig, *, jobs: int = 1,
                 settings: MetricsSettings | None = None) -> ProtocolResult:
    """Run the three-stage protocol over one series and emit the verdict.

    The configuration hash is recorded before the first session. Stages
    run in order and a failed gate stops progression: the holdout is never
    opened when the walk-forward stage fails. Stress and guard-ablation
    runs happen after the last gate, as reporting only.
    """
    settings = settings or MetricsSettings()
    config_hash = config.config_hash()
    trace = _Trace()
    trace.add("config_hash_recorded", hash=config_hash)
    segments = partition(series, config.split)
    trace.add("data_partitioned",
              bars={name: len(seg.bars) for name, seg in sorted(segments.items())})

    def finish(outcome, failed_gate, conditional, is_report=None, wfa_report=None,
               oos_report=None, stress_report=None, ablations=(), degradation=None,
               schedule=None):
        verdict = Verdict(outcome=outcome, failed_gate=failed_gate,
                          conditional=conditional, trace=trace.freeze())
        pack = emit_evidence_pack(
            config=config, config_hash=config_hash, segments=segments,
            verdict=verdict, is_report=is_report, wfa_report=wfa_report,
            oos_report=oos_report, stress_report=stress_report,
            ablations=ablations, degradation=degradation,
        )
        logger.info("protocol verdict: %s%s", outcome,
                    " (conditional)" if conditional else "")
        return ProtocolResult(
            verdict=verdict, pack=pack, config_hash=config_hash,
            is_report=is_report, wfa_report=wfa_report, oos_report=oos_report,
            stress_report=stress_report, ablations=ablations,
            segments=segments, schedule=schedule,
        )

    trace.add("stage_is_started")
    is_report = run_stage_is(segments["is"], strategy, config.grid,
                             config.exec_cfg, config.constraints,
                             config.is_config, config.benchmark,
                             settings=settings, jobs=jobs)
    g1_pass = is_report.gate_g1 == "pass"
    trace.add("gate_g1", status=is_report.gate_g1, viability=is_report.viability,
              sr_opt=is_report.sr_opt)
    if not g1_pass:
        trace.add("halt", reason="G1 failed: refactor required")
        outcome, failed = policy_verdict(False, None, None)
        return finish(outcome, failed, False, is_report=is_report)

    trace.add("stage_wfa_started")
    schedule = build_fold_schedule(segments["wfa"], config.wfa_folds,
                                   config.purge_days)
    wfa_report = run_stage_wfa(segments["wfa"], schedule, is_report.shortlist,
                               strategy, config.exec_cfg, config.constraints,
                               config.wfa_config(), settings=settings)
    g2_pass = wfa_report.verdict == "PASS"
    trace.add("gate_g2", status=wfa_report.verdict,
              pass_fraction=wfa_report.pass_fraction,
              evaluable=list(wfa_report.evaluable_set))
    if not g2_pass:
        trace.add("halt", reason="G2 failed: holdout never opened")
        outcome, failed = policy_verdict(True, False, None)
        return finish(outcome, failed, False, is_report=is_report,
                      wfa_report=wfa_report, schedule=schedule)

    if config.config_hash() != config_hash:
        raise LockError("configuration changed since the run started")
    trace.add("config_rehash_ok", hash=config_hash)

    trace.add("stage_oos_started",
              theta_star=wfa_report.theta_star.as_dict())
    oos_report = run_oos(segments["oos"], wfa_report.theta_star, strategy,
                         config.exec_cfg, config.constraints, config.benchmark,
                         wfa_report.lock_record,
                         expected_hash=wfa_report.lock_record.lock_hash(),
                         settings=settings)
    trace.add("gate_g3", status=oos_report.gate_g3, note=oos_report.within_band_note)

    g3_status = oos_report.gate_g3
    outcome, failed = policy_verdict(True, True, g3_status)
    conditional = outcome == DEPLOY and g3_status == "open_item"
    if conditional:
        trace.add("deploy_conditional", reason=oos_report.within_band_note)

    degradation = None
    stress_report = None
    ablations: tuple[AblationResult, ...] = ()
    if outcome == DEPLOY or g3_status == "fail":
        degradation = degradation_diagnostics(is_report, wfa_report, oos_report)
    if outcome == DEPLOY:
        if config.stress_spec is not None:
            trace.add("stress_run", spec=config.stress_spec.to_doc())
            stress_report = run_stress(segments["oos"], wfa_report.theta_star,
                                       strategy, config.exec_cfg,
                                       config.constraints, config.stress_spec,
                                       oos_report.m_oos, settings=settings)
        ablations = tuple(
            ablation_run(segments["oos"], strategy, wfa_report.theta_star,
                         config.exec_cfg, config.constraints, guard,
                         settings, trading_days(segments["oos"]))
            for guard in GUARDS
        )
        trace.add("ablation_run", guards=list(GUARDS))

    if g3_status == "fail":
        trace.add("halt", reason="G3 failed: rejected at the holdout")
    return finish(outcome, failed, conditional, is_report=is_report,
                  wfa_report=wfa_report, oos_report=oos_report,
                  stress_report=stress_report, ablations=ablations,
                  degradation=degradation, schedule=schedule)
