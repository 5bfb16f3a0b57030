"""Post-validation comparison of deployed alphas.

Ranks candidates that cleared every gate, using forward (out-of-sample)
metrics only. In-sample numbers are carried for the control observation
but never influence an ordering. The module is pure: records in,
leaderboards and report text out.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .errors import ConfigError
from .metrics import MetricVector

OBJECTIVES = ("max_oos_sharpe", "max_oos_calmar", "min_oos_mdd")

CONSISTENCY_TOL = 1e-12

# Reporting convention: a leaderboard whose top two sit closer than this
# in the objective metric gets a "small difference, untested" caveat.
SMALL_DIFF_MARGIN = 0.1

_OBJECTIVE_METRIC = {
    "max_oos_sharpe": "sharpe",
    "max_oos_calmar": "calmar",
    "min_oos_mdd": "mdd",
}


@dataclass(frozen=True)
class Mandate:
    """A single ranking objective over forward metrics."""

    objective: str

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown mandate objective: {self.objective!r}")

    @property
    def metric(self) -> str:
        return _OBJECTIVE_METRIC[self.objective]

    @property
    def ascending(self) -> bool:
        return self.objective == "min_oos_mdd"


@dataclass(frozen=True)
class AlphaRecord:
    """One validated alpha, summarized for cross-candidate comparison.

    Attributes:
        name: Label used in leaderboards and report text.
        m_is: Metrics of the best in-sample candidate.
        m_oos: Metrics of the holdout run.
        fold_sr: Test-window Sharpe per forward fold.
        wfa_mean_sr: Arithmetic mean of ``fold_sr``.
        wfa_range: max - min of ``fold_sr``.
        outcome: Final verdict of the run the record came from.
    """

    name: str
    m_is: MetricVector
    m_oos: MetricVector
    fold_sr: tuple[float, ...]
    wfa_mean_sr: float
    wfa_range: float
    outcome: str = "Deploy"

    def validate(self) -> None:
        if not self.fold_sr:
            raise ConfigError(f"record {self.name!r} has no fold Sharpe values")
        mean = sum(self.fold_sr) / len(self.fold_sr)
        rng = max(self.fold_sr) - min(self.fold_sr)
        if abs(mean - self.wfa_mean_sr) > CONSISTENCY_TOL:
            raise ConfigError(
                f"record {self.name!r}: stored fold mean {self.wfa_mean_sr} "
                f"disagrees with fold values (recomputed {mean})"
            )
        if abs(rng - self.wfa_range) > CONSISTENCY_TOL:
            raise ConfigError(
                f"record {self.name!r}: stored fold range {self.wfa_range} "
                f"disagrees with fold values (recomputed {rng})"
            )

    @classmethod
    def build(cls, name: str, m_is: MetricVector, m_oos: MetricVector,
              fold_sr, outcome: str = "Deploy") -> "AlphaRecord":
        """Builds a record with the dispersion fields derived from fold_sr."""
        fold_sr = tuple(float(v) for v in fold_sr)
        if not fold_sr:
            raise ConfigError(f"record {name!r} has no fold Sharpe values")
        return cls(
            name=name,
            m_is=m_is,
            m_oos=m_oos,
            fold_sr=fold_sr,
            wfa_mean_sr=sum(fold_sr) / len(fold_sr),
            wfa_range=max(fold_sr) - min(fold_sr),
            outcome=outcome,
        )

    @classmethod
    def from_pack(cls, pack: dict, name: str) -> "AlphaRecord":
        """Extracts a record from an evidence pack of a completed run."""
        outcome = (pack.get("verdict") or {}).get("outcome")
        if outcome != "Deploy":
            raise ConfigError(
                f"record {name!r} comes from a {outcome!r} run; "
                "only runs that passed every gate are comparable"
            )
        stage_is = pack.get("stage_is") or {}
        stage_wfa = pack.get("stage_wfa") or {}
        stage_oos = pack.get("stage_oos") or {}
        if not (stage_is.get("best_metrics") and stage_oos.get("m_oos")):
            raise ConfigError(f"record {name!r}: evidence pack is missing stage metrics")
        fold_sr = []
        for fold in stage_wfa.get("folds", ()):
            if not fold.get("evaluable"):
                continue
            m_test = fold.get("m_test") or {}
            sr = m_test.get("sharpe")
            if sr is not None:
                fold_sr.append(float(sr))
        if not fold_sr:
            raise ConfigError(f"record {name!r}: no evaluable fold Sharpe values in pack")
        return cls.build(
            name=name,
            m_is=MetricVector.from_doc(stage_is["best_metrics"]),
            m_oos=MetricVector.from_doc(stage_oos["m_oos"]),
            fold_sr=fold_sr,
            outcome=outcome,
        )

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "m_is": self.m_is.to_doc(),
            "m_oos": self.m_oos.to_doc(),
            "fold_sr": list(self.fold_sr),
            "wfa_mean_sr": self.wfa_mean_sr,
            "wfa_range": self.wfa_range,
            "outcome": self.outcome,
        }


def oos_sort_value(record: AlphaRecord, metric: str) -> float:
    """Forward metric as a sortable float, worst-cased when undefined.

    Missing drawdown sorts last under a drawdown mandate; missing Sharpe
    or Calmar sorts last under a return mandate. A Calmar left undefined
    by a zero-drawdown profitable run outranks every finite value.
    """
    m = record.m_oos
    if metric == "mdd":
        return math.inf if m.mdd_eq is None else m.mdd_eq
    if metric == "sharpe":
        return -math.inf if m.sharpe_ann is None else m.sharpe_ann
    if metric == "calmar":
        if m.calmar is not None:
            return m.calmar
        if m.mdd_eq == 0.0 and m.cagr is not None and m.cagr > 0.0:
            return math.inf
        return -math.inf
    raise ConfigError(f"unknown comparison metric: {metric!r}")


def _rank_key(record: AlphaRecord, mandate: Mandate):
    primary = oos_sort_value(record, mandate.metric)
    if not mandate.ascending:
        primary = -primary
    return (primary, -oos_sort_value(record, "calmar"), record.name)


def rank_alphas(records, mandate: Mandate) -> tuple[AlphaRecord, ...]:
    """Orders records by the mandate's forward metric.

    Ties break by forward Calmar, then name. Raises ConfigError for an
    empty input, an inconsistent record, or a record from a run that did
    not pass.
    """
    records = tuple(records)
    if not records:
        raise ConfigError("no records to rank")
    for record in records:
        if record.outcome != "Deploy":
            raise ConfigError(
                f"record {record.name!r} comes from a {record.outcome!r} run; "
                "only runs that passed every gate are comparable"
            )
        record.validate()
    return tuple(sorted(records, key=lambda r: _rank_key(r, mandate)))


def wfa_dispersion(record: AlphaRecord) -> dict:
    """Mean and max-min spread of the per-fold forward Sharpe values.

    Diagnostic only; leaderboards never consult it.
    """
    if not record.fold_sr:
        raise ConfigError(f"record {record.name!r} has no fold Sharpe values")
    return {
        "mean": sum(record.fold_sr) / len(record.fold_sr),
        "range": max(record.fold_sr) - min(record.fold_sr),
    }


def _is_sharpe_leader(records) -> AlphaRecord:
    def key(r: AlphaRecord):
        sr = r.m_is.sharpe_ann
        return (-(sr if sr is not None else -math.inf), r.name)

    return min(records, key=key)


@dataclass(frozen=True)
class ReversalReport:
    """Leaders per mandate plus the cross-mandate disagreement flags."""

    leaders: dict = field(hash=False)
    boards: dict = field(hash=False)
    reversal: bool = False
    control_flag: bool = False
    control_note: str = ""
    caveats: dict = field(default_factory=dict, hash=False)

    def to_doc(self) -> dict:
        return {
            "leaders": dict(self.leaders),
            "reversal": self.reversal,
            "control_flag": self.control_flag,
            "control_note": self.control_note,
            "caveats": dict(self.caveats),
        }


def rank_reversal_report(records, mandates=None) -> ReversalReport:
    """Builds the leaders-per-mandate matrix with reversal and control flags.

    The reversal flag fires when mandates disagree on the leader. The
    control flag fires when the in-sample Sharpe leader is not the
    forward Sharpe leader. Leaderboards whose top two sit within
    SMALL_DIFF_MARGIN of each other get a caveat entry.
    """
    records = tuple(records)
    if not records:
        raise ConfigError("no records to rank")
    if mandates is None:
        mandates = tuple(Mandate(obj) for obj in OBJECTIVES)
    else:
        mandates = tuple(mandates)

    boards = {m.objective: rank_alphas(records, m) for m in mandates}
    leaders = {obj: board[0].name for obj, board in boards.items()}
    reversal = len(set(leaders.values())) > 1

    caveats = {}
    for m in mandates:
        board = boards[m.objective]
        if len(board) < 2:
            continue
        top, second = board[0], board[1]
        diff = abs(oos_sort_value(top, m.metric) - oos_sort_value(second, m.metric))
        if diff < SMALL_DIFF_MARGIN:
            caveats[m.objective] = (
                f"top two ({top.name}, {second.name}) differ by {diff:.4f} "
                f"in {m.metric}: small difference, untested for significance "
                f"(margin {SMALL_DIFF_MARGIN} is a reporting convention)"
            )

    control_flag = False
    control_note = ""
    if len(records) >= 2:
        is_leader = _is_sharpe_leader(records)
        oos_board = rank_alphas(records, Mandate("max_oos_sharpe"))
        oos_leader = oos_board[0]
        if is_leader.name != oos_leader.name:
            control_flag = True
            control_note = (
                f"{is_leader.name} has the highest in-sample Sharpe but "
                f"{oos_leader.name} leads out of sample"
            )
            if oos_board[-1].name == is_leader.name:
                control_note += (
                    f"; {is_leader.name} is the weakest out of sample"
                )

    return ReversalReport(
        leaders=leaders,
        boards=boards,
        reversal=reversal,
        control_flag=control_flag,
        control_note=control_note,
        caveats=caveats,
    )


def leaderboard_csv(records, mandate: Mandate) -> str:
    """Renders one mandate's leaderboard as delimited text."""
    board = rank_alphas(records, mandate)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([
        "rank", "name", "objective", "oos_sharpe", "oos_calmar", "oos_mdd",
        "oos_n_trades", "wfa_mean_sr", "wfa_range", "is_sharpe",
    ])
    for rank, r in enumerate(board, start=1):
        writer.writerow([
            rank, r.name, mandate.objective,
            _cell(r.m_oos.sharpe_ann), _cell(r.m_oos.calmar), _cell(r.m_oos.mdd_eq),
            r.m_oos.n_trades, _cell(r.wfa_mean_sr), _cell(r.wfa_range),
            _cell(r.m_is.sharpe_ann),
        ])
    return buf.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def reversal_text(report: ReversalReport) -> str:
    """Human-readable reversal matrix with flags and caveats."""
    lines = ["Leader by mandate:"]
    for obj in sorted(report.leaders):
        lines.append(f"  {obj}: {report.leaders[obj]}")
    lines.append(f"Rank reversal across mandates: {'yes' if report.reversal else 'no'}")
    if report.control_flag:
        lines.append(f"Control observation: {report.control_note}")
    for obj in sorted(report.caveats):
        lines.append(f"Caveat [{obj}]: {report.caveats[obj]}")
    return "\n".join(lines) + "\n"
