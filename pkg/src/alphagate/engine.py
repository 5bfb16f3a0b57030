"""Event-driven session engine: bar-close fills under execution costs and
the operational constraint set (spread guard, leverage cap, position cap,
circuit breaker, kill switch), plus stress transforms and guard ablation.

Per-bar order of operations (the documented fill convention):
mark-to-market -> day/peak bookkeeping -> equity protection -> decide ->
constraint filtering -> fills at bar close with adverse slippage and
effective spread = bar.spread * spread_multiplier -> transition -> equity
sample. Entries pay the effective spread (buy at ask); exits hit the bid
(mirrored for shorts). Commission is charged per round-turn at open.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime

from .errors import ConfigError, SimulationError
from .marketdata import MarketSeries
from .metrics import EquityCurve, METRIC_ATTRS, MetricsSettings, compute_metric_vector
from .strategy import CLOSE, LONG, OPEN, Action, ParameterPoint, Strategy, StrategyState

logger = logging.getLogger(__name__)

INF = math.inf

GUARDS = ("spread_guard", "leverage_cap", "position_cap", "circuit_breaker", "kill_switch")

PROTECT_NONE = "none"
PROTECT_HALT = "halt_new_entries"
PROTECT_KILL = "kill"


def _doc_num(value: float):
    return None if value == INF else value


@dataclass(frozen=True, slots=True)
class ExecutionConfig:
    """Execution cost model and account constants."""

    commission_per_lot: float = 0.0
    slippage: float = 0.0
    spread_multiplier: float = 1.0
    commission_multiplier: float = 1.0
    initial_deposit: float = 100_000.0
    leverage: float = 100.0
    contract_size: float = 100_000.0

    def __post_init__(self):
        if self.commission_per_lot < 0 or self.slippage < 0:
            raise ConfigError("costs must be >= 0")
        if self.spread_multiplier < 1.0 or self.commission_multiplier < 1.0:
            raise ConfigError("stress multipliers must be >= 1")
        if self.initial_deposit <= 0 or self.contract_size <= 0 or self.leverage <= 0:
            raise ConfigError("deposit, contract size and leverage must be positive")

    def to_doc(self) -> dict:
        return {
            "commission_per_lot": self.commission_per_lot,
            "slippage": self.slippage,
            "spread_multiplier": self.spread_multiplier,
            "commission_multiplier": self.commission_multiplier,
            "initial_deposit": self.initial_deposit,
            "leverage": self.leverage,
            "contract_size": self.contract_size,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ExecutionConfig":
        kwargs = {k: float(v) for k, v in doc.items()}
        return cls(**kwargs)


@dataclass(frozen=True, slots=True)
class CircuitBreakerSpec:
    """Daily-loss entry block: trips when the loss since day start exceeds
    daily_loss_pct of day-start equity (strict >)."""

    daily_loss_pct: float = INF
    cooldown_bars: int = 0

    def __post_init__(self):
        if self.daily_loss_pct <= 0:
            raise ConfigError("daily_loss_pct must be positive (inf = disabled)")
        if self.cooldown_bars < 0:
            raise ConfigError("cooldown_bars must be >= 0")


@dataclass(frozen=True, slots=True)
class ConstraintSet:
    """Operational constraint set C; inf thresholds disable a guard."""

    max_spread: float = INF
    max_leverage_used: float = INF
    max_open_positions: int = 1_000_000
    circuit_breaker: CircuitBreakerSpec = field(default_factory=CircuitBreakerSpec)
    kill_switch_dd_pct: float = INF

    def __post_init__(self):
        if self.max_spread <= 0 or self.max_leverage_used <= 0:
            raise ConfigError("guard thresholds must be positive")
        if self.max_open_positions < 1:
            raise ConfigError("max_open_positions must be >= 1")
        if self.kill_switch_dd_pct != INF and not 0.0 < self.kill_switch_dd_pct <= 1.0:
            raise ConfigError("kill_switch_dd_pct must lie in (0, 1] or be inf (disabled)")

    def to_doc(self) -> dict:
        return {
            "max_spread": _doc_num(self.max_spread),
            "max_leverage_used": _doc_num(self.max_leverage_used),
            "max_open_positions": self.max_open_positions,
            "circuit_breaker": {
                "daily_loss_pct": _doc_num(self.circuit_breaker.daily_loss_pct),
                "cooldown_bars": self.circuit_breaker.cooldown_bars,
            },
            "kill_switch_dd_pct": _doc_num(self.kill_switch_dd_pct),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ConstraintSet":
        def num(value, default=INF):
            return default if value is None else float(value)

        cb_doc = doc.get("circuit_breaker") or {}
        return cls(
            max_spread=num(doc.get("max_spread")),
            max_leverage_used=num(doc.get("max_leverage_used")),
            max_open_positions=int(doc.get("max_open_positions") or 1_000_000),
            circuit_breaker=CircuitBreakerSpec(
                daily_loss_pct=num(cb_doc.get("daily_loss_pct")),
                cooldown_bars=int(cb_doc.get("cooldown_bars") or 0),
            ),
            kill_switch_dd_pct=num(doc.get("kill_switch_dd_pct")),
        )


def disable_guard(constraints: ConstraintSet, guard: str) -> ConstraintSet:
    """Copy of the constraint set with one named guard neutralized."""
    if guard == "spread_guard":
        return replace(constraints, max_spread=INF)
    if guard == "leverage_cap":
        return replace(constraints, max_leverage_used=INF)
    if guard == "position_cap":
        return replace(constraints, max_open_positions=1_000_000_000)
    if guard == "circuit_breaker":
        return replace(constraints, circuit_breaker=CircuitBreakerSpec())
    if guard == "kill_switch":
        return replace(constraints, kill_switch_dd_pct=INF)
    raise ConfigError(f"unknown guard {guard!r}")


@dataclass(frozen=True, slots=True)
class StressSpec:
    """Degraded execution assumptions: multipliers replace the baseline
    (which is 1 by invariant), stress slippage adds to baseline slippage."""

    spread_multiplier: float = 1.0
    commission_multiplier: float = 1.0
    slippage: float = 0.0

    def __post_init__(self):
        if self.spread_multiplier < 1.0 or self.commission_multiplier < 1.0:
            raise ConfigError("stress multipliers must be >= 1")
        if self.slippage < 0:
            raise ConfigError("stress slippage must be >= 0")

    def to_doc(self) -> dict:
        return {
            "spread_multiplier": self.spread_multiplier,
            "commission_multiplier": self.commission_multiplier,
            "slippage": self.slippage,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "StressSpec":
        return cls(
            spread_multiplier=float(doc.get("spread_multiplier", 1.0)),
            commission_multiplier=float(doc.get("commission_multiplier", 1.0)),
            slippage=float(doc.get("slippage", 0.0)),
        )


def apply_stress(exec_cfg: ExecutionConfig, stress: StressSpec) -> ExecutionConfig:
    """Stressed copy of an execution config; the baseline is unmodified."""
    return replace(
        exec_cfg,
        spread_multiplier=stress.spread_multiplier,
        commission_multiplier=stress.commission_multiplier,
        slippage=exec_cfg.slippage + stress.slippage,
    )


@dataclass(frozen=True, slots=True)
class TradeRecord:
    """One round-turn. profit is net: gross P&L minus costs, exactly."""

    open_time: datetime
    close_time: datetime
    direction: int
    lot: float
    entry_price: float
    exit_price: float
    profit: float
    costs: float

    def to_doc(self) -> dict:
        return {
            "open_time": self.open_time,
            "close_time": self.close_time,
            "direction": "long" if self.direction == LONG else "short",
            "lot": self.lot,
            "entry_price": self.entry_price,
            "exit_price": self.exit_price,
            "profit": self.profit,
            "costs": self.costs,
        }


@dataclass(frozen=True, slots=True)
class Violation:
    """One guard event. hard=True marks a feasibility-breaking breach
    (kill-switch trip, leverage breach); blocked actions are soft."""

    timestamp: datetime
    guard: str
    detail: str
    hard: bool
    action: Action | None = None

    def to_doc(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "guard": self.guard,
            "detail": self.detail,
            "hard": self.hard,
            "action_kind": None if self.action is None else self.action.kind,
        }


@dataclass(slots=True)
class EquityStatus:
    """Per-bar snapshot consumed by the equity-protection step."""

    equity: float
    peak: float
    day_start_equity: float


def equity_protection_step(status: EquityStatus, constraints: ConstraintSet) -> str:
    """Evaluate kill switch then circuit breaker for one bar.

    Kill: drawdown from running equity peak >= kill_switch_dd_pct.
    Circuit breaker: loss since day start strictly greater than
    daily_loss_pct of day-start equity. Returns one of the PROTECT_*
    statuses; cooldown accounting belongs to the caller.
    """
    kill = constraints.kill_switch_dd_pct
    if kill != INF and status.peak > 0.0:
        if (status.peak - status.equity) / status.peak >= kill:
            return PROTECT_KILL
    cb = constraints.circuit_breaker
    if cb.daily_loss_pct != INF and status.day_start_equity > 0.0:
        if status.day_start_equity - status.equity > cb.daily_loss_pct * status.day_start_equity:
            return PROTECT_HALT
    return PROTECT_NONE


def apply_constraints(actions, state: StrategyState, bar, status: EquityStatus,
                      constraints: ConstraintSet, *, eff_spread: float | None = None,
                      entries_blocked: bool = False,
                      contract_size: float = 100_000.0):
    """Filter one bar's actions against the structural guards.

    Open actions are blocked by the spread guard (effective spread >
    max_spread), the leverage cap (projected notional/equity >
    max_leverage_used), the position cap, or an active circuit-breaker
    cooldown. Close and adjust actions always go through. Blocked actions
    are logged as violations, never errors.

    Returns:
        (accepted, blocked): action list and Violation list.
    """
    if eff_spread is None:
        eff_spread = bar.spread
    accepted: list[Action] = []
    blocked: list[Violation] = []
    n_open = len(state.open_positions)
    price = bar.bid_close
    notional = sum(p.lot for p in state.open_positions) * contract_size * price
    for act in actions:
        if act.kind != OPEN:
            accepted.append(act)
            continue
        if entries_blocked:
            blocked.append(Violation(bar.timestamp, "circuit_breaker",
                                     "entry blocked during cooldown", False, act))
            continue
        if eff_spread > constraints.max_spread:
            blocked.append(Violation(bar.timestamp, "spread_guard",
                                     f"effective spread {eff_spread:.6g} > {constraints.max_spread:.6g}",
                                     False, act))
            continue
        if n_open >= constraints.max_open_positions:
            blocked.append(Violation(bar.timestamp, "position_cap",
                                     f"open positions at cap {constraints.max_open_positions}",
                                     False, act))
            continue
        if constraints.max_leverage_used != INF and status.equity > 0.0:
            projected = (notional + act.lot * contract_size * price) / status.equity
            if projected > constraints.max_leverage_used:
                blocked.append(Violation(bar.timestamp, "leverage_cap",
                                         f"projected leverage {projected:.4g} > "
                                         f"{constraints.max_leverage_used:.4g}", False, act))
                continue
        accepted.append(act)
        n_open += 1
        notional += act.lot * contract_size * price
    return accepted, blocked


@dataclass(slots=True)
class SessionResult:
    """Outcome of one session over one segment."""

    equity_curve: EquityCurve
    trades: tuple[TradeRecord, ...]
    violations: tuple[Violation, ...]
    halt: str | None
    feasible: bool
    final_state: StrategyState
    final_balance: float

    @property
    def final_equity(self) -> float:
        return self.equity_curve.values[-1] if len(self.equity_curve) else self.final_balance


def _validate_initial_state(state: StrategyState) -> None:
    if not isinstance(state, StrategyState):
        raise SimulationError("invalid initial state: not a StrategyState")
    ids = [p.position_id for p in state.open_positions]
    if len(ids) != len(set(ids)):
        raise SimulationError("invalid initial state: duplicate position ids")
    if any(p.lot <= 0 for p in state.open_positions):
        raise SimulationError("invalid initial state: non-positive lot")


def run_session(segment: MarketSeries, strategy: Strategy, params: ParameterPoint,
                exec_cfg: ExecutionConfig, constraints: ConstraintSet,
                initial_state: StrategyState | None = None, *,
                normalize_at: datetime | None = None) -> SessionResult:
    """Run one strategy session over a bar segment.

    Deterministic pure function of its arguments; bars are processed
    strictly in order and equity is never recomputed retroactively. When
    normalize_at is given, the session force-closes at the last pre-boundary
    mark and resets strategy state and all accounting to the initial
    deposit, making the post-boundary arithmetic identical to an
    independent session started at the boundary.

    Args:
        segment: bars to trade (non-empty by construction).
        strategy: Strategy instance; decide/transition must be pure.
        params: parameter point for this session.
        exec_cfg: execution cost model.
        constraints: operational constraint set C.
        initial_state: canonical state unless a carryover test passes one.
        normalize_at: optional forced-reset boundary timestamp.

    Returns:
        SessionResult with the per-bar-close equity curve, round-turn trade
        list, violation log, halt cause, and the feasibility flag (true iff
        no hard violation occurred).
    """
    strategy.validate_params(params)
    state = strategy.reset_state() if initial_state is None else initial_state
    _validate_initial_state(state)

    contract = exec_cfg.contract_size
    commission_rate = exec_cfg.commission_per_lot * exec_cfg.commission_multiplier
    slip = exec_cfg.slippage
    spread_mult = exec_cfg.spread_multiplier
    lev_cap = constraints.max_leverage_used
    cooldown_span = constraints.circuit_breaker.cooldown_bars

    balance = exec_cfg.initial_deposit
    open_commission: dict[int, float] = {}
    next_id = max((p.position_id for p in state.open_positions), default=0) + 1

    trades: list[TradeRecord] = []
    violations: list[Violation] = []
    eq_ts: list[datetime] = []
    eq_vals: list[float] = []
    cur_date = None
    day_start_equity = 0.0
    peak = -INF
    cooldown = 0
    halt = None
    lev_breached = False
    pending_reset = normalize_at is not None
    prev_bar = None

    for bar in segment.bars:
        ts = bar.timestamp
        if pending_reset and ts >= normalize_at:
            # boundary mark-out: close carryover inventory at the last
            # pre-boundary close, then restart the books from scratch
            if state.open_positions and prev_bar is not None:
                prev_spread = prev_bar.spread * spread_mult
                for p in state.open_positions:
                    if p.direction == LONG:
                        exit_price = prev_bar.bid_close
                    else:
                        exit_price = prev_bar.bid_close + prev_spread
                    gross = (exit_price - p.entry_price) * p.direction * contract * p.lot
                    comm = open_commission.pop(p.position_id, 0.0)
                    trades.append(TradeRecord(p.open_time, prev_bar.timestamp, p.direction,
                                              p.lot, p.entry_price, exit_price,
                                              gross - comm, comm))
            state = strategy.reset_state()
            balance = exec_cfg.initial_deposit
            open_commission = {}
            next_id = 1
            cur_date = None
            peak = -INF
            cooldown = 0
            pending_reset = False

        eff_spread = bar.spread * spread_mult
        bid = bar.bid_close
        ask = bid + eff_spread

        equity = balance
        open_positions = state.open_positions
        if open_positions:
            for p in open_positions:
                if p.direction == LONG:
                    equity += (bid - p.entry_price) * contract * p.lot
                else:
                    equity += (p.entry_price - ask) * contract * p.lot

        bar_date = ts.date()
        if bar_date != cur_date:
            cur_date = bar_date
            day_start_equity = equity
        if equity > peak:
            peak = equity

        if open_positions:
            if equity <= 0.0:
                if not lev_breached:
                    violations.append(Violation(ts, "leverage_cap",
                                                "equity exhausted with open exposure",
                                                True))
                    lev_breached = True
            elif lev_cap != INF:
                used = sum(p.lot for p in open_positions) * contract * bid / equity
                if used > lev_cap:
                    if not lev_breached:
                        violations.append(Violation(ts, "leverage_cap",
                                                    f"leverage in use {used:.4g} > {lev_cap:.4g}",
                                                    True))
                        lev_breached = True
                else:
                    lev_breached = False
            else:
                lev_breached = False
        else:
            lev_breached = False

        status = EquityStatus(equity, peak, day_start_equity)
        decision = equity_protection_step(status, constraints)
        if decision == PROTECT_KILL:
            dd = (peak - equity) / peak if peak > 0 else 1.0
            violations.append(Violation(ts, "kill_switch",
                                        f"drawdown {dd:.4g} >= {constraints.kill_switch_dd_pct:.4g}"
                                        ", flattening and halting", True))
            for p in open_positions:
                exit_price = bid - slip if p.direction == LONG else ask + slip
                gross = (exit_price - p.entry_price) * p.direction * contract * p.lot
                balance += gross
                comm = open_commission.pop(p.position_id, 0.0)
                trades.append(TradeRecord(p.open_time, ts, p.direction, p.lot,
                                          p.entry_price, exit_price, gross - comm, comm))
            state = StrategyState()
            eq_ts.append(ts)
            eq_vals.append(balance)
            halt = "kill_switch"
            break
        if decision == PROTECT_HALT and cooldown == 0:
            violations.append(Violation(ts, "circuit_breaker",
                                        "daily loss beyond threshold, entries blocked",
                                        False))
            cooldown = cooldown_span

        actions = strategy.decide(params, bar, state)
        executed = actions
        if actions:
            accepted, blocked = apply_constraints(
                actions, state, bar, status, constraints,
                eff_spread=eff_spread, entries_blocked=cooldown > 0,
                contract_size=contract,
            )
            if blocked:
                violations.extend(blocked)
            executed = []
            for act in accepted:
                if act.kind == OPEN:
                    fill = ask + slip if act.direction == LONG else bid - slip
                    comm = commission_rate * act.lot
                    balance -= comm
                    act = replace(act, position_id=next_id, fill_price=fill)
                    open_commission[next_id] = comm
                    next_id += 1
                elif act.kind == CLOSE:
                    pos = None
                    for p in state.open_positions:
                        if p.position_id == act.position_id:
                            pos = p
                            break
                    if pos is None:
                        raise SimulationError(f"close of unknown position id {act.position_id}")
                    exit_price = bid - slip if pos.direction == LONG else ask + slip
                    gross = (exit_price - pos.entry_price) * pos.direction * contract * pos.lot
                    balance += gross
                    comm = open_commission.pop(pos.position_id, 0.0)
                    trades.append(TradeRecord(pos.open_time, ts, pos.direction, pos.lot,
                                              pos.entry_price, exit_price, gross - comm, comm))
                executed.append(act)

        state = strategy.transition(params, state, bar, executed)

        equity = balance
        if state.open_positions:
            for p in state.open_positions:
                if p.direction == LONG:
                    equity += (bid - p.entry_price) * contract * p.lot
                else:
                    equity += (p.entry_price - ask) * contract * p.lot
        if equity > peak:
            peak = equity
        eq_ts.append(ts)
        eq_vals.append(equity)

        if cooldown > 0:
            cooldown -= 1
        prev_bar = bar

    if halt is None and cooldown > 0:
        halt = "circuit_breaker"
    feasible = not any(v.hard for v in violations)
    return SessionResult(
        equity_curve=EquityCurve(eq_ts, eq_vals),
        trades=tuple(trades),
        violations=tuple(violations),
        halt=halt,
        feasible=feasible,
        final_state=state,
        final_balance=balance,
    )


@dataclass(frozen=True, slots=True)
class AblationResult:
    guard: str
    m_on: object
    m_off: object
    deltas: dict

    def to_doc(self) -> dict:
        return {
            "guard": self.guard,
            "m_on": self.m_on.to_doc(),
            "m_off": self.m_off.to_doc(),
            "deltas": dict(self.deltas),
        }


def ablation_run(segment: MarketSeries, strategy: Strategy, params: ParameterPoint,
                 exec_cfg: ExecutionConfig, constraints: ConstraintSet, guard: str,
                 settings: MetricsSettings | None = None,
                 trading_day_count: int | None = None) -> AblationResult:
    """Per-guard ablation: metric-vector difference with the named guard on
    vs off, delta = M(on) - M(off).

    A metric undefined on both sides contributes 0.0 (no difference to
    report); a metric defined on only one side reports None.
    """
    if guard not in GUARDS:
        raise ConfigError(f"unknown guard {guard!r}")
    settings = settings or MetricsSettings()
    on = run_session(segment, strategy, params, exec_cfg, constraints)
    off = run_session(segment, strategy, params, exec_cfg, disable_guard(constraints, guard))
    m_on = compute_metric_vector(on.equity_curve, on.trades, settings, trading_day_count)
    m_off = compute_metric_vector(off.equity_curve, off.trades, settings, trading_day_count)
    deltas = {}
    for name in METRIC_ATTRS:
        a, b = m_on.value(name), m_off.value(name)
        if a is None and b is None:
            deltas[name] = 0.0
        elif a is None or b is None:
            deltas[name] = None
        else:
            deltas[name] = float(a) - float(b)
    return AblationResult(guard=guard, m_on=m_on, m_off=m_off, deltas=deltas)
