"""Stateful strategy abstraction and the two reference strategies.

A strategy is a pair of pure functions over immutable values:
decide(params, bar, state) -> actions and
transition(params, state, bar, executed) -> state. The engine owns fills
and constraints; strategies only see the current bar and their own state,
which makes causality and state-reset semantics testable in isolation.

Also defines the parameter lattice (ParameterPoint / ParameterGrid) the
mapping stage enumerates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime

from .errors import ConfigError, SimulationError

LONG = 1
SHORT = -1

OPEN = "open"
CLOSE = "close"
ADJUST_STOP = "adjust_stop"
ADJUST_TP = "adjust_tp"
NO_OP = "no_op"

_LATTICE_TOL = 1e-9


@dataclass(frozen=True, slots=True)
class GridDimension:
    """One parameter axis: the lattice min + k*step for k = 0..n_steps-1."""

    name: str
    min: float
    max: float
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError(f"dimension {self.name}: step must be positive")
        if self.min > self.max:
            raise ConfigError(f"dimension {self.name}: min > max")

    @property
    def n_steps(self) -> int:
        return int(math.floor((self.max - self.min) / self.step + _LATTICE_TOL)) + 1

    def values(self) -> list[float]:
        return [self.min + k * self.step for k in range(self.n_steps)]

    def step_index(self, value: float) -> int:
        """Lattice index of value; error when off-lattice or out of bounds."""
        k = round((value - self.min) / self.step)
        if not 0 <= k < self.n_steps or abs(self.min + k * self.step - value) > _LATTICE_TOL:
            raise ConfigError(f"value {value} off the {self.name} lattice")
        return int(k)

    def to_doc(self) -> dict:
        return {"min": self.min, "max": self.max, "step": self.step}


@dataclass(frozen=True, slots=True)
class ParameterGrid:
    """Finite search lattice with an evaluation budget."""

    dimensions: tuple[GridDimension, ...]
    budget: int | None = None

    def __post_init__(self):
        names = [d.name for d in self.dimensions]
        if not names:
            raise ConfigError("grid needs at least one dimension")
        if len(names) != len(set(names)):
            raise ConfigError("duplicate grid dimension name")
        if list(names) != sorted(names):
            # canonical order makes enumeration and point identity stable
            object.__setattr__(
                self, "dimensions", tuple(sorted(self.dimensions, key=lambda d: d.name))
            )

    def size(self) -> int:
        n = 1
        for d in self.dimensions:
            n *= d.n_steps
        return n

    def dimension(self, name: str) -> GridDimension:
        for d in self.dimensions:
            if d.name == name:
                return d
        raise ConfigError(f"unknown grid dimension {name!r}")

    def enumerate_points(self) -> list["ParameterPoint"]:
        """All lattice points, lexicographic by dimension name then value."""
        points = [()]
        for d in self.dimensions:
            points = [prefix + ((d.name, v),) for prefix in points for v in d.values()]
        return [ParameterPoint(values=vals, grid=self) for vals in points]

    def to_doc(self) -> dict:
        return {
            "dims": {d.name: d.to_doc() for d in self.dimensions},
            "budget": self.budget,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ParameterGrid":
        dims = tuple(
            GridDimension(name, float(spec["min"]), float(spec["max"]), float(spec["step"]))
            for name, spec in sorted(doc["dims"].items())
        )
        budget = doc.get("budget")
        return cls(dimensions=dims, budget=None if budget is None else int(budget))


@dataclass(frozen=True, slots=True)
class ParameterPoint:
    """One parameter assignment theta; values sorted by name, on-lattice."""

    values: tuple[tuple[str, float], ...]
    grid: ParameterGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        names = [n for n, _ in self.values]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter name")
        if names != sorted(names):
            object.__setattr__(self, "values", tuple(sorted(self.values)))
        if self.grid is not None:
            for name, value in self.values:
                self.grid.dimension(name).step_index(value)

    @classmethod
    def of(cls, grid: ParameterGrid | None = None, **values: float) -> "ParameterPoint":
        return cls(values=tuple(sorted((n, float(v)) for n, v in values.items())), grid=grid)

    def __getitem__(self, name: str) -> float:
        for n, v in self.values:
            if n == name:
                return v
        raise KeyError(name)

    def as_dict(self) -> dict:
        return dict(self.values)

    def neighbor(self, dim_name: str, delta_steps: int) -> "ParameterPoint | None":
        """Axis-aligned lattice neighbor, or None when off the grid edge."""
        if self.grid is None:
            raise ConfigError("neighbor lookup requires grid metadata")
        dim = self.grid.dimension(dim_name)
        k = dim.step_index(self[dim_name]) + delta_steps
        if not 0 <= k < dim.n_steps:
            return None
        vals = tuple(
            (n, dim.min + k * dim.step if n == dim_name else v) for n, v in self.values
        )
        return ParameterPoint(values=vals, grid=self.grid)

    def to_doc(self) -> dict:
        return self.as_dict()

    @classmethod
    def from_doc(cls, doc: dict, grid: ParameterGrid | None = None) -> "ParameterPoint":
        return cls.of(grid, **{k: float(v) for k, v in doc.items()})


@dataclass(frozen=True, slots=True)
class Action:
    """One strategy instruction; the engine fills in position_id/fill_price."""

    kind: str
    direction: int = 0
    lot: float = 0.0
    stop: float | None = None
    take_profit: float | None = None
    position_id: int | None = None
    fill_price: float | None = None

    def __post_init__(self):
        if self.kind == OPEN:
            if self.direction not in (LONG, SHORT):
                raise ConfigError("open action needs direction long/short")
            if self.lot <= 0:
                raise ConfigError("open action needs lot > 0")
        elif self.kind in (CLOSE, ADJUST_STOP, ADJUST_TP):
            if self.position_id is None:
                raise ConfigError(f"{self.kind} action needs a position id")
        elif self.kind != NO_OP:
            raise ConfigError(f"unknown action kind {self.kind!r}")


@dataclass(frozen=True, slots=True)
class OpenPosition:
    position_id: int
    direction: int
    lot: float
    entry_price: float
    open_time: datetime
    stop: float | None = None
    take_profit: float | None = None


@dataclass(frozen=True)
class StrategyState:
    """Strategy-internal state s_t. The canonical (reset) state is flat:
    no positions, grid level 0, no trailing anchor, all counters zero."""

    open_positions: tuple[OpenPosition, ...] = ()
    grid_level: int = 0
    trailing_anchor: float | None = None
    counters: dict = field(default_factory=dict)
    margin_used: float = 0.0

    def is_canonical(self) -> bool:
        return (
            not self.open_positions
            and self.grid_level == 0
            and self.trailing_anchor is None
            and self.margin_used == 0.0
            and all(v == 0 for v in self.counters.values())
        )


def apply_executed(positions: tuple[OpenPosition, ...], bar, executed) -> tuple[OpenPosition, ...]:
    """Fold engine-accepted actions into the position list (shared by all
    strategies' transition implementations)."""
    out = list(positions)
    for act in executed:
        if act.kind == OPEN:
            out.append(
                OpenPosition(
                    position_id=act.position_id,
                    direction=act.direction,
                    lot=act.lot,
                    entry_price=act.fill_price,
                    open_time=bar.timestamp,
                    stop=act.stop,
                    take_profit=act.take_profit,
                )
            )
        elif act.kind == CLOSE:
            for i, p in enumerate(out):
                if p.position_id == act.position_id:
                    del out[i]
                    break
            else:
                raise SimulationError(f"close of unknown position id {act.position_id}")
        elif act.kind == ADJUST_STOP:
            out = [replace(p, stop=act.stop) if p.position_id == act.position_id else p
                   for p in out]
        elif act.kind == ADJUST_TP:
            out = [replace(p, take_profit=act.take_profit) if p.position_id == act.position_id
                   else p for p in out]
    return tuple(out)


class Strategy:
    """Pluggable strategy contract; subclasses must be deterministic and
    must never look past the bar they are handed."""

    name = "abstract"

    def __init__(self, lot: float = 0.1):
        if lot <= 0:
            raise ConfigError("lot must be positive")
        self.lot = lot

    def validate_params(self, params: ParameterPoint) -> None:
        raise NotImplementedError

    def decide(self, params: ParameterPoint, bar, state: StrategyState) -> tuple[Action, ...]:
        raise NotImplementedError

    def transition(self, params: ParameterPoint, state: StrategyState, bar,
                   executed) -> StrategyState:
        raise NotImplementedError

    def reset_state(self) -> StrategyState:
        """The canonical flat state; idempotent."""
        return StrategyState()


class GridMeanReversion(Strategy):
    """Laddered mean-reversion grid.

    The anchor price is frozen whenever the book goes flat (seeded from the
    first bar close); once price drifts grid_step beyond it, the first rung
    opens against the move (price fell -> long). Additional rungs open
    every further grid_step from the last fill, same direction only, up to
    max_levels. Each rung closes at its own entry +/- take_profit. Params:
    grid_step, max_levels, take_profit.
    """

    name = "grid"

    def validate_params(self, params: ParameterPoint) -> None:
        if params["grid_step"] <= 0:
            raise ConfigError("grid_step must be positive")
        if params["max_levels"] < 1:
            raise ConfigError("max_levels must be >= 1")
        if params["take_profit"] <= 0:
            raise ConfigError("take_profit must be positive")

    def decide(self, params, bar, state):
        step = params["grid_step"]
        tp = params["take_profit"]
        max_levels = int(params["max_levels"])
        bid = bar.bid_close
        actions = []
        for p in state.open_positions:
            if p.direction == LONG and bid >= p.entry_price + tp:
                actions.append(Action(kind=CLOSE, position_id=p.position_id))
            elif p.direction == SHORT and bid <= p.entry_price - tp:
                actions.append(Action(kind=CLOSE, position_id=p.position_id))
        if state.open_positions:
            ref = state.counters.get("last_entry", 0.0)
            if len(state.open_positions) < max_levels and ref > 0.0:
                d = state.open_positions[0].direction
                if d == LONG and bid <= ref - step:
                    actions.append(Action(kind=OPEN, direction=LONG, lot=self.lot))
                elif d == SHORT and bid >= ref + step:
                    actions.append(Action(kind=OPEN, direction=SHORT, lot=self.lot))
        else:
            anchor = state.counters.get("anchor", 0.0)
            if anchor > 0.0:
                if bid <= anchor - step:
                    actions.append(Action(kind=OPEN, direction=LONG, lot=self.lot))
                elif bid >= anchor + step:
                    actions.append(Action(kind=OPEN, direction=SHORT, lot=self.lot))
        return tuple(actions)

    def transition(self, params, state, bar, executed):
        positions = apply_executed(state.open_positions, bar, executed)
        c = dict(state.counters)
        c["bars_seen"] = c.get("bars_seen", 0.0) + 1.0
        for act in executed:
            if act.kind == OPEN:
                c["last_entry"] = act.fill_price
        if not positions:
            if state.open_positions or c.get("anchor", 0.0) == 0.0:
                # re-anchor on going flat, or seed from the first bar
                c["anchor"] = bar.bid_close
            c["last_entry"] = 0.0
        return StrategyState(
            open_positions=positions,
            grid_level=len(positions),
            trailing_anchor=None,
            counters=c,
            margin_used=0.0,
        )


class TrailingTrend(Strategy):
    """EMA-cross trend follower with a trailing stop.

    Incremental fast/slow EMAs of the bid close live in the state counters;
    no entries during the first slow_len bars (warm-up). A fast/slow cross
    opens one position in the cross direction; the trailing anchor tracks
    the best close since entry and the position exits when price retreats
    trail_dist from it. Params: fast_len, slow_len, trail_dist.
    """

    name = "trail"

    def validate_params(self, params: ParameterPoint) -> None:
        if params["fast_len"] < 1:
            raise ConfigError("fast_len must be >= 1")
        if params["slow_len"] <= params["fast_len"]:
            raise ConfigError("slow_len must exceed fast_len")
        if params["trail_dist"] <= 0:
            raise ConfigError("trail_dist must be positive")

    def decide(self, params, bar, state):
        bid = bar.bid_close
        if state.open_positions:
            p = state.open_positions[0]
            anchor = state.trailing_anchor if state.trailing_anchor is not None else p.entry_price
            trail = params["trail_dist"]
            if p.direction == LONG and bid <= anchor - trail:
                return (Action(kind=CLOSE, position_id=p.position_id),)
            if p.direction == SHORT and bid >= anchor + trail:
                return (Action(kind=CLOSE, position_id=p.position_id),)
            return ()
        c = state.counters
        if c.get("bars_seen", 0.0) < params["slow_len"]:
            return ()
        f, s = c["ema_fast"], c["ema_slow"]
        pf, ps = c["prev_fast"], c["prev_slow"]
        if pf <= ps and f > s:
            return (Action(kind=OPEN, direction=LONG, lot=self.lot),)
        if pf >= ps and f < s:
            return (Action(kind=OPEN, direction=SHORT, lot=self.lot),)
        return ()

    def transition(self, params, state, bar, executed):
        positions = apply_executed(state.open_positions, bar, executed)
        c = dict(state.counters)
        close = bar.bid_close
        bars_seen = c.get("bars_seen", 0.0)
        if bars_seen == 0.0:
            c["prev_fast"] = c["prev_slow"] = close
            c["ema_fast"] = c["ema_slow"] = close
        else:
            af = 2.0 / (params["fast_len"] + 1.0)
            as_ = 2.0 / (params["slow_len"] + 1.0)
            c["prev_fast"], c["prev_slow"] = c["ema_fast"], c["ema_slow"]
            c["ema_fast"] = c["ema_fast"] + af * (close - c["ema_fast"])
            c["ema_slow"] = c["ema_slow"] + as_ * (close - c["ema_slow"])
        c["bars_seen"] = bars_seen + 1.0

        anchor = None
        if positions:
            opened = [a for a in executed if a.kind == OPEN]
            if opened:
                anchor = opened[-1].fill_price
            else:
                prev = state.trailing_anchor
                prev = prev if prev is not None else positions[0].entry_price
                anchor = max(prev, close) if positions[0].direction == LONG else min(prev, close)
        return StrategyState(
            open_positions=positions,
            grid_level=0,
            trailing_anchor=anchor,
            counters=c,
            margin_used=0.0,
        )


STRATEGIES = {
    GridMeanReversion.name: GridMeanReversion,
    TrailingTrend.name: TrailingTrend,
}


def build_strategy(name: str, **options) -> Strategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ConfigError(f"unknown strategy {name!r}") from None
    return cls(**options)
