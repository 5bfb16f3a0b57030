"""Stage II: fold selection, purge, gate, veto, parameter locking."""

import itertools
from statistics import median

import numpy as np
import pytest

from alphagate.canonical import canonical_json
from alphagate.engine import ConstraintSet, ExecutionConfig
from alphagate.errors import ConfigError, DataError
from alphagate.marketdata import Fold, MarketSeries, TimeRange, build_fold_schedule
from alphagate.metrics import Benchmark, MetricVector
from alphagate.stage_is import IsConfig, LockRecord, Shortlist
from alphagate.stage_wfa import (
    FoldResult,
    MajorityDecision,
    SelectionResult,
    WfaConfig,
    WfaLock,
    fold_diagnostics,
    judge_fold,
    lock_theta_star,
    majority_gate,
    run_fold,
    run_stage_wfa,
    select_fold_params,
)
from alphagate.strategy import (
    Action, CLOSE, GridMeanReversion, LONG, OPEN, SHORT,
    ParameterPoint, Strategy, StrategyState, apply_executed,
)

from helpers import make_bar, series_from_closes, ts

TABLE_BENCH = Benchmark.from_doc(
    {"sharpe": {">=": 2.0}, "calmar": {">=": 1.5}, "mdd": {"<": 0.07}}
)
LOOSE_BENCH = Benchmark.from_doc({"sharpe": {">=": -100.0}, "mdd": {"<": 2.0}})


def mk_shortlist(*points):
    return Shortlist(
        candidates=tuple(points),
        lock_record=LockRecord(
            locked_dimensions=tuple(sorted({k for p in points for k in p.as_dict()})),
            timestamp=ts(1),
            is_config=IsConfig().to_doc(),
        ),
    )


def mk_fold(index, theta, sr_test, *, evaluable=True, fold_pass=True, veto=False,
            mdd=0.03, sr_train=1.0, post_veto=False):
    m_test = MetricVector(sharpe_ann=sr_test, mdd_eq=mdd, calmar=2.0, n_trades=50)
    return FoldResult(
        index=index, theta=theta,
        m_train=MetricVector(sharpe_ann=sr_train, n_trades=50),
        m_test=m_test, evaluable=evaluable,
        fold_pass=fold_pass if evaluable else None,
        veto_triggered=veto, diagnostics=fold_diagnostics(sr_train, sr_test),
        post_veto=post_veto,
    )


class EdgeStrategy(Strategy):
    """Directional probe: params decide the side, so the train Sharpe
    separates candidates sharply on a drifting series."""

    name = "edge"

    def validate_params(self, params):
        pass

    def decide(self, params, bar, state):
        if state.open_positions:
            pid = state.open_positions[0].position_id
            return (Action(kind=CLOSE, position_id=pid),)
        side = LONG if params["edge"] > 0 else SHORT
        return (Action(kind=OPEN, direction=side, lot=self.lot),)

    def transition(self, params, state, bar, executed):
        positions = apply_executed(state.open_positions, bar, executed)
        c = dict(state.counters)
        c["bars_seen"] = c.get("bars_seen", 0.0) + 1.0
        return StrategyState(open_positions=positions, counters=c)


def rising_series(n=240, seed=2):
    rng = np.random.default_rng(seed)
    closes = 100.0 + 0.05 * np.arange(n) + rng.normal(0.0, 0.03, size=n)
    return series_from_closes([float(c) for c in closes], spread=0.0)


def sine_series(n=960, seed=5):
    rng = np.random.default_rng(seed)
    closes = 100.0 + 3.0 * np.sin(np.arange(n) / 5.0) + rng.normal(0.0, 0.2, size=n)
    return series_from_closes([float(c) for c in closes], spread=0.01)


EXEC = ExecutionConfig(initial_deposit=10_000.0, contract_size=1_000.0)
GRID_SHORTLIST = mk_shortlist(
    ParameterPoint.of(grid_step=0.5, max_levels=3, take_profit=0.5),
    ParameterPoint.of(grid_step=1.0, max_levels=3, take_profit=1.0),
)


class TestJudgeFold:
    def test_forward_pass(self):
        m = MetricVector(sharpe_ann=3.81, mdd_eq=0.0361, calmar=3.39, n_trades=100)
        ok, veto, result = judge_fold(m, WfaConfig(benchmark=TABLE_BENCH))
        assert ok and not veto
        assert result.status == "pass"

    def test_low_sharpe_fails_without_veto(self):
        m = MetricVector(sharpe_ann=1.36, mdd_eq=0.0289, calmar=2.34, n_trades=100)
        ok, veto, _ = judge_fold(m, WfaConfig(benchmark=TABLE_BENCH))
        assert not ok and not veto

    def test_drawdown_at_bound_trips_veto(self):
        m = MetricVector(sharpe_ann=3.0, mdd_eq=0.07, calmar=3.0, n_trades=100)
        ok, veto, _ = judge_fold(m, WfaConfig(benchmark=TABLE_BENCH))
        assert veto
        assert not ok  # mdd < 0.07 also fails the benchmark

    def test_veto_above_bound(self):
        m = MetricVector(sharpe_ann=3.0, mdd_eq=0.08, calmar=3.0, n_trades=100)
        assert judge_fold(m, WfaConfig(benchmark=TABLE_BENCH))[1]


class TestSelectFoldParams:
    def test_argmax_not_rank_first(self):
        shortlist = mk_shortlist(ParameterPoint.of(edge=-1.0), ParameterPoint.of(edge=1.0))
        sel = select_fold_params(rising_series(), shortlist, EdgeStrategy(),
                                 EXEC, ConstraintSet())
        assert sel.theta["edge"] == 1.0
        srs = dict((p["edge"], sr) for p, sr in sel.table)
        assert srs[1.0] > 0 > srs[-1.0]

    def test_tie_breaks_to_shortlist_rank(self):
        # both candidates trade identically: scripted-equal performance
        shortlist = mk_shortlist(ParameterPoint.of(edge=1.0), ParameterPoint.of(edge=2.0))
        sel = select_fold_params(rising_series(), shortlist, EdgeStrategy(),
                                 EXEC, ConstraintSet())
        assert sel.theta["edge"] == 1.0  # equal Sharpe, first rank wins

    def test_single_candidate(self):
        shortlist = mk_shortlist(ParameterPoint.of(edge=1.0))
        sel = select_fold_params(rising_series(), shortlist, EdgeStrategy(),
                                 EXEC, ConstraintSet())
        assert sel.theta == shortlist.candidates[0]
        assert isinstance(sel, SelectionResult)
        assert sel.m_train is not None

    def test_empty_shortlist_rejected(self):
        empty = Shortlist(candidates=(), lock_record=GRID_SHORTLIST.lock_record)
        with pytest.raises(ConfigError):
            select_fold_params(rising_series(), empty, EdgeStrategy(),
                               EXEC, ConstraintSet())

    def test_selection_matches_table_argmax(self):
        sel = select_fold_params(sine_series(480), GRID_SHORTLIST, GridMeanReversion(),
                                 EXEC, ConstraintSet())
        defined = [(sr, i) for i, (_, sr) in enumerate(sel.table) if sr is not None]
        best_sr, best_i = max(defined, key=lambda t: (t[0], -t[1]))
        assert sel.theta == sel.table[best_i][0]
        assert sel.m_train.sharpe_ann == best_sr


def quarter_fold(series, train_frac=0.5, purge_bars=24):
    """One fold over a helper series: first half train, bar-gap purge."""
    bars = series.bars
    n = len(bars)
    t_end = bars[int(n * train_frac)].timestamp
    p_end = bars[int(n * train_frac) + purge_bars].timestamp
    span = series.span()
    return Fold(index=1, train_range=TimeRange(span.start, t_end),
                purge_range=TimeRange(t_end, p_end),
                test_range=TimeRange(p_end, span.end))


class TestRunFold:
    CFG = WfaConfig(benchmark=LOOSE_BENCH, veto_mdd=0.5, min_fold_trades=1)

    def test_complete_fold(self):
        series = sine_series()
        fold = quarter_fold(series)
        res = run_fold(series, fold, GRID_SHORTLIST, GridMeanReversion(),
                       EXEC, ConstraintSet(), self.CFG)
        assert res.evaluable
        assert res.fold_pass is True
        assert not res.veto_triggered
        assert res.m_test.n_trades >= 1
        assert res.test_session is not None
        assert res.theta in GRID_SHORTLIST.candidates

    def test_insufficient_sample_not_evaluable(self):
        series = sine_series()
        fold = quarter_fold(series)
        cfg = WfaConfig(benchmark=LOOSE_BENCH, veto_mdd=0.5, min_fold_trades=100_000)
        res = run_fold(series, fold, GRID_SHORTLIST, GridMeanReversion(),
                       EXEC, ConstraintSet(), cfg)
        assert not res.evaluable
        assert res.fold_pass is None
        assert "insufficient forward sample" in res.note
        assert res.m_test is not None  # metrics still recorded for the report

    def test_test_window_outside_data_is_not_a_crash(self):
        series = sine_series(240)
        span = series.span()
        fold = Fold(index=1,
                    train_range=TimeRange(span.start, span.end),
                    purge_range=TimeRange(span.end, span.end),
                    test_range=TimeRange(span.end, span.end + (span.end - span.start)))
        res = run_fold(series, fold, GRID_SHORTLIST, GridMeanReversion(),
                       EXEC, ConstraintSet(), self.CFG)
        assert not res.evaluable and res.fold_pass is None
        assert "test session failed" in res.note

    def test_overlapping_purge_rejected(self):
        series = sine_series(240)
        span = series.span()
        mid = series.bars[120].timestamp
        bad = Fold(index=1, train_range=TimeRange(span.start, mid),
                   purge_range=TimeRange(span.start, mid),  # overlaps train
                   test_range=TimeRange(mid, span.end))
        with pytest.raises(DataError):
            run_fold(series, bad, GRID_SHORTLIST, GridMeanReversion(),
                     EXEC, ConstraintSet(), self.CFG)

    def mutate(self, series, rng_to_change, factor=1.5):
        bars = []
        for b in series.bars:
            if rng_to_change.contains(b.timestamp):
                c = b.bid_close * factor
                bars.append(make_bar(b.timestamp, c, spread=b.spread,
                                     open_=b.bid_open * factor,
                                     high=max(b.bid_open * factor, c),
                                     low=min(b.bid_open * factor, c)))
            else:
                bars.append(b)
        return MarketSeries(bars, series.symbol, series.bar_period)

    def test_no_peeking_into_test_window(self):
        series = sine_series()
        fold = quarter_fold(series)
        base = run_fold(series, fold, GRID_SHORTLIST, GridMeanReversion(),
                        EXEC, ConstraintSet(), self.CFG)
        tampered = self.mutate(series, fold.test_range)
        other = run_fold(tampered, fold, GRID_SHORTLIST, GridMeanReversion(),
                         EXEC, ConstraintSet(), self.CFG)
        assert other.theta == base.theta
        assert other.m_train == base.m_train
        assert other.m_test != base.m_test  # the probe did change the test data

    def test_purge_bars_touch_nothing(self):
        series = sine_series()
        fold = quarter_fold(series)
        base = run_fold(series, fold, GRID_SHORTLIST, GridMeanReversion(),
                        EXEC, ConstraintSet(), self.CFG)
        tampered = self.mutate(series, fold.purge_range, factor=3.0)
        other = run_fold(tampered, fold, GRID_SHORTLIST, GridMeanReversion(),
                         EXEC, ConstraintSet(), self.CFG)
        assert other.to_doc() == base.to_doc()


class TestMajorityGate:
    T = ParameterPoint.of(x=1.0)

    def folds(self, passes, veto_at=None):
        out = []
        for i, p in enumerate(passes, start=1):
            out.append(mk_fold(i, self.T, 2.5 if p else 1.0, fold_pass=p,
                               veto=(veto_at == i)))
        return out

    def test_two_of_three_passes(self):
        d = majority_gate(self.folds([True, False, True]), q=2.0 / 3.0)
        assert d.verdict == "PASS"
        assert d.pass_fraction == pytest.approx(2.0 / 3.0)
        assert d.evaluable_set == (1, 2, 3)

    def test_one_of_three_fails(self):
        d = majority_gate(self.folds([True, False, False]), q=2.0 / 3.0)
        assert d.verdict == "FAIL"

    def test_veto_dominates_unanimous_pass(self):
        d = majority_gate(self.folds([True, True, True], veto_at=2), q=2.0 / 3.0)
        assert d.verdict == "FAIL"

    def test_empty_evaluable_set_fails(self):
        folds = [mk_fold(1, self.T, 1.0, evaluable=False),
                 mk_fold(2, self.T, 1.0, evaluable=False)]
        d = majority_gate(folds, q=0.5)
        assert d.verdict == "FAIL"
        assert d.pass_fraction == 0.0
        assert d.evaluable_set == ()

    def test_non_evaluable_folds_shrink_the_denominator(self):
        folds = [mk_fold(1, self.T, 2.5, fold_pass=True),
                 mk_fold(2, self.T, 1.0, evaluable=False),
                 mk_fold(3, self.T, 2.5, fold_pass=True)]
        d = majority_gate(folds, q=1.0)
        assert d.verdict == "PASS"
        assert d.pass_fraction == 1.0
        assert d.evaluable_set == (1, 3)

    def test_exact_threshold_passes(self):
        d = majority_gate(self.folds([True, True, False]), q=2.0 / 3.0)
        assert d.verdict == "PASS"  # fraction == q

    def test_truth_table_all_patterns(self):
        q = 2.0 / 3.0
        for bits in itertools.product([True, False], repeat=3):
            for veto_at in (None, 1, 2, 3):
                folds = self.folds(list(bits), veto_at=veto_at)
                d = majority_gate(folds, q)
                frac = sum(bits) / 3.0
                expect = "FAIL" if veto_at is not None else ("PASS" if frac >= q else "FAIL")
                assert d.verdict == expect, (bits, veto_at)
                assert isinstance(d, MajorityDecision)


class TestLockThetaStar:
    A = ParameterPoint.of(x=1.0)
    B = ParameterPoint.of(x=2.0)
    C = ParameterPoint.of(x=3.0)

    def shortlist(self):
        return mk_shortlist(self.A, self.B, self.C)

    def test_unanimous_theta(self):
        folds = [mk_fold(i, self.B, 2.0 + i) for i in (1, 2, 3)]
        assert lock_theta_star(folds, self.shortlist()) == self.B

    def test_median_comparison(self):
        folds = [mk_fold(1, self.A, 3.0), mk_fold(2, self.A, 4.0),
                 mk_fold(3, self.B, 2.0)]
        assert lock_theta_star(folds, self.shortlist()) == self.A

    def test_fold_count_breaks_median_tie(self):
        folds = [mk_fold(1, self.A, 2.0), mk_fold(2, self.B, 2.0),
                 mk_fold(3, self.B, 2.0)]
        assert lock_theta_star(folds, self.shortlist()) == self.B

    def test_rank_breaks_remaining_tie(self):
        folds = [mk_fold(1, self.C, 2.0), mk_fold(2, self.A, 2.0)]
        assert lock_theta_star(folds, self.shortlist()) == self.A

    def test_non_evaluable_folds_ignored(self):
        folds = [mk_fold(1, self.A, 9.0, evaluable=False), mk_fold(2, self.B, 1.0)]
        assert lock_theta_star(folds, self.shortlist()) == self.B

    def test_no_evaluable_folds_is_an_error(self):
        folds = [mk_fold(1, self.A, 9.0, evaluable=False)]
        with pytest.raises(ConfigError):
            lock_theta_star(folds, self.shortlist())

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(21)
        thetas = [self.A, self.B, self.C]
        rank = {t: i for i, t in enumerate(thetas)}
        for _ in range(200):
            n = int(rng.integers(1, 7))
            picks = [thetas[int(rng.integers(0, 3))] for _ in range(n)]
            srs = [float(np.round(rng.uniform(0.5, 4.0), 1)) for _ in range(n)]
            folds = [mk_fold(i + 1, picks[i], srs[i]) for i in range(n)]
            got = lock_theta_star(folds, self.shortlist())
            per = {}
            for t, sr in zip(picks, srs):
                per.setdefault(t, []).append(sr)
            expected = min(per, key=lambda t: (-median(per[t]), -len(per[t]), rank[t]))
            assert got == expected


class TestDiagnostics:
    def test_basic_shift(self):
        d = fold_diagnostics(2.0, 1.0)
        assert d.delta_sr == pytest.approx(-1.0)
        assert d.eta == pytest.approx(0.5)
        assert not d.eta_undefined and not d.audit_flag

    def test_zero_train_sharpe_undefined(self):
        d = fold_diagnostics(0.0, 1.5)
        assert d.eta is None and d.eta_undefined
        assert d.delta_sr == pytest.approx(1.5)

    def test_negative_train_flagged_for_audit(self):
        d = fold_diagnostics(-0.5, 1.0)
        assert d.eta == pytest.approx(-2.0)
        assert d.audit_flag

    def test_missing_sharpe(self):
        d = fold_diagnostics(None, 2.0)
        assert d.delta_sr is None and d.eta is None and d.eta_undefined


class TestWfaConfig:
    def test_default_q_is_exact_two_thirds(self):
        assert WfaConfig().q == 2.0 / 3.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            WfaConfig(q=0.0)
        with pytest.raises(ConfigError):
            WfaConfig(q=1.5)
        with pytest.raises(ConfigError):
            WfaConfig(veto_mdd=1.0)

    def test_doc_round_trip(self):
        cfg = WfaConfig(q=0.75, benchmark=TABLE_BENCH, veto_mdd=0.1, min_fold_trades=5)
        assert WfaConfig.from_doc(cfg.to_doc()) == cfg
        assert WfaConfig.from_doc({}) == WfaConfig()


class TestWfaLock:
    def lock(self):
        return WfaLock(theta_star=ParameterPoint.of(x=2.0),
                       rule="median_test_sharpe,fold_count,shortlist_rank",
                       timestamp=ts(28), wfa_config=WfaConfig().to_doc(),
                       shortlist_hash="ab" * 32)

    def test_doc_round_trip(self):
        lock = self.lock()
        again = WfaLock.from_doc(lock.to_doc())
        assert again == lock
        assert again.lock_hash() == lock.lock_hash()

    def test_tampering_changes_hash(self):
        lock = self.lock()
        doc = lock.to_doc()
        doc["theta_star"] = {"x": 3.0}
        assert WfaLock.from_doc(doc).lock_hash() != lock.lock_hash()


class TestRunStageWfa:
    CFG = WfaConfig(benchmark=LOOSE_BENCH, veto_mdd=0.5, min_fold_trades=1)

    def run(self, config=None, series=None):
        series = series or sine_series(960)
        schedule = build_fold_schedule(series, 3, 0)
        return run_stage_wfa(series, schedule, GRID_SHORTLIST, GridMeanReversion(),
                             EXEC, ConstraintSet(), config or self.CFG)

    def test_pass_end_to_end(self):
        report = self.run()
        assert report.verdict == "PASS"
        assert report.theta_star in GRID_SHORTLIST.candidates
        assert report.lock_record is not None
        assert report.lock_record.theta_star == report.theta_star
        assert report.lock_record.shortlist_hash == GRID_SHORTLIST.lock_hash()
        assert len(report.folds) == 3
        assert report.evaluable_set == (1, 2, 3)

    def test_fail_leaves_no_lock(self):
        strict = WfaConfig(benchmark=Benchmark.from_doc({"sharpe": {">=": 1_000.0}}),
                           veto_mdd=0.5, min_fold_trades=1)
        report = self.run(strict)
        assert report.verdict == "FAIL"
        assert report.theta_star is None and report.lock_record is None

    def test_veto_decides_early_but_all_folds_reported(self):
        vetoing = WfaConfig(benchmark=LOOSE_BENCH, veto_mdd=1e-6, min_fold_trades=1)
        report = self.run(vetoing)
        assert report.verdict == "FAIL"
        assert report.folds[0].veto_triggered
        assert not report.folds[0].post_veto
        assert all(f.post_veto for f in report.folds[1:])
        assert len(report.folds) == 3  # still simulated for the record

    def test_byte_identical_reports(self):
        a = canonical_json(self.run().to_doc())
        b = canonical_json(self.run().to_doc())
        assert a == b

    def test_diagnostics_live_in_separated_block(self):
        doc = self.run().to_doc()
        assert "diagnostics" in doc
        assert len(doc["diagnostics"]) == 3
        for fold_doc in doc["folds"]:
            assert "delta_sr" not in fold_doc

    def test_diagnostic_isolation(self):
        report = self.run()
        tampered = []
        for f in report.folds:
            f2 = FoldResult(**{k: getattr(f, k) for k in (
                "index", "theta", "m_train", "m_test", "evaluable", "fold_pass",
                "veto_triggered", "benchmark_result", "selection_table",
                "post_veto", "note", "test_session")},
                diagnostics=fold_diagnostics(99.0, -99.0))
            tampered.append(f2)
        d = majority_gate(tampered, self.CFG.q)
        assert d.verdict == report.verdict
        assert lock_theta_star(tampered, GRID_SHORTLIST) == report.theta_star

    def test_table_injection_two_of_three(self):
        cfg = WfaConfig(benchmark=TABLE_BENCH)
        rows = [(3.81, 0.0361, 3.39), (1.36, 0.0289, 2.34), (6.20, 0.0230, 16.89)]
        theta = ParameterPoint.of(x=1.0)
        folds = []
        for i, (sr, mdd, calmar) in enumerate(rows, start=1):
            m = MetricVector(sharpe_ann=sr, mdd_eq=mdd, calmar=calmar, n_trades=50)
            ok, veto, result = judge_fold(m, cfg)
            folds.append(FoldResult(
                index=i, theta=theta, m_train=None, m_test=m, evaluable=True,
                fold_pass=ok, veto_triggered=veto,
                diagnostics=fold_diagnostics(None, sr), benchmark_result=result,
            ))
        assert [f.fold_pass for f in folds] == [True, False, True]
        assert not any(f.veto_triggered for f in folds)
        d = majority_gate(folds, cfg.q)
        assert d.verdict == "PASS"
        assert d.pass_fraction == pytest.approx(2.0 / 3.0)
