"""Cross-alpha ranking: mandates, reversal matrix, dispersion diagnostics."""

import csv
import io

import numpy as np
import pytest

from alphagate.compare import (
    AlphaRecord,
    Mandate,
    leaderboard_csv,
    oos_sort_value,
    rank_alphas,
    rank_reversal_report,
    reversal_text,
    wfa_dispersion,
)
from alphagate.errors import ConfigError
from alphagate.metrics import MetricVector


def mv(sharpe=None, calmar=None, mdd=None, cagr=None, n_trades=0):
    return MetricVector(sharpe_ann=sharpe, cagr=cagr, mdd_eq=mdd,
                        calmar=calmar, n_trades=n_trades)


def record(name, *, is_sharpe, oos_sharpe, oos_calmar, oos_mdd, folds,
           oos_trades=0, outcome="Deploy"):
    return AlphaRecord.build(
        name,
        m_is=mv(sharpe=is_sharpe),
        m_oos=mv(sharpe=oos_sharpe, calmar=oos_calmar, mdd=oos_mdd,
                 cagr=None if oos_calmar is None or oos_mdd is None
                 else oos_calmar * oos_mdd,
                 n_trades=oos_trades),
        fold_sr=folds,
        outcome=outcome,
    )


def summary_records():
    """The four-candidate comparison fixture used throughout."""
    return [
        record("v1", is_sharpe=2.43, oos_sharpe=2.19, oos_calmar=2.74,
               oos_mdd=0.0443, folds=[2.97, 1.37, 5.19], oos_trades=1375),
        record("v2", is_sharpe=2.29, oos_sharpe=2.56, oos_calmar=3.52,
               oos_mdd=0.0441, folds=[2.56, 1.14, 5.08], oos_trades=1428),
        record("v3", is_sharpe=2.20, oos_sharpe=2.61, oos_calmar=3.48,
               oos_mdd=0.0436, folds=[2.53, 1.17, 5.02], oos_trades=1427),
        record("v4", is_sharpe=2.12, oos_sharpe=2.34, oos_calmar=3.01,
               oos_mdd=0.0421, folds=[3.81, 1.36, 6.20], oos_trades=1374),
    ]


class TestMandate:
    def test_objectives(self):
        assert Mandate("max_oos_sharpe").metric == "sharpe"
        assert Mandate("max_oos_calmar").metric == "calmar"
        assert Mandate("min_oos_mdd").metric == "mdd"
        assert Mandate("min_oos_mdd").ascending
        assert not Mandate("max_oos_sharpe").ascending

    def test_unknown_objective(self):
        with pytest.raises(ConfigError):
            Mandate("max_is_sharpe")


class TestAlphaRecord:
    def test_build_matches_formula_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            folds = rng.normal(2.0, 3.0, size=rng.integers(1, 9)).tolist()
            r = record("x", is_sharpe=1.0, oos_sharpe=1.0, oos_calmar=1.0,
                       oos_mdd=0.05, folds=folds)
            assert abs(r.wfa_mean_sr - float(np.mean(folds))) <= 1e-12
            assert abs(r.wfa_range - float(np.ptp(folds))) <= 1e-12
            r.validate()

    def test_tampered_mean_rejected(self):
        r = summary_records()[0]
        bad = AlphaRecord(r.name, r.m_is, r.m_oos, r.fold_sr,
                          r.wfa_mean_sr + 1e-9, r.wfa_range)
        with pytest.raises(ConfigError, match="fold mean"):
            bad.validate()

    def test_tampered_range_rejected(self):
        r = summary_records()[0]
        bad = AlphaRecord(r.name, r.m_is, r.m_oos, r.fold_sr,
                          r.wfa_mean_sr, r.wfa_range - 1e-9)
        with pytest.raises(ConfigError, match="fold range"):
            bad.validate()

    def test_empty_folds_rejected(self):
        with pytest.raises(ConfigError):
            AlphaRecord.build("x", mv(), mv(), [])

    def test_doc_shape(self):
        doc = summary_records()[3].to_doc()
        assert doc["name"] == "v4"
        assert doc["fold_sr"] == [3.81, 1.36, 6.20]
        assert doc["outcome"] == "Deploy"


class TestRankAlphas:
    def test_sharpe_mandate_leader(self):
        board = rank_alphas(summary_records(), Mandate("max_oos_sharpe"))
        assert [r.name for r in board] == ["v3", "v2", "v4", "v1"]
        assert board[0].m_oos.sharpe_ann == 2.61

    def test_calmar_mandate_leader(self):
        board = rank_alphas(summary_records(), Mandate("max_oos_calmar"))
        assert board[0].name == "v2"
        assert board[0].m_oos.calmar == 3.52

    def test_mdd_mandate_leader(self):
        board = rank_alphas(summary_records(), Mandate("min_oos_mdd"))
        assert board[0].name == "v4"
        assert board[0].m_oos.mdd_eq == 0.0421

    def test_non_pass_record_rejected(self):
        records = summary_records()
        records.append(record("bad", is_sharpe=9.0, oos_sharpe=9.0,
                              oos_calmar=9.0, oos_mdd=0.01, folds=[1.0],
                              outcome="Reject"))
        with pytest.raises(ConfigError, match="passed every gate"):
            rank_alphas(records, Mandate("max_oos_sharpe"))

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            rank_alphas([], Mandate("max_oos_sharpe"))

    def test_tie_breaks_by_calmar_then_name(self):
        a = record("aaa", is_sharpe=1.0, oos_sharpe=2.0, oos_calmar=3.0,
                   oos_mdd=0.05, folds=[1.0])
        b = record("bbb", is_sharpe=1.0, oos_sharpe=2.0, oos_calmar=4.0,
                   oos_mdd=0.05, folds=[1.0])
        c = record("ccc", is_sharpe=1.0, oos_sharpe=2.0, oos_calmar=4.0,
                   oos_mdd=0.05, folds=[1.0])
        board = rank_alphas([a, c, b], Mandate("max_oos_sharpe"))
        assert [r.name for r in board] == ["bbb", "ccc", "aaa"]

    def test_missing_metric_sorts_last(self):
        good = record("good", is_sharpe=1.0, oos_sharpe=0.1, oos_calmar=0.1,
                      oos_mdd=0.5, folds=[1.0])
        hole = record("hole", is_sharpe=1.0, oos_sharpe=None, oos_calmar=None,
                      oos_mdd=None, folds=[1.0])
        for obj in ("max_oos_sharpe", "max_oos_calmar", "min_oos_mdd"):
            board = rank_alphas([hole, good], Mandate(obj))
            assert board[-1].name == "hole"

    def test_zero_drawdown_calmar_outranks_everything(self):
        star = AlphaRecord.build(
            "star", mv(sharpe=1.0),
            mv(sharpe=1.0, calmar=None, mdd=0.0, cagr=0.2), [1.0])
        rich = record("rich", is_sharpe=1.0, oos_sharpe=9.0, oos_calmar=99.0,
                      oos_mdd=0.01, folds=[1.0])
        board = rank_alphas([rich, star], Mandate("max_oos_calmar"))
        assert board[0].name == "star"

    def test_is_metrics_never_affect_order(self):
        base = summary_records()
        scaled = []
        for r in base:
            m_is = MetricVector(
                sharpe_ann=None if r.m_is.sharpe_ann is None else r.m_is.sharpe_ann * 7.3,
                cagr=r.m_is.cagr, mdd_eq=r.m_is.mdd_eq, calmar=r.m_is.calmar,
                n_trades=r.m_is.n_trades)
            scaled.append(AlphaRecord(r.name, m_is, r.m_oos, r.fold_sr,
                                      r.wfa_mean_sr, r.wfa_range, r.outcome))
        for obj in ("max_oos_sharpe", "max_oos_calmar", "min_oos_mdd"):
            before = [r.name for r in rank_alphas(base, Mandate(obj))]
            after = [r.name for r in rank_alphas(scaled, Mandate(obj))]
            assert before == after

    def test_total_order_on_random_sets(self):
        rng = np.random.default_rng(3)
        for trial in range(30):
            records = [
                record(f"r{i}", is_sharpe=float(rng.normal()),
                       oos_sharpe=float(rng.normal(2, 1)),
                       oos_calmar=float(rng.normal(3, 1)),
                       oos_mdd=float(rng.uniform(0.01, 0.2)),
                       folds=rng.normal(2, 1, size=3).tolist())
                for i in range(rng.integers(2, 8))
            ]
            for obj in ("max_oos_sharpe", "max_oos_calmar", "min_oos_mdd"):
                mandate = Mandate(obj)
                board = rank_alphas(records, mandate)
                shuffled = list(records)
                rng.shuffle(shuffled)
                again = rank_alphas(shuffled, mandate)
                assert [r.name for r in board] == [r.name for r in again]
                assert sorted(r.name for r in board) == sorted(r.name for r in records)


class TestWfaDispersion:
    def test_reference_fold_vector(self):
        d = wfa_dispersion(summary_records()[3])
        assert d["mean"] == pytest.approx(3.79, abs=0.005)
        assert d["range"] == pytest.approx(4.84, abs=0.005)

    def test_all_reference_rows_round_to_reported(self):
        expect = {"v1": (3.18, 3.82), "v2": (2.93, 3.94),
                  "v3": (2.91, 3.85), "v4": (3.79, 4.84)}
        for r in summary_records():
            d = wfa_dispersion(r)
            mean_2dp, range_2dp = expect[r.name]
            assert round(d["mean"], 2) == mean_2dp
            assert round(d["range"], 2) == range_2dp

    def test_formula_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            folds = rng.normal(0.0, 5.0, size=rng.integers(1, 11)).tolist()
            r = record("x", is_sharpe=1.0, oos_sharpe=1.0, oos_calmar=1.0,
                       oos_mdd=0.05, folds=folds)
            d = wfa_dispersion(r)
            assert abs(d["mean"] - float(np.mean(folds))) <= 1e-12
            assert abs(d["range"] - float(np.ptp(folds))) <= 1e-12

    def test_single_fold_range_zero(self):
        r = record("x", is_sharpe=1.0, oos_sharpe=1.0, oos_calmar=1.0,
                   oos_mdd=0.05, folds=[2.5])
        assert wfa_dispersion(r) == {"mean": 2.5, "range": 0.0}

    def test_empty_folds(self):
        bare = AlphaRecord("x", mv(), mv(), (), 0.0, 0.0)
        with pytest.raises(ConfigError):
            wfa_dispersion(bare)

    def test_dispersion_never_changes_ranking(self):
        base = summary_records()
        flattened = [AlphaRecord(r.name, r.m_is, r.m_oos, (r.wfa_mean_sr,),
                                 r.wfa_mean_sr, 0.0, r.outcome) for r in base]
        for obj in ("max_oos_sharpe", "max_oos_calmar", "min_oos_mdd"):
            assert ([r.name for r in rank_alphas(base, Mandate(obj))]
                    == [r.name for r in rank_alphas(flattened, Mandate(obj))])


class TestReversalReport:
    def test_reference_leaders_and_flags(self):
        report = rank_reversal_report(summary_records())
        assert report.leaders == {"max_oos_sharpe": "v3",
                                  "max_oos_calmar": "v2",
                                  "min_oos_mdd": "v4"}
        assert report.reversal
        assert report.control_flag
        assert "v1" in report.control_note
        assert "weakest out of sample" in report.control_note

    def test_small_difference_caveat_on_sharpe(self):
        report = rank_reversal_report(summary_records())
        note = report.caveats["max_oos_sharpe"]
        assert "v3" in note and "v2" in note
        assert "small difference, untested" in note

    def test_single_record_no_reversal(self):
        report = rank_reversal_report(summary_records()[:1])
        assert not report.reversal
        assert not report.control_flag
        assert report.leaders == {obj: "v1" for obj in report.leaders}

    def test_dominant_record_no_reversal(self):
        king = record("king", is_sharpe=9.0, oos_sharpe=9.0, oos_calmar=9.0,
                      oos_mdd=0.001, folds=[9.0])
        pawn = record("pawn", is_sharpe=1.0, oos_sharpe=1.0, oos_calmar=1.0,
                      oos_mdd=0.5, folds=[1.0])
        report = rank_reversal_report([king, pawn])
        assert not report.reversal
        assert not report.control_flag

    def test_control_without_weakest_suffix(self):
        # in-sample leader loses the lead forward but is not last
        a = record("a", is_sharpe=5.0, oos_sharpe=2.0, oos_calmar=2.0,
                   oos_mdd=0.05, folds=[1.0])
        b = record("b", is_sharpe=1.0, oos_sharpe=3.0, oos_calmar=3.0,
                   oos_mdd=0.05, folds=[1.0])
        c = record("c", is_sharpe=1.0, oos_sharpe=1.0, oos_calmar=1.0,
                   oos_mdd=0.05, folds=[1.0])
        report = rank_reversal_report([a, b, c])
        assert report.control_flag
        assert "weakest" not in report.control_note

    def test_text_rendering(self):
        text = reversal_text(rank_reversal_report(summary_records()))
        assert "max_oos_sharpe: v3" in text
        assert "Rank reversal across mandates: yes" in text
        assert "Control observation:" in text
        assert text.endswith("\n")

    def test_doc_shape(self):
        doc = rank_reversal_report(summary_records()).to_doc()
        assert set(doc) == {"leaders", "reversal", "control_flag",
                            "control_note", "caveats"}
        assert doc["reversal"] is True


class TestLeaderboardCsv:
    def test_rows_and_order(self):
        text = leaderboard_csv(summary_records(), Mandate("max_oos_sharpe"))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0][0:3] == ["rank", "name", "objective"]
        assert [r[1] for r in rows[1:]] == ["v3", "v2", "v4", "v1"]
        assert rows[1][0] == "1" and rows[1][2] == "max_oos_sharpe"
        assert float(rows[1][3]) == 2.61

    def test_none_cells_empty(self):
        hole = record("hole", is_sharpe=None, oos_sharpe=None, oos_calmar=None,
                      oos_mdd=0.05, folds=[1.0])
        text = leaderboard_csv([hole], Mandate("min_oos_mdd"))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[1][3] == "" and rows[1][4] == ""


class TestFromPack:
    def make_pack(self, outcome="Deploy"):
        return {
            "verdict": {"outcome": outcome},
            "stage_is": {"best_metrics": mv(sharpe=2.12, mdd=0.0646,
                                            calmar=1.69, cagr=0.109,
                                            n_trades=2625).to_doc()},
            "stage_wfa": {"folds": [
                {"evaluable": True, "m_test": mv(sharpe=3.81, mdd=0.0361).to_doc()},
                {"evaluable": True, "m_test": mv(sharpe=1.36, mdd=0.0289).to_doc()},
                {"evaluable": False, "m_test": None},
                {"evaluable": True, "m_test": mv(sharpe=6.20, mdd=0.0230).to_doc()},
            ]},
            "stage_oos": {"m_oos": mv(sharpe=2.34, mdd=0.0421, calmar=3.01,
                                      cagr=0.127, n_trades=1374).to_doc()},
        }

    def test_extracts_evaluable_folds(self):
        r = AlphaRecord.from_pack(self.make_pack(), "v4")
        assert r.fold_sr == (3.81, 1.36, 6.20)
        assert r.m_is.sharpe_ann == 2.12
        assert r.m_oos.mdd_eq == 0.0421
        r.validate()

    def test_non_deploy_pack_rejected(self):
        with pytest.raises(ConfigError, match="Refactor"):
            AlphaRecord.from_pack(self.make_pack("Refactor"), "x")

    def test_missing_stage_rejected(self):
        pack = self.make_pack()
        pack["stage_oos"] = None
        with pytest.raises(ConfigError, match="missing stage"):
            AlphaRecord.from_pack(pack, "x")

    def test_no_usable_folds_rejected(self):
        pack = self.make_pack()
        pack["stage_wfa"]["folds"] = [{"evaluable": False, "m_test": None}]
        with pytest.raises(ConfigError, match="fold Sharpe"):
            AlphaRecord.from_pack(pack, "x")


class TestOosSortValue:
    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            oos_sort_value(summary_records()[0], "cagr")
