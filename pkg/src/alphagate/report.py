"""Artifact emission: summary text, CSV extracts, and SVG equity plots.

Everything here renders existing results; nothing recomputes a metric or
re-runs a simulation. File output is deterministic: SVGs carry no wall
clock and a fixed hash salt, so re-running the same inputs overwrites
byte-identically.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .canonical import canonical_json, format_timestamp, parse_timestamp  # noqa: E402
from .compare import Mandate, OBJECTIVES, leaderboard_csv, reversal_text  # noqa: E402
from .errors import DataError  # noqa: E402
from .metrics import EquityCurve  # noqa: E402

_SVG_STYLE = {
    "svg.hashsalt": "alphagate",
    "figure.figsize": (8.0, 4.5),
    "figure.dpi": 100,
}


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_pack(path: Path, pack: dict) -> Path:
    return write_text(path, canonical_json(pack) + "\n")


def equity_csv(curve: EquityCurve) -> str:
    """Serializes an equity curve as timestamp,equity rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["timestamp", "equity"])
    for ts, value in zip(curve.timestamps, curve.values):
        writer.writerow([format_timestamp(ts), f"{value:.17g}"])
    return buf.getvalue()


def read_equity_csv(text: str) -> EquityCurve:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["timestamp", "equity"]:
        raise DataError("equity extract missing timestamp,equity header")
    stamps = [parse_timestamp(r[0]) for r in rows[1:]]
    values = [float(r[1]) for r in rows[1:]]
    return EquityCurve(stamps, values)


def _params_label(doc) -> str:
    if not doc:
        return "-"
    return ",".join(f"{k}={doc[k]:g}" for k in sorted(doc))


def fold_table_csv(pack: dict) -> str:
    """Per-fold table with the gate column, from a pack's forward section."""
    stage = pack.get("stage_wfa") or {}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fold", "theta", "train_sharpe", "test_sharpe",
                     "test_mdd", "test_calmar", "n_trades", "evaluable",
                     "gate", "veto", "post_veto", "note"])
    for fold in stage.get("folds", ()):
        m_train = fold.get("m_train") or {}
        m_test = fold.get("m_test") or {}
        if fold.get("fold_pass") is None:
            gate = "not evaluable"
        else:
            gate = "PASS" if fold["fold_pass"] else "FAIL"
        writer.writerow([
            fold.get("index"), _params_label(fold.get("theta")),
            _num(m_train.get("sharpe")), _num(m_test.get("sharpe")),
            _num(m_test.get("mdd")), _num(m_test.get("calmar")),
            m_test.get("n_trades", ""),
            "yes" if fold.get("evaluable") else "no",
            gate,
            "yes" if fold.get("veto_triggered") else "no",
            "yes" if fold.get("post_veto") else "no",
            fold.get("note", ""),
        ])
    return buf.getvalue()


def _num(value) -> str:
    if value is None:
        return ""
    return f"{value:.6g}"


def _metric_lines(title: str, doc) -> list[str]:
    lines = [f"{title}:"]
    if not doc:
        lines.append("  (none)")
        return lines
    for key in ("sharpe", "calmar", "mdd", "cagr", "n_trades",
                "trades_per_day", "c_max"):
        if key in doc:
            value = doc[key]
            lines.append(f"  {key:>14}: {'-' if value is None else f'{value:.6g}'}")
    return lines


def summary_text(pack: dict) -> str:
    """Renders the whole run as a plain-text report."""
    lines = []
    verdict = pack.get("verdict") or {}
    outcome = verdict.get("outcome", "?")
    header = f"Verdict: {outcome}"
    if verdict.get("conditional"):
        header += " (conditional: open benchmark item at the holdout gate)"
    if verdict.get("failed_gate"):
        header += f" — halted at {verdict['failed_gate']}"
    lines.append(header)
    lines.append(f"Config hash: {pack.get('config_hash', '?')}")
    lines.append("")

    stage_is = pack.get("stage_is")
    if stage_is:
        lines.append(f"Gate G1 (in-sample): {stage_is.get('gate_g1')}")
        lines.append(f"  viability: {stage_is.get('viability')}"
                     f"  peak Sharpe: {_num(stage_is.get('sr_opt')) or '-'}")
        shortlist = stage_is.get("shortlist") or {}
        candidates = shortlist.get("candidates", [])
        if candidates:
            lines.append(f"  shortlist ({len(candidates)}):")
            for c in candidates:
                lines.append(f"    {_params_label(c)}")
        lines.extend("  " + l for l in
                     _metric_lines("best candidate", stage_is.get("best_metrics")))
        lines.append("")
    else:
        lines.append("Gate G1 (in-sample): not reached")

    stage_wfa = pack.get("stage_wfa")
    if stage_wfa:
        lines.append(f"Gate G2 (walk-forward): {stage_wfa.get('verdict')}"
                     f"  pass fraction: {_num(stage_wfa.get('pass_fraction'))}")
        theta = stage_wfa.get("theta_star")
        if theta:
            lines.append(f"  locked parameters: {_params_label(theta)}")
        table = fold_table_csv(pack)
        lines.append("  fold table:")
        lines.extend("    " + row for row in table.strip().splitlines())
        lines.append("")
    elif stage_is:
        lines.append("Gate G2 (walk-forward): not reached")

    stage_oos = pack.get("stage_oos")
    if stage_oos:
        lines.append(f"Gate G3 (holdout): {stage_oos.get('gate_g3')}")
        lines.append(f"  {stage_oos.get('within_band_note', '')}")
        lines.extend("  " + l for l in
                     _metric_lines("holdout metrics", stage_oos.get("m_oos")))
        lines.append("")
    elif stage_wfa:
        lines.append("Gate G3 (holdout): not reached")

    degradation = pack.get("degradation")
    if degradation:
        lines.append("Degradation diagnostics:")
        for note in degradation.get("notes", []):
            lines.append(f"  {note}")
        lines.append("")

    stress = pack.get("stress")
    if stress:
        lines.append("Stress (reporting only):")
        for key, value in sorted((stress.get("deltas") or {}).items()):
            lines.append(f"  delta {key}: {'-' if value is None else f'{value:.6g}'}")
        lines.append("")

    trace = verdict.get("trace") or ()
    if trace:
        lines.append("Decision trace:")
        for entry in trace:
            detail = {k: v for k, v in entry.items() if k not in ("seq", "event")}
            suffix = f"  {detail}" if detail else ""
            lines.append(f"  [{entry.get('seq')}] {entry.get('event')}{suffix}")
    return "\n".join(lines) + "\n"


def equity_svg(curves: dict, path: Path, *, title: str,
               ylabel: str = "equity") -> Path:
    """Plots one or more labeled curves to a byte-stable SVG file.

    Args:
        curves: label -> EquityCurve mapping; plotted in label order.
        path: Output file.
        title: Figure title.
        ylabel: Y-axis label.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_SVG_STYLE):
        fig, ax = plt.subplots()
        try:
            for label in sorted(curves):
                curve = curves[label]
                ax.plot(curve.timestamps, curve.values, label=label, linewidth=1.0)
            ax.set_title(title)
            ax.set_xlabel("time (UTC)")
            ax.set_ylabel(ylabel)
            if len(curves) > 1:
                ax.legend(loc="best")
            fig.autofmt_xdate()
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return path


def normalized_curve(curve: EquityCurve, deposit: float) -> EquityCurve:
    """Equity divided by the initial deposit."""
    if deposit <= 0.0:
        raise DataError("initial deposit must be positive for normalization")
    return EquityCurve(list(curve.timestamps), [v / deposit for v in curve.values])


def _session_curves(result) -> dict:
    """Collects the plottable sessions of a protocol run, keyed by artifact stem."""
    curves = {}
    if result.is_report is not None and result.is_report.best_session is not None:
        curves["is_equity"] = result.is_report.best_session.equity_curve
    if result.wfa_report is not None:
        for fold in result.wfa_report.folds:
            if fold.test_session is not None:
                curves[f"wfa_fold{fold.index}_equity"] = fold.test_session.equity_curve
    if result.oos_report is not None and result.oos_report.session is not None:
        curves["oos_equity"] = result.oos_report.session.equity_curve
    return curves


def emit_artifacts(result, out_dir: Path) -> list[Path]:
    """Writes the full artifact set of a protocol run under out_dir.

    Emits the canonical pack, the plain-text summary, the fold table,
    per-stage equity CSV extracts, and per-stage SVG plots. Returns the
    written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [
        write_pack(out_dir / "evidence_pack.json", result.pack),
        write_text(out_dir / "summary.txt", summary_text(result.pack)),
    ]
    if result.pack.get("stage_wfa"):
        written.append(write_text(out_dir / "fold_table.csv",
                                  fold_table_csv(result.pack)))
    curves = _session_curves(result)
    for stem, curve in sorted(curves.items()):
        written.append(write_text(out_dir / f"{stem}.csv", equity_csv(curve)))
    for stage in ("is", "oos"):
        key = f"{stage}_equity"
        if key in curves:
            written.append(equity_svg({stage: curves[key]},
                                      out_dir / f"{key}.svg",
                                      title=f"{stage.upper()} equity"))
    fold_curves = {k.removeprefix("wfa_").removesuffix("_equity"): v
                   for k, v in curves.items() if k.startswith("wfa_")}
    if fold_curves:
        written.append(equity_svg(fold_curves, out_dir / "wfa_equity.svg",
                                  title="Walk-forward test equity by fold"))
    return written


def render_pack_report(pack: dict, out_dir: Path) -> list[Path]:
    """Re-renders summary and plots from a pack plus sibling CSV extracts.

    The pack itself carries no curves; any `*_equity.csv` extract found
    in out_dir is re-plotted. Missing extracts only skip plots.
    """
    if not isinstance(pack, dict) or "verdict" not in pack:
        raise DataError("not an evidence pack: missing verdict section")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_text(out_dir / "summary.txt", summary_text(pack))]
    if pack.get("stage_wfa"):
        written.append(write_text(out_dir / "fold_table.csv", fold_table_csv(pack)))
    for stage in ("is", "oos"):
        extract = out_dir / f"{stage}_equity.csv"
        if extract.exists():
            curve = read_equity_csv(extract.read_text(encoding="utf-8"))
            written.append(equity_svg({stage: curve},
                                      out_dir / f"{stage}_equity.svg",
                                      title=f"{stage.upper()} equity"))
    fold_curves = {}
    for extract in sorted(out_dir.glob("wfa_fold*_equity.csv")):
        label = extract.stem.removeprefix("wfa_").removesuffix("_equity")
        fold_curves[label] = read_equity_csv(extract.read_text(encoding="utf-8"))
    if fold_curves:
        written.append(equity_svg(fold_curves, out_dir / "wfa_equity.svg",
                                  title="Walk-forward test equity by fold"))
    return written


def comparison_artifacts(records, out_dir: Path, *, report,
                         oos_curves: dict | None = None) -> list[Path]:
    """Writes leaderboards, the reversal report, and the optional OOS figure.

    Args:
        records: AlphaRecord list, all from passing runs.
        out_dir: Output directory.
        report: ReversalReport over the same records.
        oos_curves: Optional name -> (EquityCurve, deposit) pairs; when
            given, a normalized overlay figure is written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for objective in OBJECTIVES:
        written.append(write_text(out_dir / f"leaderboard_{objective}.csv",
                                  leaderboard_csv(records, Mandate(objective))))
    written.append(write_text(out_dir / "reversal.txt", reversal_text(report)))
    if oos_curves:
        normalized = {name: normalized_curve(curve, deposit)
                      for name, (curve, deposit) in oos_curves.items()}
        written.append(equity_svg(normalized, out_dir / "oos_curves.svg",
                                  title="Normalized holdout equity",
                                  ylabel="equity / initial deposit"))
    return written
