"""Command-line entry point.

Wires config and data files into the staged pipeline and writes every
artifact under one output directory. Exit codes encode the verdict:
0 deploy or plain success, 2 reject, 3 refactor, 1 operational error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .canonical import canonical_json, parse_timestamp
from .compare import AlphaRecord, rank_reversal_report, reversal_text
from .engine import GUARDS, StressSpec, ablation_run
from .errors import AlphaGateError, ConfigError, DataError
from .marketdata import (
    MarketSeries,
    SyntheticConfig,
    build_fold_schedule,
    generate_synthetic,
    load_csv,
    partition,
    save_csv,
)
from .protocol import ProtocolConfig, run_oos, run_protocol, run_stress
from .report import (
    comparison_artifacts,
    emit_artifacts,
    equity_csv,
    equity_svg,
    fold_table_csv,
    read_equity_csv,
    render_pack_report,
    write_text,
)
from .stage_is import Shortlist, run_stage_is
from .stage_wfa import WfaLock, run_stage_wfa
from .strategy import Strategy, build_strategy

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECT = 2
EXIT_REFACTOR = 3

_VERDICT_EXIT = {"Deploy": EXIT_OK, "Reject": EXIT_REJECT, "Refactor": EXIT_REFACTOR}


class _Parser(argparse.ArgumentParser):
    """Argument errors are operational errors, not verdicts."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alphagate",
                     description="Staged strategy validation pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    commands = {
        "gen-data": "generate a synthetic bar series CSV",
        "run-is": "in-sample stage: map the grid and lock a shortlist",
        "run-wfa": "walk-forward stage: fold gates and parameter lock",
        "run-oos": "holdout stage: single locked run (needs the WFA lock)",
        "run-protocol": "all three stages plus evidence pack",
        "stress": "re-run the locked holdout under a stress envelope",
        "ablate": "guard on/off metric deltas on the locked holdout",
        "compare": "rank evidence packs of passing runs",
        "report": "re-render summary and plots from an evidence pack",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="config JSON path")
        p.add_argument("--data", action="append", default=[],
                       help="input path (repeatable for compare)")
        p.add_argument("--out", help="output directory "
                       "(falls back to ALPHAGATE_OUT)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for the grid sweep")
        p.add_argument("--stress", help="stress spec JSON path")
    return parser


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ALPHAGATE_OUT")
    if not out:
        raise ConfigError("no output directory: pass --out or set ALPHAGATE_OUT")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _load_config(args) -> ProtocolConfig:
    if not args.config:
        raise ConfigError("missing --config")
    config = ProtocolConfig.from_doc(_read_json(args.config))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.stress:
        config = replace(config,
                         stress_spec=StressSpec.from_doc(_read_json(args.stress)))
    return config


def _single_data(args) -> Path:
    if len(args.data) != 1:
        raise ConfigError("expected exactly one --data path")
    return Path(args.data[0])


def load_series(path) -> MarketSeries:
    """Loads a bar CSV, inferring symbol and bar period from the file."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            first = parse_timestamp(next(reader)[0])
            second = parse_timestamp(next(reader)[0])
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except StopIteration:
        raise DataError(f"{path}: need at least two bars") from None
    return load_csv(path, symbol=path.stem, bar_period=second - first)


def _strategy_from_spec(spec: dict) -> Strategy:
    options = dict(spec)
    name = options.pop("name", None)
    if not name:
        raise ConfigError("strategy spec needs a name")
    return build_strategy(name, **options)


def _write_doc(path: Path, doc: dict) -> None:
    write_text(path, canonical_json(doc) + "\n")


def _emit_session_extract(out_dir: Path, stem: str, session, title: str) -> None:
    if session is None:
        return
    write_text(out_dir / f"{stem}.csv", equity_csv(session.equity_curve))
    equity_svg({stem.split("_")[0]: session.equity_curve},
               out_dir / f"{stem}.svg", title=title)


def _load_wfa_lock(out_dir: Path, config: ProtocolConfig):
    """Reads and integrity-checks the walk-forward lock file."""
    path = out_dir / "wfa_lock.json"
    if not path.exists():
        raise ConfigError(
            f"no walk-forward lock found at {path}; run run-wfa first")
    doc = _read_json(path)
    lock = WfaLock.from_doc(doc["lock"])
    if lock.lock_hash() != doc.get("lock_hash"):
        raise ConfigError("walk-forward lock hash mismatch: file was modified")
    if doc.get("config_hash") != config.config_hash():
        raise ConfigError("config changed since the parameters were locked")
    return lock, doc["lock_hash"]


def cmd_gen_data(args) -> int:
    if not args.config:
        raise ConfigError("missing --config")
    out_dir = _out_dir(args)
    config = SyntheticConfig.from_doc(_read_json(args.config))
    series = generate_synthetic(config, seed=args.seed or 0)
    path = out_dir / f"{config.symbol}.csv"
    save_csv(series, path)
    print(f"wrote {len(series.bars)} bars to {path}")
    return EXIT_OK


def cmd_run_is(args) -> int:
    config = _load_config(args)
    out_dir = _out_dir(args)
    series = load_series(_single_data(args))
    segment = partition(series, config.split)["is"]
    strategy = _strategy_from_spec(config.strategy_spec)
    report = run_stage_is(segment, strategy, config.grid, config.exec_cfg,
                          config.constraints, config.is_config,
                          config.benchmark, jobs=args.jobs)
    _write_doc(out_dir / "is_report.json", report.to_doc())
    if report.gate_g1 == "pass" and report.shortlist is not None:
        _write_doc(out_dir / "is_lock.json", {
            "shortlist": report.shortlist.to_doc(),
            "shortlist_hash": report.shortlist.lock_hash(),
            "config_hash": config.config_hash(),
        })
    _emit_session_extract(out_dir, "is_equity", report.best_session,
                          "IS equity")
    print(f"gate G1: {report.gate_g1}")
    return EXIT_OK if report.gate_g1 == "pass" else EXIT_REFACTOR


def cmd_run_wfa(args) -> int:
    config = _load_config(args)
    out_dir = _out_dir(args)
    series = load_series(_single_data(args))
    segments = partition(series, config.split)
    lock_path = out_dir / "is_lock.json"
    if not lock_path.exists():
        raise ConfigError(
            f"no shortlist lock found at {lock_path}; run run-is first")
    lock_doc = _read_json(lock_path)
    shortlist = Shortlist.from_doc(lock_doc["shortlist"])
    if shortlist.lock_hash() != lock_doc.get("shortlist_hash"):
        raise ConfigError("shortlist lock hash mismatch: file was modified")
    if lock_doc.get("config_hash") != config.config_hash():
        raise ConfigError("config changed since the shortlist was locked")
    strategy = _strategy_from_spec(config.strategy_spec)
    schedule = build_fold_schedule(segments["wfa"], config.wfa_folds,
                                   config.purge_days)
    report = run_stage_wfa(segments["wfa"], schedule, shortlist, strategy,
                           config.exec_cfg, config.constraints,
                           config.wfa_config())
    doc = report.to_doc()
    _write_doc(out_dir / "wfa_report.json", doc)
    write_text(out_dir / "fold_table.csv", fold_table_csv({"stage_wfa": doc}))
    if report.lock_record is not None:
        _write_doc(out_dir / "wfa_lock.json", {
            "lock": report.lock_record.to_doc(),
            "lock_hash": report.lock_record.lock_hash(),
            "config_hash": config.config_hash(),
        })
    print(f"gate G2: {report.verdict} (pass fraction {report.pass_fraction:.3f})")
    return EXIT_OK if report.verdict == "PASS" else EXIT_REJECT


def cmd_run_oos(args) -> int:
    config = _load_config(args)
    out_dir = _out_dir(args)
    series = load_series(_single_data(args))
    segment = partition(series, config.split)["oos"]
    lock, stored_hash = _load_wfa_lock(out_dir, config)
    strategy = _strategy_from_spec(config.strategy_spec)
    report = run_oos(segment, lock.theta_star, strategy, config.exec_cfg,
                     config.constraints, config.benchmark, lock,
                     expected_hash=stored_hash)
    _write_doc(out_dir / "oos_report.json", report.to_doc())
    _emit_session_extract(out_dir, "oos_equity", report.session, "OOS equity")
    print(f"gate G3: {report.gate_g3} ({report.within_band_note})")
    return EXIT_REJECT if report.gate_g3 == "fail" else EXIT_OK


def cmd_run_protocol(args) -> int:
    config = _load_config(args)
    out_dir = _out_dir(args)
    series = load_series(_single_data(args))
    strategy = _strategy_from_spec(config.strategy_spec)
    result = run_protocol(series, strategy, config, jobs=args.jobs)
    emit_artifacts(result, out_dir)
    verdict = result.verdict
    suffix = " (conditional)" if verdict.conditional else ""
    print(f"verdict: {verdict.outcome}{suffix}")
    if verdict.failed_gate:
        print(f"failed gate: {verdict.failed_gate}")
    print(f"artifacts: {out_dir}")
    return _VERDICT_EXIT[verdict.outcome]


def cmd_stress(args) -> int:
    config = _load_config(args)
    out_dir = _out_dir(args)
    if config.stress_spec is None:
        raise ConfigError("no stress spec: pass --stress or set it in the config")
    series = load_series(_single_data(args))
    segment = partition(series, config.split)["oos"]
    lock, stored_hash = _load_wfa_lock(out_dir, config)
    strategy = _strategy_from_spec(config.strategy_spec)
    baseline = run_oos(segment, lock.theta_star, strategy, config.exec_cfg,
                       config.constraints, config.benchmark, lock,
                       expected_hash=stored_hash)
    stress_report = run_stress(segment, lock.theta_star, strategy,
                               config.exec_cfg, config.constraints,
                               config.stress_spec, baseline.m_oos)
    _write_doc(out_dir / "stress.json", stress_report.to_doc())
    print(f"stress deltas: {stress_report.to_doc()['deltas']}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    out_dir = _out_dir(args)
    series = load_series(_single_data(args))
    segment = partition(series, config.split)["oos"]
    lock, _ = _load_wfa_lock(out_dir, config)
    strategy = _strategy_from_spec(config.strategy_spec)
    docs = [
        ablation_run(segment, strategy, lock.theta_star, config.exec_cfg,
                     config.constraints, guard).to_doc()
        for guard in GUARDS
    ]
    _write_doc(out_dir / "ablation.json", {"ablation": docs})
    print(f"ablated {len(docs)} guards")
    return EXIT_OK


def _pack_name(path: Path) -> str:
    if path.stem == "evidence_pack" and path.parent.name:
        return path.parent.name
    return path.stem


def cmd_compare(args) -> int:
    if not args.data:
        raise ConfigError("compare needs at least one --data evidence pack")
    out_dir = _out_dir(args)
    records = []
    curves = {}
    for raw in args.data:
        path = Path(raw)
        pack = _read_json(path)
        name = _pack_name(path)
        records.append(AlphaRecord.from_pack(pack, name))
        extract = path.parent / "oos_equity.csv"
        if extract.exists():
            deposit = (pack.get("config", {}).get("execution", {})
                       .get("initial_deposit"))
            if deposit:
                curves[name] = (
                    read_equity_csv(extract.read_text(encoding="utf-8")),
                    float(deposit),
                )
    report = rank_reversal_report(records)
    comparison_artifacts(records, out_dir, report=report,
                         oos_curves=curves or None)
    print(reversal_text(report), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = _out_dir(args)
    pack = _read_json(_single_data(args))
    written = render_pack_report(pack, out_dir)
    print(f"rendered {len(written)} files under {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "run-is": cmd_run_is,
    "run-wfa": cmd_run_wfa,
    "run-oos": cmd_run_oos,
    "run-protocol": cmd_run_protocol,
    "stress": cmd_stress,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except AlphaGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
