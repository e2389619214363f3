"""Batch command-line entry point.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure,
3 ledger verification failure. Every error line starts with ``error:``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .data import gen_synthetic, write_csv
from .ledger import verify_file
from .metrics import METRIC_NAMES, render_improvement_table, render_results_table
from .orchestrator import (derive_seed, result_filename, run_centralized, run_federated,
                           run_sweep)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_LEDGER = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedledger", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment(name: str, help: str):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. model.hidden_units=256 (repeatable)")
        p.add_argument("--seed", type=int, help="experiment seed")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    experiment("run", "federated training + evaluation")
    experiment("baseline", "centralized training + evaluation")
    experiment("sweep", "hidden units x strategies sweep with improvement tables")
    experiment("gen-data", "write the configured synthetic dataset as CSV")
    verify = sub.add_parser("verify-ledger", help="check a JSON Lines ledger")
    verify.add_argument("ledger", type=Path)
    render = sub.add_parser("render-table", help="render a result JSON as text tables")
    render.add_argument("results", type=Path)
    render.add_argument("--out", type=Path, default=Path("."))
    return parser


def _write_text(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def cmd_run(config: ExperimentConfig, out: Path) -> int:
    result = run_federated(config, out)
    path = out / result_filename(config, "federated")
    result.write(path)
    print(f"{result.label} mean macro: " + ", ".join(f"{m}={result.mean[m]:.4f}" for m in METRIC_NAMES))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_baseline(config: ExperimentConfig, out: Path) -> int:
    result = run_centralized(config)
    path = out / result_filename(config, "centralized")
    result.write(path)
    print("Centralized mean macro: " + ", ".join(f"{m}={result.mean[m]:.4f}" for m in METRIC_NAMES))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(config: ExperimentConfig, out: Path) -> int:
    sweep = run_sweep(config, out_dir=out)
    path = out / f"sweep_{config.dataset.name}_s{config.experiment_seed}.json"
    sweep.write(path)
    text = render_sweep_text(sweep.to_dict())
    _write_text(path.with_suffix(".txt"), text)
    print(text)
    failed = [c for c in sweep.cells if c.error]
    for cell in failed:
        print(f"error: cell hidden={cell.hidden_units} strategy={cell.strategy}: {cell.error}",
              file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gen_data(config: ExperimentConfig, out: Path) -> int:
    spec = config.dataset
    record = gen_synthetic(spec.num_classes, spec.samples_per_class, spec.sample_rate_hz,
                           derive_seed(config.experiment_seed, "data"), spec.noise_std)
    path = out / f"synthetic_k{spec.num_classes}_r{spec.sample_rate_hz}_s{config.experiment_seed}.csv"
    write_csv(record, path)
    print(f"wrote {path} ({len(record)} samples)")
    return EXIT_OK


def render_sweep_text(obj: dict) -> str:
    parts = [render_results_table(obj["rows"], obj["strategies"])]
    if obj.get("mean_improvement"):
        parts.append("Mean improvement over centralized (percentage points)")
        parts.append(render_improvement_table(obj["mean_improvement"]))
    if obj.get("mean_relative_improvement"):
        parts.append("Mean relative improvement over centralized (% of baseline)")
        parts.append(render_improvement_table(obj["mean_relative_improvement"]))
    return "\n\n".join(parts)


def render_result_text(obj: dict) -> str:
    """Text tables for a single experiment result or a sweep result."""
    if obj.get("mode") == "sweep":
        return render_sweep_text(obj)
    if obj.get("mode") not in ("federated", "centralized"):
        raise ValueError("results JSON has no recognised 'mode'")
    row = {"dataset": obj["dataset"], "hidden_units": obj["hidden_units"],
           "centralized": None, "federated": {}}
    strategies = []
    if obj["mode"] == "centralized":
        row["centralized"] = obj["mean"]
    else:
        row["federated"][obj["label"]] = obj["mean"]
        strategies.append(obj["label"])
    return render_results_table([row], strategies)


def cmd_render(path: Path, out: Path) -> int:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read results {path}: {exc}") from None
    try:
        text = render_result_text(obj)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a results file ({exc})") from None
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / f"table_{path.stem}.txt", text)
    print(text)
    return EXIT_OK


def cmd_verify(path: Path) -> int:
    try:
        report = verify_file(path)
    except OSError as exc:
        print(f"error: cannot read ledger {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_RUNTIME
    if report.valid:
        print(report)
        return EXIT_OK
    print(f"error: {path}: {report}", file=sys.stderr)
    print(f"first bad index: {report.first_bad_index}")
    return EXIT_LEDGER


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    if args.command == "verify-ledger":
        return cmd_verify(args.ledger)
    try:
        if args.command == "render-table":
            return cmd_render(args.results, args.out)
        config = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "baseline": cmd_baseline, "sweep": cmd_sweep, "gen-data": cmd_gen_data}
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return handlers[args.command](config, args.out)
    except Exception as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
