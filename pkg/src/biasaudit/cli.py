"""Operator entry point.

Progress and log output go to standard error; data files never go to
standard output. `run` executes or resumes a pipeline; `stats` recomputes
the corpus tables from verdict files for ad-hoc analysis.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, config_from_dict, load_config
from .domain import TaxonomyRegistry
from .errors import BiasAuditError, ConfigError
from .report import build_summary

logger = logging.getLogger("biasaudit")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biasaudit", description="Textbook bias audit pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute (or resume) a pipeline run")
    run_p.add_argument("--config", help="path to the run config YAML")
    run_p.add_argument("--preset", choices=["full", "single-pass-chunked", "single-pass-whole"])
    run_p.add_argument("--strategy", choices=["heuristic", "independent"])
    run_p.add_argument("--calibration", choices=["on", "off"])
    run_p.add_argument("--out", help="run directory")
    run_p.add_argument("--resume", metavar="STAGE", choices=list(pipeline.STAGE_ORDER),
                       help="recompute from this stage onward, reusing earlier stage files")
    run_p.add_argument("--dry-run", action="store_true",
                       help="validate config, count planned calls, estimate cost; no network")

    stats_p = sub.add_parser("stats", help="print corpus statistics from verdict files")
    stats_p.add_argument("files", nargs="+", help="verdicts.json files")
    stats_p.add_argument("--taxonomy", help="taxonomy config file (default: shipped registry)")
    return parser


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.resume and args.out:
        snapshot = Path(args.out) / "config.snapshot.json"
        if not snapshot.exists():
            raise ConfigError(f"no --config given and no snapshot at {snapshot}")
        data = json.loads(snapshot.read_text(encoding="utf-8"))
        cfg = config_from_dict(data["config"], base_dir=str(Path(args.out).resolve()))
    else:
        raise ConfigError("--config is required (or --resume with an existing run directory)")

    overrides = dict(cfg.raw)
    if args.preset:
        overrides["preset"] = args.preset
    if args.strategy:
        overrides.setdefault("aggregation", {})
        overrides["aggregation"] = dict(overrides.get("aggregation") or {})
        overrides["aggregation"]["strategy"] = args.strategy
    if args.calibration:
        overrides["calibration"] = args.calibration == "on"
    if args.preset or args.strategy or args.calibration:
        base_dir = str(Path(args.config).resolve().parent) if args.config else str(Path(args.out).resolve())
        cfg = config_from_dict(overrides, base_dir=base_dir)
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_run_config(args)
    result = pipeline.run(cfg, out_dir=args.out, resume_from=args.resume, dry_run=args.dry_run)
    if args.dry_run:
        print(json.dumps(result.plan, indent=2, sort_keys=True))
        return 0
    logger.info("run complete: %s", result.out_dir)
    print(str(result.out_dir))
    return 0


def _cmd_stats(args) -> int:
    registry = (
        TaxonomyRegistry.from_file(args.taxonomy) if args.taxonomy else TaxonomyRegistry.default()
    )
    records, verdicts = [], []
    for path in args.files:
        file_records, file_verdicts = pipeline.load_verdict_file(path, registry)
        records.extend(file_records)
        verdicts.extend(file_verdicts)
    summary = build_summary(records, verdicts)

    sev = summary["severity"]
    print(f"Excerpts: {summary['n_excerpts']}")
    if summary["n_excerpts"] == 0:
        return 0
    print(f"Mean severity: {sev['mean']}  (share at <=3: {sev['share_at_most_3']}%)")
    print("Severity  Count  %")
    for i, (count, pct) in enumerate(zip(sev["counts"], sev["percentages"]), start=1):
        print(f"{i:>8}  {count:>5}  {pct}")
    agreement = summary["agreement"]
    print(
        f"Full juries: {agreement['full_jury_count']}/{agreement['n_excerpts']} "
        f"({agreement['full_jury_rate']}%)  mean range: {agreement['mean_range']}  "
        f"escalated: {agreement['escalation_count']} ({agreement['escalation_rate']}%)"
    )
    print("Category  Count  Mean severity")
    for row in summary["categories"]:
        print(f"{row['label']}  {row['count']}  {row['mean']}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
    )
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_stats(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BiasAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
