"""End-to-end orchestration: screen -> adjudicate -> synthesize -> report.

Each stage writes its result file before the next begins; the stage files
are the only inter-stage channel, so any stage can be recomputed from the
files alone (`resume`). Individual batch or juror failures are recorded in
the stage files, never fatal; the run aborts only on configuration errors,
missing inputs, or a stage whose backends are entirely unreachable.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from string import Template
from typing import Any, Mapping, Sequence

from .backends import BackendHandle, CostEntry, CostLedger, ImagePart, Stage, TextPart
from .config import RunConfig, build_handles
from .domain import (
    FinalVerdict,
    JurorVerdict,
    Strategy,
    TaxonomyRegistry,
    severity_scale_text,
    validate_juror_verdict,
)
from .errors import (
    BackendError,
    ConfigError,
    FatalBackendError,
    MissingStageFile,
    NoStructuredBlock,
    SchemaVersionMismatch,
    VerdictValidationError,
)
from .jury import CALIBRATION_PLACEHOLDER, JuryRecord, run_jury
from .meta import run_meta
from .report import build_summary, render_report
from .screening import (
    BatchScreenResult,
    DocumentManifest,
    DocumentScreening,
    FlaggedExcerpt,
    PageBatch,
    check_excerpt_record,
    load_manifest,
    make_batches,
    parse_screening_output,
    run_screening,
)

logger = logging.getLogger(__name__)

STAGE_ORDER = ("screening", "jury", "meta", "report")
STAGE_FILE_VERSION = 1

_FILES = {
    "config": "config.snapshot.json",
    "screening": "screening.json",
    "jury": "jury.json",
    "verdicts": "verdicts.json",
    "ledger": "ledger.json",
    "summary": "summary.json",
    "report": "report.html",
}

# cost-ledger stages that stay valid when resuming from a given stage
_KEEP_COST_STAGES = {
    "screening": set(),
    "jury": {Stage.SCREENING},
    "meta": {Stage.SCREENING, Stage.JURY},
    "report": {Stage.SCREENING, Stage.JURY, Stage.META},
}


@dataclass
class RunResult:
    out_dir: Path
    handles: dict[str, BackendHandle]
    ledger: CostLedger
    records: list[JuryRecord] = field(default_factory=list)
    verdicts: list[FinalVerdict] = field(default_factory=list)
    plan: dict | None = None


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(
        json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _load_stage_file(path: Path) -> dict:
    if not path.exists():
        raise MissingStageFile(str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise SchemaVersionMismatch(f"{path}: unreadable stage file ({exc})") from exc
    if not isinstance(data, Mapping) or data.get("schema_version") != STAGE_FILE_VERSION:
        raise SchemaVersionMismatch(f"{path}: expected schema_version {STAGE_FILE_VERSION}")
    return dict(data)


# --- stage (de)serialization ---

def _screening_to_dict(docs: Sequence[DocumentScreening]) -> dict:
    return {
        "schema_version": STAGE_FILE_VERSION,
        "documents": [
            {
                "document_id": doc.document_id,
                "page_count": doc.page_count,
                "batch_size": doc.batch_size,
                "batches": [
                    {
                        "index": b.batch.index,
                        "start_page": b.batch.start_page,
                        "end_page": b.batch.end_page,
                        "image_refs": list(b.batch.image_refs),
                        "status": b.status,
                        "attempts": b.attempts,
                        "error": b.error,
                        "raw_texts": list(b.raw_texts),
                        "rejected": list(b.rejected),
                        "excerpts": [e.to_dict() for e in b.excerpts],
                    }
                    for b in doc.batches
                ],
            }
            for doc in docs
        ],
    }


def _screening_from_dict(data: Mapping[str, Any]) -> list[DocumentScreening]:
    docs = []
    for doc in data["documents"]:
        batches = []
        for b in doc["batches"]:
            batch = PageBatch(
                document_id=doc["document_id"],
                index=int(b["index"]),
                start_page=int(b["start_page"]),
                end_page=int(b["end_page"]),
                image_refs=tuple(b["image_refs"]),
            )
            batches.append(
                BatchScreenResult(
                    batch=batch,
                    status=b["status"],
                    excerpts=[FlaggedExcerpt.from_dict(e) for e in b["excerpts"]],
                    rejected=list(b.get("rejected", [])),
                    raw_texts=list(b.get("raw_texts", [])),
                    attempts=int(b.get("attempts", 0)),
                    error=b.get("error"),
                )
            )
        docs.append(
            DocumentScreening(
                document_id=doc["document_id"],
                page_count=int(doc["page_count"]),
                batch_size=int(doc["batch_size"]),
                batches=batches,
            )
        )
    return docs


def _jury_to_dict(records: Sequence[JuryRecord], jurors: Sequence[str]) -> dict:
    return {
        "schema_version": STAGE_FILE_VERSION,
        "jurors": list(jurors),
        "records": [r.to_dict() for r in records],
    }


def _jury_from_dict(
    data: Mapping[str, Any],
    excerpts: Mapping[str, FlaggedExcerpt],
    registry: TaxonomyRegistry,
) -> list[JuryRecord]:
    records = []
    for raw in data["records"]:
        excerpt = excerpts.get(raw["excerpt_id"])
        if excerpt is None:
            raise SchemaVersionMismatch(
                f"jury record references unknown excerpt {raw['excerpt_id']!r}"
            )
        records.append(JuryRecord.from_dict(raw, excerpt, registry))
    return records


def _verdicts_to_dict(
    records: Sequence[JuryRecord],
    verdicts: Sequence[FinalVerdict],
    strategy: Strategy,
) -> dict:
    by_id = {r.excerpt.excerpt_id: r for r in records}
    entries = []
    for verdict in verdicts:
        record = by_id[verdict.excerpt_id]
        lean = record.to_dict()
        lean.pop("raw_texts", None)
        entries.append(
            {"excerpt": record.excerpt.to_dict(), "jury": lean, "verdict": verdict.to_dict()}
        )
    return {
        "schema_version": STAGE_FILE_VERSION,
        "strategy": strategy.value,
        "entries": entries,
    }


def _verdicts_from_dict(
    data: Mapping[str, Any], registry: TaxonomyRegistry
) -> tuple[list[JuryRecord], list[FinalVerdict]]:
    records, verdicts = [], []
    for entry in data["entries"]:
        excerpt = FlaggedExcerpt.from_dict(entry["excerpt"])
        records.append(JuryRecord.from_dict(entry["jury"], excerpt, registry))
        verdicts.append(FinalVerdict.from_dict(entry["verdict"], registry))
    return records, verdicts


def load_verdict_file(path: str | Path, registry: TaxonomyRegistry):
    """Load one verdicts stage file; used by `stats` and resume."""
    data = _load_stage_file(Path(path))
    return _verdicts_from_dict(data, registry)


# --- single-pass presets ---

_SINGLE_PASS_VERDICT_KEYS = ("attribution", "category", "severity", "confidence", "reasoning")


def _single_pass_batches(manifest: DocumentManifest, preset: str, batch_size: int) -> list[PageBatch]:
    if preset == "single-pass-whole":
        if manifest.page_count == 0:
            return []
        return [
            PageBatch(
                document_id=manifest.document_id,
                index=1,
                start_page=1,
                end_page=manifest.page_count,
                image_refs=manifest.image_paths,
            )
        ]
    ranges = make_batches(manifest.page_count, batch_size)
    return [
        PageBatch(
            document_id=manifest.document_id,
            index=i + 1,
            start_page=start,
            end_page=end,
            image_refs=manifest.image_paths[start - 1 : end],
        )
        for i, (start, end) in enumerate(ranges)
    ]


def _run_single_pass(
    cfg: RunConfig,
    handles: Mapping[str, BackendHandle],
    registry: TaxonomyRegistry,
    ledger: CostLedger | None,
) -> tuple[list[DocumentScreening], list[JuryRecord], list[FinalVerdict]]:
    """Screening and judging collapsed into one call per batch (chunked) or
    per document (whole)."""
    handle = handles[cfg.single_pass_backend]
    template = cfg.prompt("single_pass")
    corrective = (
        "Your previous reply could not be parsed: {reason}. "
        "Respond again with only the required JSON payload."
    )
    screenings: list[DocumentScreening] = []
    records: list[JuryRecord] = []
    verdicts: list[FinalVerdict] = []

    for manifest_path in cfg.manifests:
        manifest = load_manifest(manifest_path)
        batches = _single_pass_batches(manifest, cfg.preset, cfg.batch_size)
        doc = DocumentScreening(
            document_id=manifest.document_id,
            page_count=manifest.page_count,
            batch_size=cfg.batch_size if cfg.preset == "single-pass-chunked" else manifest.page_count,
            batches=[],
        )
        for batch in batches:
            base = Template(template).safe_substitute(
                page_range=batch.page_range,
                severity_scale=severity_scale_text(),
                taxonomy_labels="\n".join(f"- {label}" for label in registry.labels()),
            )
            result = BatchScreenResult(batch=batch, status="failed")
            last_reason = None
            for attempt in range(1, cfg.max_schema_attempts + 1):
                result.attempts = attempt
                text = base if last_reason is None else base + "\n\n" + corrective.format(reason=last_reason)
                parts = [TextPart(text)] + [ImagePart(p) for p in batch.image_refs]
                try:
                    response = handle.ask("", parts)
                except BackendError as exc:
                    result.error = f"backend: {exc}"
                    break
                if ledger is not None:
                    ledger.record(handle.backend_id, Stage.SCREENING, response)
                result.raw_texts.append(response.text)
                try:
                    raw_records = parse_screening_output(response.text)
                except NoStructuredBlock as exc:
                    last_reason = str(exc)
                    if attempt == cfg.max_schema_attempts:
                        result.error = f"parse failure after {attempt} attempts: {last_reason}"
                    continue
                result.status = "ok"
                result.error = None
                for raw in raw_records:
                    normalized, reason = check_excerpt_record(raw, batch)
                    verdict_fields = {k: raw.get(k) for k in _SINGLE_PASS_VERDICT_KEYS if isinstance(raw, Mapping)}
                    parsed: JurorVerdict | None = None
                    if normalized is not None:
                        try:
                            parsed = validate_juror_verdict(
                                verdict_fields, registry, juror_id=handle.backend_id
                            )
                        except VerdictValidationError as exc:
                            reason = f"verdict fields invalid: {exc}"
                    if normalized is None or parsed is None:
                        result.rejected.append({"record": raw if isinstance(raw, (dict, list)) else repr(raw), "reason": reason})
                        continue
                    ordinal = len(result.excerpts) + 1
                    excerpt = FlaggedExcerpt(
                        excerpt_id=f"{batch.document_id}-b{batch.index}-e{ordinal}",
                        document_id=batch.document_id,
                        batch_index=batch.index,
                        page=normalized["page"],
                        quote=normalized["quote"],
                        attribution=normalized["attribution"],
                        screening_reasoning=normalized["reasoning"],
                    )
                    result.excerpts.append(excerpt)
                    record = JuryRecord(
                        excerpt=excerpt,
                        jurors_configured=1,
                        verdicts=[parsed],
                        attempts={handle.backend_id: attempt},
                    )
                    records.append(record)
                    verdicts.append(
                        FinalVerdict(
                            excerpt_id=excerpt.excerpt_id,
                            severity=parsed.severity,
                            category=parsed.category,
                            justification=parsed.reasoning,
                            human_review=False,
                            strategy=Strategy.SINGLE_PASS,
                            juror_count_valid=1,
                            trace={"preset": cfg.preset},
                        )
                    )
                break
            doc.batches.append(result)
        screenings.append(doc)
    return screenings, records, verdicts


# --- dry run ---

def plan_run(cfg: RunConfig) -> dict:
    """Validate inputs and count planned backend calls plus a rough cost
    ceiling, without touching the network."""
    prices = cfg.price_table()
    documents = []
    screening_calls = 0
    est_excerpts = 0
    for manifest_path in cfg.manifests:
        manifest = load_manifest(manifest_path)
        if cfg.preset == "single-pass-whole":
            n_batches = 1 if manifest.page_count else 0
        else:
            n_batches = len(make_batches(manifest.page_count, cfg.batch_size))
        documents.append(
            {"document_id": manifest.document_id, "pages": manifest.page_count, "batches": n_batches}
        )
        screening_calls += n_batches
        est_excerpts += n_batches * cfg.dry_run_excerpts_per_batch

    single_pass = cfg.preset.startswith("single-pass")
    jury_calls = 0 if single_pass else est_excerpts * len(cfg.jurors)
    needs_meta = not single_pass and (
        cfg.aggregation.strategy is Strategy.INDEPENDENT_DELIBERATION
        or cfg.aggregation.prompted_heuristic
    )
    meta_calls = est_excerpts if needs_meta else 0

    def call_cost(backend_id: str, calls: int) -> Decimal | None:
        if calls == 0:
            return Decimal(0)
        spec = cfg.backends[backend_id]
        try:
            # assume ~2000 prompt tokens and a full output budget per call
            return prices.cost(backend_id, 2000, spec.max_output_tokens) * calls
        except Exception:
            return None

    costs: list[Decimal | None] = []
    if single_pass:
        costs.append(call_cost(cfg.single_pass_backend, screening_calls))
    else:
        costs.append(call_cost(cfg.screening_backend, screening_calls))
        for juror in cfg.jurors:
            costs.append(call_cost(juror, est_excerpts))
        if needs_meta:
            costs.append(call_cost(cfg.meta_backend, meta_calls))
    estimated = None if any(c is None for c in costs) else str(sum(costs, Decimal(0)))

    return {
        "preset": cfg.preset,
        "documents": documents,
        "planned_calls": {
            "screening": screening_calls,
            "jury": jury_calls,
            "meta": meta_calls,
        },
        "assumed_excerpts_per_batch": cfg.dry_run_excerpts_per_batch,
        "estimated_cost_ceiling_usd": estimated,
    }


# --- main entry points ---

def _validate_templates(cfg: RunConfig) -> None:
    if cfg.preset.startswith("single-pass"):
        return
    if cfg.calibration and CALIBRATION_PLACEHOLDER not in cfg.prompt("jury"):
        raise ConfigError(
            "jury template lacks the ${calibration_instruction} placeholder "
            "but calibration is enabled"
        )


def run(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    resume_from: str | None = None,
    dry_run: bool = False,
) -> RunResult:
    """Execute the pipeline (or a tail of it) into `out_dir`.

    `resume_from` names the first stage to recompute; earlier stages are
    loaded from their files. Exit status reflects hard failures only.
    """
    if resume_from is not None and resume_from not in STAGE_ORDER:
        raise ConfigError(f"unknown stage {resume_from!r}; choose from {STAGE_ORDER}")
    target = Path(out_dir or cfg.output_dir or ".")
    registry = cfg.registry()
    _validate_templates(cfg)

    if dry_run:
        plan = plan_run(cfg)
        return RunResult(target, {}, CostLedger(cfg.price_table()), plan=plan)

    handles = build_handles(cfg)
    start = STAGE_ORDER.index(resume_from) if resume_from else 0

    ledger = CostLedger(cfg.price_table())
    if resume_from:
        ledger_path = target / _FILES["ledger"]
        if ledger_path.exists():
            data = _load_stage_file(ledger_path)
            entries = [CostEntry.from_dict(e) for e in data.get("entries", [])]
            kept = _KEEP_COST_STAGES[resume_from]
            ledger = CostLedger(cfg.price_table(), [e for e in entries if e.stage in kept])

    target.mkdir(parents=True, exist_ok=True)
    _write_json(target / _FILES["config"], {"schema_version": STAGE_FILE_VERSION, "config": cfg.snapshot()})

    def write_ledger():
        _write_json(target / _FILES["ledger"], {"schema_version": STAGE_FILE_VERSION, **ledger.to_dict()})

    single_pass = cfg.preset.startswith("single-pass")
    if single_pass:
        if resume_from not in (None, "report"):
            raise ConfigError("single-pass presets support resume only from 'report'")
        if resume_from is None:
            screenings, records, verdicts = _run_single_pass(cfg, handles, registry, ledger)
            _write_json(target / _FILES["screening"], _screening_to_dict(screenings))
            _write_json(
                target / _FILES["jury"],
                _jury_to_dict(records, [cfg.single_pass_backend]),
            )
            _write_json(
                target / _FILES["verdicts"],
                _verdicts_to_dict(records, verdicts, Strategy.SINGLE_PASS),
            )
            write_ledger()
        else:
            records, verdicts = _verdicts_from_dict(
                _load_stage_file(target / _FILES["verdicts"]), registry
            )
        _write_reports(cfg, target, records, verdicts, ledger)
        return RunResult(target, handles, ledger, records, verdicts)

    # stage 1: screening
    if start <= STAGE_ORDER.index("screening"):
        manifests = [load_manifest(p) for p in cfg.manifests]
        screenings = run_screening(
            manifests,
            handles[cfg.screening_backend],
            cfg.prompt("screening"),
            batch_size=cfg.batch_size,
            max_attempts=cfg.max_schema_attempts,
            max_workers=cfg.max_workers,
            ledger=ledger,
        )
        all_batches = [b for doc in screenings for b in doc.batches]
        if all_batches and all(
            b.status == "failed" and (b.error or "").startswith("backend:") for b in all_batches
        ):
            raise FatalBackendError("screening backend unreachable for every batch")
        _write_json(target / _FILES["screening"], _screening_to_dict(screenings))
        write_ledger()
    else:
        screenings = _screening_from_dict(_load_stage_file(target / _FILES["screening"]))

    excerpts = [e for doc in screenings for e in doc.excerpts]
    excerpts_by_id = {e.excerpt_id: e for e in excerpts}

    # stage 2: jury
    if start <= STAGE_ORDER.index("jury"):
        records = run_jury(
            excerpts,
            [handles[j] for j in cfg.jurors],
            cfg.prompt("jury"),
            registry,
            calibration=cfg.calibration,
            max_attempts=cfg.max_schema_attempts,
            max_workers=cfg.max_workers,
            ledger=ledger,
        )
        _write_json(target / _FILES["jury"], _jury_to_dict(records, cfg.jurors))
        write_ledger()
    else:
        records = _jury_from_dict(
            _load_stage_file(target / _FILES["jury"]), excerpts_by_id, registry
        )

    # stage 3: meta synthesis
    if start <= STAGE_ORDER.index("meta"):
        needs_meta = (
            cfg.aggregation.strategy is Strategy.INDEPENDENT_DELIBERATION
            or cfg.aggregation.prompted_heuristic
        )
        template_name = "meta_heuristic" if cfg.aggregation.prompted_heuristic else "meta"
        verdicts = run_meta(
            records,
            cfg.aggregation,
            meta_handle=handles.get(cfg.meta_backend) if needs_meta else None,
            template_text=cfg.prompt(template_name) if needs_meta else None,
            registry=registry,
            max_attempts=cfg.max_schema_attempts,
            max_workers=cfg.max_workers,
            ledger=ledger,
        )
        usable = [r for r in records if r.verdicts]
        _write_json(
            target / _FILES["verdicts"],
            _verdicts_to_dict(usable, verdicts, cfg.aggregation.strategy),
        )
        write_ledger()
    else:
        _, verdicts = _verdicts_from_dict(_load_stage_file(target / _FILES["verdicts"]), registry)

    usable_records = [r for r in records if r.verdicts]
    _write_reports(cfg, target, usable_records, verdicts, ledger)
    return RunResult(target, handles, ledger, usable_records, verdicts)


def _write_reports(
    cfg: RunConfig,
    target: Path,
    records: Sequence[JuryRecord],
    verdicts: Sequence[FinalVerdict],
    ledger: CostLedger,
) -> None:
    ledger_data = ledger.to_dict()
    summary = build_summary(records, verdicts, ledger_data)
    _write_json(target / _FILES["summary"], summary)
    (target / _FILES["report"]).write_text(
        render_report(summary, records, verdicts, title="Bias audit report (corpus)"),
        encoding="utf-8",
    )
    doc_ids = sorted({r.excerpt.document_id for r in records})
    for doc_id in doc_ids:
        doc_records = [r for r in records if r.excerpt.document_id == doc_id]
        ids = {r.excerpt.excerpt_id for r in doc_records}
        doc_verdicts = [v for v in verdicts if v.excerpt_id in ids]
        doc_summary = build_summary(doc_records, doc_verdicts)
        (target / f"report_{doc_id}.html").write_text(
            render_report(doc_summary, doc_records, doc_verdicts, title=f"Bias audit report: {doc_id}"),
            encoding="utf-8",
        )
    _write_json(target / _FILES["ledger"], {"schema_version": STAGE_FILE_VERSION, **ledger_data})
