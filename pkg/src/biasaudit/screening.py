"""Stage 1: batch page images, prompt the screening backend, and parse
high-recall flagged excerpts.

The screener is deliberately sensitivity-biased: everything it flags goes to
the jury, so false positives are cheap and severity is never assigned here.
Payloads are salvaged per record -- valid excerpt records are kept even when
siblings in the same payload are rejected.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from string import Template
from typing import Any, Mapping, Sequence

import yaml

from .backends import BackendHandle, CostLedger, ImagePart, Stage, TextPart
from .domain import Attribution
from .errors import BackendError, ConfigError, MissingInput, NoStructuredBlock
from .extraction import first_record_list

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 5

# Recommended page rendering for live runs: 200 DPI, longest side <= 1280 px.
RECOMMENDED_RENDER_DPI = 200
RECOMMENDED_RENDER_MAX_PX = 1280


@dataclass(frozen=True)
class DocumentManifest:
    document_id: str
    image_paths: tuple[str, ...]

    @property
    def page_count(self) -> int:
        return len(self.image_paths)


def load_manifest(path: str) -> DocumentManifest:
    """Load a per-document manifest: {"document_id": ..., "pages": [paths]}.

    Page paths are resolved relative to the manifest's directory and listed
    in page order (one image file per page).
    """
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, Mapping) or "document_id" not in data or "pages" not in data:
        raise ConfigError(f"manifest {path} needs 'document_id' and 'pages'")
    base = os.path.dirname(os.path.abspath(path))
    pages = tuple(
        p if os.path.isabs(p) else os.path.join(base, p) for p in data["pages"]
    )
    return DocumentManifest(document_id=str(data["document_id"]), image_paths=pages)


@dataclass(frozen=True)
class PageBatch:
    document_id: str
    index: int  # 1-based
    start_page: int
    end_page: int
    image_refs: tuple[str, ...]

    def __post_init__(self):
        if len(self.image_refs) != self.end_page - self.start_page + 1:
            raise ValueError("image_refs must cover the page range exactly")

    @property
    def page_range(self) -> str:
        return f"{self.start_page}-{self.end_page}"


@dataclass(frozen=True)
class FlaggedExcerpt:
    excerpt_id: str
    document_id: str
    batch_index: int
    page: int
    quote: str
    attribution: Attribution
    screening_reasoning: str

    def to_dict(self) -> dict:
        return {
            "excerpt_id": self.excerpt_id,
            "document_id": self.document_id,
            "batch_index": self.batch_index,
            "page": self.page,
            "quote": self.quote,
            "attribution": self.attribution.value,
            "screening_reasoning": self.screening_reasoning,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FlaggedExcerpt":
        return cls(
            excerpt_id=data["excerpt_id"],
            document_id=data["document_id"],
            batch_index=int(data["batch_index"]),
            page=int(data["page"]),
            quote=data["quote"],
            attribution=Attribution.parse(data["attribution"]),
            screening_reasoning=data["screening_reasoning"],
        )


def make_batches(page_count: int, batch_size: int = DEFAULT_BATCH_SIZE) -> list[tuple[int, int]]:
    """Partition pages 1..page_count into non-overlapping inclusive ranges.

    The last range may be short; concatenated ranges cover [1, page_count]
    exactly once.
    """
    if page_count < 0:
        raise ValueError("page_count must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [
        (start, min(start + batch_size - 1, page_count))
        for start in range(1, page_count + 1, batch_size)
    ]


def build_batches(manifest: DocumentManifest, batch_size: int = DEFAULT_BATCH_SIZE) -> list[PageBatch]:
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


def parse_screening_output(text: str) -> list[dict]:
    """Extract the excerpt-record list from possibly prose-wrapped text.

    Raises NoStructuredBlock when no JSON array (bare or enveloped) exists.
    Record-level validation is separate; see `check_excerpt_record`.
    """
    records = first_record_list(text)
    return [r for r in records if True]


def check_excerpt_record(record: Any, batch: PageBatch) -> tuple[dict | None, str | None]:
    """Validate one raw screening record against the batch.

    Returns (normalized record, None) or (None, rejection reason).
    """
    if not isinstance(record, Mapping):
        return None, f"not a record: {record!r}"
    quote = record.get("quote")
    if not isinstance(quote, str) or not quote.strip():
        return None, "missing or empty quote"
    page = record.get("page")
    if isinstance(page, float) and page.is_integer():
        page = int(page)
    if isinstance(page, bool) or not isinstance(page, int):
        return None, f"bad page value: {record.get('page')!r}"
    if not batch.start_page <= page <= batch.end_page:
        return None, f"page {page} outside batch range {batch.page_range}"
    try:
        attribution = Attribution.parse(record.get("attribution"))
    except ValueError:
        return None, f"bad attribution: {record.get('attribution')!r}"
    reasoning = record.get("reasoning")
    if not isinstance(reasoning, str) or not reasoning.strip():
        return None, "missing or empty reasoning"
    return (
        {"quote": quote, "page": page, "attribution": attribution, "reasoning": reasoning},
        None,
    )


@dataclass
class BatchScreenResult:
    batch: PageBatch
    status: str  # "ok" | "failed"
    excerpts: list[FlaggedExcerpt] = field(default_factory=list)
    rejected: list[dict] = field(default_factory=list)
    raw_texts: list[str] = field(default_factory=list)
    attempts: int = 0
    error: str | None = None


def render_screening_prompt(template_text: str, batch: PageBatch) -> str:
    return Template(template_text).safe_substitute(page_range=batch.page_range)


_CORRECTIVE = (
    "Your previous reply could not be parsed: {reason}. "
    "Respond again with only the required JSON payload."
)


def screen_batch(
    batch: PageBatch,
    handle: BackendHandle,
    template_text: str,
    max_attempts: int = 3,
    ledger: CostLedger | None = None,
) -> BatchScreenResult:
    """Screen one batch, retrying up to `max_attempts` when no structured
    payload can be extracted. Mixed-validity payloads are salvaged per
    record; a failed batch is recorded and the pipeline continues.
    """
    base = render_screening_prompt(template_text, batch)
    result = BatchScreenResult(batch=batch, status="failed")
    last_reason = None
    for attempt in range(1, max_attempts + 1):
        result.attempts = attempt
        text = base
        if last_reason is not None:
            text = base + "\n\n" + _CORRECTIVE.format(reason=last_reason)
        parts = [TextPart(text)] + [ImagePart(p) for p in batch.image_refs]
        try:
            response = handle.ask("", parts)
        except BackendError as exc:
            result.error = f"backend: {exc}"
            return result
        if ledger is not None:
            ledger.record(handle.backend_id, Stage.SCREENING, response)
        result.raw_texts.append(response.text)
        try:
            records = parse_screening_output(response.text)
        except NoStructuredBlock as exc:
            last_reason = str(exc)
            continue
        kept: list[FlaggedExcerpt] = []
        for record in records:
            normalized, reason = check_excerpt_record(record, batch)
            if normalized is None:
                logger.warning(
                    "screening %s batch %d: dropped record (%s)",
                    batch.document_id, batch.index, reason,
                )
                result.rejected.append({"record": _jsonable(record), "reason": reason})
                continue
            ordinal = len(kept) + 1
            kept.append(
                FlaggedExcerpt(
                    excerpt_id=f"{batch.document_id}-b{batch.index}-e{ordinal}",
                    document_id=batch.document_id,
                    batch_index=batch.index,
                    page=normalized["page"],
                    quote=normalized["quote"],
                    attribution=normalized["attribution"],
                    screening_reasoning=normalized["reasoning"],
                )
            )
        result.status = "ok"
        result.excerpts = kept
        result.error = None
        return result
    result.error = f"parse failure after {max_attempts} attempts: {last_reason}"
    return result


def _jsonable(value: Any) -> Any:
    try:
        json.dumps(value)
        return value
    except (TypeError, ValueError):
        return repr(value)


@dataclass
class DocumentScreening:
    document_id: str
    page_count: int
    batch_size: int
    batches: list[BatchScreenResult]

    @property
    def excerpts(self) -> list[FlaggedExcerpt]:
        out: list[FlaggedExcerpt] = []
        for batch in self.batches:
            out.extend(batch.excerpts)
        return out


def run_screening(
    manifests: Sequence[DocumentManifest],
    handle: BackendHandle,
    template_text: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_attempts: int = 3,
    max_workers: int = 1,
    ledger: CostLedger | None = None,
) -> list[DocumentScreening]:
    """Screen every batch of every document.

    Batches may run concurrently; results are re-ordered by (document,
    batch index) so downstream output is deterministic regardless of
    completion order.
    """
    for manifest in manifests:
        missing = [p for p in manifest.image_paths if not os.path.exists(p)]
        if missing:
            raise MissingInput(
                f"document {manifest.document_id!r}: missing page images {missing[:3]}"
            )

    jobs: list[tuple[int, PageBatch]] = []
    per_doc: list[DocumentScreening] = []
    for doc_idx, manifest in enumerate(manifests):
        batches = build_batches(manifest, batch_size)
        per_doc.append(
            DocumentScreening(
                document_id=manifest.document_id,
                page_count=manifest.page_count,
                batch_size=batch_size,
                batches=[None] * len(batches),  # type: ignore[list-item]
            )
        )
        jobs.extend((doc_idx, b) for b in batches)

    def work(job: tuple[int, PageBatch]) -> tuple[int, BatchScreenResult]:
        doc_idx, batch = job
        return doc_idx, screen_batch(batch, handle, template_text, max_attempts, ledger)

    if max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(work, jobs))
    else:
        outcomes = [work(j) for j in jobs]

    for doc_idx, result in outcomes:
        per_doc[doc_idx].batches[result.batch.index - 1] = result
    return per_doc
