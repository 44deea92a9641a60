"""Stage 3: synthesize one final verdict per jury record.

Two strategies are supported. The heuristic aggregator is a pure,
deterministic decision tree: adopt the severity shared by all
high-confidence jurors when they agree, otherwise fall back to the
confidence-weighted mean; a divergent or thin jury raises the human-review
flag, which is orthogonal to the severity itself. The deliberative strategy
hands the full juror tuples to a meta backend acting as an appellate judge,
free to adopt a well-argued minority position; on retry exhaustion it falls
back to the heuristic with a fallback marker.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from string import Template
from typing import Any, Sequence

from .backends import BackendHandle, CostLedger, ModelResponse, Stage, TextPart
from .domain import (
    FinalVerdict,
    Issue,
    JurorVerdict,
    SEVERITY_MAX,
    SEVERITY_MIN,
    Strategy,
    TaxonomyCategory,
    TaxonomyRegistry,
    severity_scale_text,
)
from .errors import EmptyJury, VerdictValidationError, ZeroTotalConfidence
from .jury import JuryRecord, retry_schema
from .extraction import first_dict_block

logger = logging.getLogger(__name__)

META_PAYLOAD_KEYS = ("severity", "category", "justification", "human_review")


@dataclass(frozen=True)
class AggregationConfig:
    strategy: Strategy = Strategy.HEURISTIC
    confidence_threshold: float = 0.7
    divergence_threshold: float = 1.5
    min_quorum: int = 3
    # Route the heuristic rule text through the meta backend instead of
    # running it in process (fidelity experiments only).
    prompted_heuristic: bool = False

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie strictly in (0, 1)")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence_threshold must be positive")
        if self.min_quorum < 1:
            raise ValueError("min_quorum must be >= 1")


def severity_range(verdicts: Sequence[JurorVerdict]) -> int:
    """Max minus min juror severity; the jury's dispersion measure."""
    if not verdicts:
        raise EmptyJury("severity_range needs at least one verdict")
    severities = [v.severity for v in verdicts]
    return max(severities) - min(severities)


def high_confidence_consensus(verdicts: Sequence[JurorVerdict], threshold: float) -> int | None:
    """Severity shared by all jurors with confidence strictly above the
    threshold; None when that set is empty or disagrees."""
    if not verdicts:
        raise EmptyJury("high_confidence_consensus needs at least one verdict")
    high = [v for v in verdicts if v.confidence > threshold]
    if not high:
        return None
    severities = {v.severity for v in high}
    if len(severities) == 1:
        return severities.pop()
    return None


def confidence_weighted_severity(verdicts: Sequence[JurorVerdict]) -> float:
    if not verdicts:
        raise EmptyJury("confidence_weighted_severity needs at least one verdict")
    total = sum(v.confidence for v in verdicts)
    if total <= 0:
        raise ZeroTotalConfidence("all juror confidences are zero")
    return sum(v.severity * v.confidence for v in verdicts) / total


def round_severity(mean: float) -> int:
    """Nearest integer; exact .5 ties round down, toward leniency."""
    if not SEVERITY_MIN <= mean <= SEVERITY_MAX:
        raise ValueError(f"mean severity {mean} outside [{SEVERITY_MIN}, {SEVERITY_MAX}]")
    return int(math.ceil(mean - 0.5))


def plurality_category(verdicts: Sequence[JurorVerdict]) -> TaxonomyCategory:
    """Category with the largest summed confidence; ties broken by highest
    single-verdict confidence, then lexicographic label order."""
    if not verdicts:
        raise EmptyJury("plurality_category needs at least one verdict")
    tally: dict[str, list] = {}
    for v in verdicts:
        entry = tally.setdefault(v.category.label, [0.0, 0.0, v.category])
        entry[0] += v.confidence
        entry[1] = max(entry[1], v.confidence)
    ranked = sorted(tally.items(), key=lambda kv: (-kv[1][0], -kv[1][1], kv[0]))
    return ranked[0][1][2]


def _format_jurors(verdicts: Sequence[JurorVerdict]) -> str:
    return ", ".join(
        f"{v.juror_id} (severity {v.severity}, confidence {v.confidence:.2f})" for v in verdicts
    )


def aggregate_heuristic(record: JuryRecord, cfg: AggregationConfig) -> FinalVerdict:
    """Deterministic decision-tree aggregation. Pure: same record and config
    always yield the identical verdict."""
    verdicts = record.verdicts
    if not verdicts:
        raise EmptyJury(f"no valid verdicts for excerpt {record.excerpt.excerpt_id}")

    rng = severity_range(verdicts)
    divergence = rng > cfg.divergence_threshold
    below_quorum = len(verdicts) < cfg.min_quorum
    human_review = divergence or below_quorum

    mean: float | None = None
    consensus = high_confidence_consensus(verdicts, cfg.confidence_threshold)
    if consensus is not None:
        severity = consensus
        branch = "consensus"
    else:
        try:
            mean = confidence_weighted_severity(verdicts)
            branch = "weighted"
        except ZeroTotalConfidence:
            mean = sum(v.severity for v in verdicts) / len(verdicts)
            branch = "unweighted"
        # float error can land a hair outside the jury's own range
        severities = [v.severity for v in verdicts]
        mean = min(max(mean, min(severities)), max(severities))
        severity = round_severity(mean)

    category = plurality_category(verdicts)

    parts = []
    if branch == "consensus":
        parts.append(f"High-confidence jurors agree on severity {severity}.")
    elif branch == "weighted":
        parts.append(
            f"No high-confidence consensus; the confidence-weighted mean {mean:.2f} rounds to {severity}."
        )
    else:
        parts.append(
            f"All juror confidences are zero; the unweighted mean {mean:.2f} rounds to {severity}."
        )
    parts.append(f"Category {category.label!r} carries the largest summed juror confidence.")
    parts.append(f"Juror assessments: {_format_jurors(verdicts)}.")
    if divergence:
        parts.append(
            f"Severity range {rng} exceeds the divergence threshold "
            f"{cfg.divergence_threshold:g}; flagged for human review."
        )
    if below_quorum:
        parts.append(
            f"Only {len(verdicts)} valid verdicts against a quorum of "
            f"{cfg.min_quorum}; flagged for human review."
        )

    trace = {
        "branch": branch,
        "severity_range": rng,
        "divergence": divergence,
        "below_quorum": below_quorum,
        "weighted_mean": None if mean is None else round(mean, 4),
    }
    return FinalVerdict(
        excerpt_id=record.excerpt.excerpt_id,
        severity=severity,
        category=category,
        justification=" ".join(parts),
        human_review=human_review,
        strategy=Strategy.HEURISTIC,
        juror_count_valid=len(verdicts),
        trace=trace,
    )


def _juror_tuples_json(record: JuryRecord) -> str:
    tuples = [
        {
            "juror": v.juror_id,
            "category": v.category.label,
            "severity": v.severity,
            "confidence": v.confidence,
            "reasoning": v.reasoning,
        }
        for v in record.verdicts
    ]
    return json.dumps(tuples, indent=2, ensure_ascii=False)


def render_meta_prompt(
    template_text: str,
    record: JuryRecord,
    registry: TaxonomyRegistry,
    cfg: AggregationConfig,
) -> str:
    excerpt = record.excerpt
    return Template(template_text).safe_substitute(
        excerpt_quote=excerpt.quote,
        attribution=excerpt.attribution.value,
        page=str(excerpt.page),
        juror_tuples=_juror_tuples_json(record),
        severity_scale=severity_scale_text(),
        taxonomy_labels="\n".join(f"- {label}" for label in registry.labels()),
        confidence_threshold=f"{cfg.confidence_threshold:g}",
        divergence_threshold=f"{cfg.divergence_threshold:g}",
        min_quorum=str(cfg.min_quorum),
    )


def parse_meta_output(text: str, registry: TaxonomyRegistry) -> dict:
    """Extract and validate the standardized meta payload."""
    record = first_dict_block(text, required_keys=META_PAYLOAD_KEYS)
    issues: list[Issue] = []

    severity = None
    if "severity" not in record:
        issues.append(Issue("missing_field", "severity"))
    else:
        value = record["severity"]
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            issues.append(Issue("invalid_type", "severity", repr(record["severity"])))
        elif not SEVERITY_MIN <= value <= SEVERITY_MAX:
            issues.append(Issue("out_of_range", "severity", str(value)))
        else:
            severity = value

    category = None
    if "category" not in record:
        issues.append(Issue("missing_field", "category"))
    elif not isinstance(record["category"], str):
        issues.append(Issue("invalid_type", "category", repr(record["category"])))
    else:
        category = registry.get(record["category"])
        if category is None:
            issues.append(Issue("unknown_category", "category", record["category"]))

    justification = None
    if "justification" not in record:
        issues.append(Issue("missing_field", "justification"))
    elif not isinstance(record["justification"], str) or not record["justification"].strip():
        issues.append(Issue("empty_reasoning", "justification"))
    else:
        justification = record["justification"]

    human_review = record.get("human_review")
    if "human_review" not in record:
        issues.append(Issue("missing_field", "human_review"))
    elif not isinstance(human_review, bool):
        issues.append(Issue("invalid_type", "human_review", repr(human_review)))

    if issues:
        raise VerdictValidationError(issues)
    return {
        "severity": severity,
        "category": category,
        "justification": justification,
        "human_review": human_review,
    }


def aggregate_deliberative(
    record: JuryRecord,
    handle: BackendHandle,
    template_text: str,
    registry: TaxonomyRegistry,
    cfg: AggregationConfig,
    max_attempts: int = 3,
    ledger: CostLedger | None = None,
) -> FinalVerdict:
    """LLM-backed synthesis over the complete juror tuples.

    Schema retries mirror the jurors'; when exhausted (or the backend fails
    after transport retries) the deterministic aggregator supplies the
    verdict with `fallback` set.
    """
    if not record.verdicts:
        raise EmptyJury(f"no valid verdicts for excerpt {record.excerpt.excerpt_id}")
    base = render_meta_prompt(template_text, record, registry, cfg)

    def invoke(suffix: str | None) -> ModelResponse:
        text = base if suffix is None else base + "\n\n" + suffix
        response = handle.ask("", [TextPart(text)])
        if ledger is not None:
            ledger.record(handle.backend_id, Stage.META, response)
        return response

    outcome = retry_schema(invoke, lambda t: parse_meta_output(t, registry), max_attempts)
    if outcome.value is None:
        logger.warning(
            "meta backend discarded on excerpt %s (%s); using heuristic fallback",
            record.excerpt.excerpt_id,
            outcome.error,
        )
        fallback = aggregate_heuristic(record, cfg)
        trace = dict(fallback.trace)
        trace["fallback_reason"] = outcome.error
        trace["meta_attempts"] = outcome.attempts_used
        return dataclasses.replace(fallback, fallback=True, trace=trace)
    payload = outcome.value
    return FinalVerdict(
        excerpt_id=record.excerpt.excerpt_id,
        severity=payload["severity"],
        category=payload["category"],
        justification=payload["justification"],
        human_review=payload["human_review"],
        strategy=Strategy.INDEPENDENT_DELIBERATION,
        juror_count_valid=len(record.verdicts),
        trace={"meta_attempts": outcome.attempts_used},
    )


def run_meta(
    records: Sequence[JuryRecord],
    cfg: AggregationConfig,
    meta_handle: BackendHandle | None = None,
    template_text: str | None = None,
    registry: TaxonomyRegistry | None = None,
    max_attempts: int = 3,
    max_workers: int = 1,
    ledger: CostLedger | None = None,
) -> list[FinalVerdict]:
    """Synthesize verdicts for every record holding at least one valid
    juror verdict; empty-jury records are skipped (they stay visible in the
    jury stage file)."""
    usable = [r for r in records if r.verdicts]
    skipped = len(records) - len(usable)
    if skipped:
        logger.warning("skipping %d record(s) with no valid juror verdicts", skipped)

    if cfg.strategy is Strategy.HEURISTIC and not cfg.prompted_heuristic:
        return [aggregate_heuristic(r, cfg) for r in usable]

    if meta_handle is None or template_text is None or registry is None:
        raise ValueError("deliberative aggregation needs a meta backend, template, and registry")

    def work(record: JuryRecord) -> FinalVerdict:
        verdict = aggregate_deliberative(
            record, meta_handle, template_text, registry, cfg, max_attempts, ledger
        )
        if cfg.strategy is Strategy.HEURISTIC:
            # prompted-heuristic mode keeps heuristic provenance
            verdict = dataclasses.replace(verdict, strategy=Strategy.HEURISTIC)
        return verdict

    if max_workers > 1 and len(usable) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(work, usable))
    return [work(r) for r in usable]
