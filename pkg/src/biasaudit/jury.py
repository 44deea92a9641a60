"""Stage 2: fan each flagged excerpt out to the configured jurors, parse and
validate structured verdicts under the three-attempt retry discipline, and
account for every juror in the resulting record.

Jurors are independent by construction: each prompt carries only the excerpt,
its screening metadata, the severity scale, and the category list -- never
another juror's output.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from string import Template
from typing import Any, Callable, Mapping, Sequence, TypeVar

from .backends import BackendHandle, CostLedger, ModelResponse, Stage, TextPart
from .domain import (
    JurorVerdict,
    TaxonomyRegistry,
    juror_verdict_from_dict,
    severity_scale_text,
    validate_juror_verdict,
)
from .errors import BackendError, ConfigError, NoStructuredBlock, VerdictValidationError
from .extraction import first_dict_block
from .screening import FlaggedExcerpt

logger = logging.getLogger(__name__)

T = TypeVar("T")

JUROR_PAYLOAD_KEYS = ("attribution", "category", "severity", "confidence", "reasoning")

CALIBRATION_SENTENCE = (
    "You are encouraged to assign low severity or dismiss concerns when appropriate."
)

CALIBRATION_PLACEHOLDER = "${calibration_instruction}"


@dataclass(frozen=True)
class JurorFailure:
    juror_id: str
    reason: str
    attempts_used: int

    def to_dict(self) -> dict:
        return {"juror_id": self.juror_id, "reason": self.reason, "attempts_used": self.attempts_used}


@dataclass
class JuryRecord:
    """All juror outcomes for one excerpt. |verdicts| + |failures| equals the
    number of configured jurors; `complete` means nobody was discarded."""

    excerpt: FlaggedExcerpt
    jurors_configured: int
    verdicts: list[JurorVerdict] = field(default_factory=list)
    failures: list[JurorFailure] = field(default_factory=list)
    attempts: dict[str, int] = field(default_factory=dict)
    raw_texts: dict[str, list[str]] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return len(self.verdicts) == self.jurors_configured

    def to_dict(self) -> dict:
        return {
            "excerpt_id": self.excerpt.excerpt_id,
            "jurors_configured": self.jurors_configured,
            "complete": self.complete,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "failures": [f.to_dict() for f in self.failures],
            "attempts": dict(self.attempts),
            "raw_texts": {k: list(v) for k, v in self.raw_texts.items()},
        }

    @classmethod
    def from_dict(
        cls,
        data: Mapping[str, Any],
        excerpt: FlaggedExcerpt,
        registry: TaxonomyRegistry,
    ) -> "JuryRecord":
        return cls(
            excerpt=excerpt,
            jurors_configured=int(data["jurors_configured"]),
            verdicts=[juror_verdict_from_dict(v, registry) for v in data["verdicts"]],
            failures=[
                JurorFailure(f["juror_id"], f["reason"], int(f["attempts_used"]))
                for f in data["failures"]
            ],
            attempts={k: int(v) for k, v in data.get("attempts", {}).items()},
            raw_texts={k: list(v) for k, v in data.get("raw_texts", {}).items()},
        )


def parse_juror_output(text: str, registry: TaxonomyRegistry, juror_id: str = "juror") -> JurorVerdict:
    """Extract and validate a verdict from possibly prose-wrapped juror text.

    Extended-reasoning jurors emit deliberation before the payload; when a
    response carries several JSON objects the first complete one wins.
    """
    record = first_dict_block(text, required_keys=JUROR_PAYLOAD_KEYS)
    return validate_juror_verdict(record, registry, juror_id=juror_id)


@dataclass
class RetryOutcome:
    value: Any | None
    attempts_used: int
    raw_texts: list[str]
    error: str | None


_CORRECTIVE = (
    "Your previous reply was not a valid payload ({reason}). "
    "Respond again with only the required JSON object."
)


def _describe(exc: Exception) -> str:
    if isinstance(exc, VerdictValidationError):
        return "; ".join(str(i) for i in exc.issues)
    return str(exc)


def retry_schema(
    invoke: Callable[[str | None], ModelResponse],
    parse: Callable[[str], T],
    max_attempts: int = 3,
) -> RetryOutcome:
    """Schema-validation retry loop: re-invoke with a terse corrective suffix
    describing the violation; discard after `max_attempts` failures.

    Discard is a value, not an error. Transport failures (already retried at
    the backend layer) terminate the loop immediately.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    raw_texts: list[str] = []
    last_error: Exception | None = None
    for attempt in range(1, max_attempts + 1):
        suffix = None if last_error is None else _CORRECTIVE.format(reason=_describe(last_error))
        try:
            response = invoke(suffix)
        except BackendError as exc:
            return RetryOutcome(None, attempt, raw_texts, f"backend: {exc}")
        raw_texts.append(response.text)
        try:
            return RetryOutcome(parse(response.text), attempt, raw_texts, None)
        except (NoStructuredBlock, VerdictValidationError) as exc:
            last_error = exc
    return RetryOutcome(None, max_attempts, raw_texts, _describe(last_error))


def render_jury_prompt(
    template_text: str,
    excerpt: FlaggedExcerpt,
    registry: TaxonomyRegistry,
    calibration: bool = True,
) -> str:
    if calibration and CALIBRATION_PLACEHOLDER not in template_text:
        raise ConfigError(
            "jury template lacks the ${calibration_instruction} placeholder "
            "but the calibration instruction is enabled"
        )
    return Template(template_text).safe_substitute(
        excerpt_quote=excerpt.quote,
        attribution=excerpt.attribution.value,
        screening_reasoning=excerpt.screening_reasoning,
        page=str(excerpt.page),
        severity_scale=severity_scale_text(),
        taxonomy_labels="\n".join(f"- {label}" for label in registry.labels()),
        calibration_instruction=CALIBRATION_SENTENCE if calibration else "",
    )


def adjudicate_excerpt(
    excerpt: FlaggedExcerpt,
    jurors: Sequence[BackendHandle],
    template_text: str,
    registry: TaxonomyRegistry,
    calibration: bool = True,
    max_attempts: int = 3,
    ledger: CostLedger | None = None,
) -> JuryRecord:
    """Query every configured juror independently and assemble the record.

    Individual juror failures are captured in `failures`, never raised.
    """
    if not jurors:
        raise ConfigError("at least one juror must be configured")
    base = render_jury_prompt(template_text, excerpt, registry, calibration)
    record = JuryRecord(excerpt=excerpt, jurors_configured=len(jurors))
    for handle in jurors:
        juror_id = handle.backend_id

        def invoke(suffix: str | None, _handle: BackendHandle = handle) -> ModelResponse:
            text = base if suffix is None else base + "\n\n" + suffix
            response = _handle.ask("", [TextPart(text)])
            if ledger is not None:
                ledger.record(_handle.backend_id, Stage.JURY, response)
            return response

        outcome = retry_schema(
            invoke,
            lambda text, _jid=juror_id: parse_juror_output(text, registry, _jid),
            max_attempts,
        )
        record.attempts[juror_id] = outcome.attempts_used
        record.raw_texts[juror_id] = outcome.raw_texts
        if outcome.value is not None:
            record.verdicts.append(outcome.value)
        else:
            logger.warning("juror %s discarded on excerpt %s: %s", juror_id, excerpt.excerpt_id, outcome.error)
            record.failures.append(JurorFailure(juror_id, outcome.error or "unknown", outcome.attempts_used))
    return record


def run_jury(
    excerpts: Sequence[FlaggedExcerpt],
    jurors: Sequence[BackendHandle],
    template_text: str,
    registry: TaxonomyRegistry,
    calibration: bool = True,
    max_attempts: int = 3,
    max_workers: int = 1,
    ledger: CostLedger | None = None,
) -> list[JuryRecord]:
    """Adjudicate every excerpt; output order follows the input order."""

    def work(excerpt: FlaggedExcerpt) -> JuryRecord:
        return adjudicate_excerpt(
            excerpt, jurors, template_text, registry, calibration, max_attempts, ledger
        )

    if max_workers > 1 and len(excerpts) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(work, excerpts))
    return [work(e) for e in excerpts]
