"""Shared vocabulary: the 7-point severity scale, source attribution labels,
the bias-category registry, and verdict records with validation.

Everything here is immutable after construction and safe to share across
threads. The category registry is loaded once at startup and read-only
thereafter.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Mapping

import yaml

from .errors import TaxonomyConfigError, UnknownCategory, VerdictValidationError

SEVERITY_MIN = 1
SEVERITY_MAX = 7


@dataclass(frozen=True)
class SeverityLabel:
    score: int
    name: str
    description: str


SEVERITY_SCALE: tuple[SeverityLabel, ...] = (
    SeverityLabel(1, "Neutral", "Pedagogically sound or properly contextualized source."),
    SeverityLabel(2, "Negligible", "Stylistic choices without substantive bias."),
    SeverityLabel(3, "Minor", "Lack of secondary perspective or slight tonal loading."),
    SeverityLabel(4, "Moderate", "Loaded language, stereotyping, or insufficient context."),
    SeverityLabel(5, "Significant", "Selective omission of key facts or one-sided narratives."),
    SeverityLabel(6, "Severe", "Nationalist myth-making, whitewashing, or propaganda."),
    SeverityLabel(7, "Harmful", "Hate speech, fabrication, or incitement as instruction."),
)


def severity_score(value: Any) -> int:
    """Validate a severity value: an integer in [1, 7]. Booleans are rejected."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"severity must be an integer, got {value!r}")
    if not SEVERITY_MIN <= value <= SEVERITY_MAX:
        raise ValueError(f"severity {value} outside [{SEVERITY_MIN}, {SEVERITY_MAX}]")
    return value


def severity_label(score: int) -> SeverityLabel:
    return SEVERITY_SCALE[severity_score(score) - 1]


def severity_scale_text() -> str:
    return "\n".join(f"{s.score} - {s.name}: {s.description}" for s in SEVERITY_SCALE)


class Attribution(enum.Enum):
    """The two mutually exclusive source attribution labels."""

    TEXTBOOK_NARRATIVE = "Textbook Narrative"
    PRIMARY_SOURCE_USAGE = "Primary Source Usage"

    @classmethod
    def parse(cls, value: Any) -> "Attribution":
        if isinstance(value, Attribution):
            return value
        if isinstance(value, str):
            stripped = value.strip()
            for member in cls:
                if member.value == stripped:
                    return member
        raise ValueError(f"not an attribution label: {value!r}")


class TaxonomyDomain(enum.Enum):
    LANGUAGE_AND_FRAMING = "Language & Framing"
    PERSPECTIVE_AND_REPRESENTATION = "Perspective & Representation"
    STRUCTURE_AND_EMPHASIS = "Structure & Emphasis"
    SOURCE_HANDLING = "Source Handling"


@dataclass(frozen=True)
class TaxonomyCategory:
    label: str
    domain: TaxonomyDomain


REGISTRY_SIZE = 15


class TaxonomyRegistry:
    """Read-only registry of bias category labels partitioned across the four
    domains. Loading fails closed on duplicates or a count other than 15.

    Matching is exact and case-sensitive after whitespace trimming; the alias
    table is the single controlled leniency point for near-miss labels.
    """

    def __init__(
        self,
        categories: Iterable[TaxonomyCategory],
        aliases: Mapping[str, str] | None = None,
    ):
        cats = list(categories)
        labels = [c.label for c in cats]
        if len(set(labels)) != len(labels):
            raise TaxonomyConfigError("duplicate category labels in taxonomy config")
        if len(cats) != REGISTRY_SIZE:
            raise TaxonomyConfigError(
                f"taxonomy registry must hold exactly {REGISTRY_SIZE} labels, got {len(cats)}"
            )
        self._by_label: dict[str, TaxonomyCategory] = {c.label: c for c in cats}
        self._order: tuple[str, ...] = tuple(labels)
        self._aliases: dict[str, str] = dict(aliases or {})
        for alias, target in self._aliases.items():
            if target not in self._by_label:
                raise TaxonomyConfigError(
                    f"alias {alias!r} points at unknown label {target!r}"
                )

    def lookup(self, label: str) -> TaxonomyCategory:
        key = label.strip()
        key = self._aliases.get(key, key)
        try:
            return self._by_label[key]
        except KeyError:
            raise UnknownCategory(label) from None

    def get(self, label: str) -> TaxonomyCategory | None:
        try:
            return self.lookup(label)
        except UnknownCategory:
            return None

    def labels(self) -> tuple[str, ...]:
        return self._order

    def categories(self) -> tuple[TaxonomyCategory, ...]:
        return tuple(self._by_label[l] for l in self._order)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TaxonomyRegistry":
        entries = data.get("categories")
        if not isinstance(entries, list):
            raise TaxonomyConfigError("taxonomy config needs a 'categories' list")
        cats = []
        for entry in entries:
            if not isinstance(entry, Mapping) or "label" not in entry or "domain" not in entry:
                raise TaxonomyConfigError(f"bad taxonomy entry: {entry!r}")
            try:
                domain = TaxonomyDomain(entry["domain"])
            except ValueError:
                raise TaxonomyConfigError(f"unknown domain: {entry['domain']!r}") from None
            cats.append(TaxonomyCategory(str(entry["label"]), domain))
        aliases = data.get("aliases") or {}
        if not isinstance(aliases, Mapping):
            raise TaxonomyConfigError("taxonomy 'aliases' must be a mapping")
        return cls(cats, {str(k): str(v) for k, v in aliases.items()})

    @classmethod
    def from_file(cls, path) -> "TaxonomyRegistry":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, Mapping):
            raise TaxonomyConfigError(f"taxonomy config {path} is not a mapping")
        return cls.from_mapping(data)

    @classmethod
    def default(cls) -> "TaxonomyRegistry":
        text = resources.files("biasaudit").joinpath("data/taxonomy.yaml").read_text("utf-8")
        return cls.from_mapping(yaml.safe_load(text))


class Strategy(enum.Enum):
    HEURISTIC = "heuristic"
    INDEPENDENT_DELIBERATION = "independent-deliberation"
    SINGLE_PASS = "single-pass"


@dataclass(frozen=True)
class JurorVerdict:
    """One juror's structured assessment of a flagged excerpt."""

    juror_id: str
    attribution: Attribution
    category: TaxonomyCategory
    severity: int
    confidence: float
    reasoning: str

    def __post_init__(self):
        severity_score(self.severity)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not self.reasoning.strip():
            raise ValueError("reasoning must be non-empty")

    def to_dict(self) -> dict:
        return {
            "juror_id": self.juror_id,
            "attribution": self.attribution.value,
            "category": self.category.label,
            "severity": self.severity,
            "confidence": self.confidence,
            "reasoning": self.reasoning,
        }


@dataclass(frozen=True)
class FinalVerdict:
    """Stage-3 synthesis for one excerpt.

    `fallback` marks verdicts where the deliberative strategy exhausted its
    retries and the deterministic aggregator filled in. `trace` carries
    audit detail such as which decision-tree branch fired.
    """

    excerpt_id: str
    severity: int
    category: TaxonomyCategory
    justification: str
    human_review: bool
    strategy: Strategy
    juror_count_valid: int
    fallback: bool = False
    trace: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        severity_score(self.severity)
        if self.juror_count_valid < 0:
            raise ValueError("juror_count_valid must be >= 0")

    def to_dict(self) -> dict:
        return {
            "excerpt_id": self.excerpt_id,
            "severity": self.severity,
            "category": self.category.label,
            "justification": self.justification,
            "human_review": self.human_review,
            "strategy": self.strategy.value,
            "juror_count_valid": self.juror_count_valid,
            "fallback": self.fallback,
            "trace": dict(self.trace),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], registry: TaxonomyRegistry) -> "FinalVerdict":
        return cls(
            excerpt_id=data["excerpt_id"],
            severity=data["severity"],
            category=registry.lookup(data["category"]),
            justification=data["justification"],
            human_review=bool(data["human_review"]),
            strategy=Strategy(data["strategy"]),
            juror_count_valid=data["juror_count_valid"],
            fallback=bool(data.get("fallback", False)),
            trace=dict(data.get("trace") or {}),
        )


@dataclass(frozen=True)
class Issue:
    """One violated constraint found while validating a raw verdict record."""

    code: str  # missing_field | invalid_type | invalid_value | out_of_range | unknown_category | empty_reasoning
    field: str
    detail: str = ""

    def __str__(self):
        return f"{self.code}({self.field})" + (f": {self.detail}" if self.detail else "")


_JUROR_FIELDS = ("attribution", "category", "severity", "confidence", "reasoning")


def validate_juror_verdict(
    raw: Mapping[str, Any],
    registry: TaxonomyRegistry,
    juror_id: str = "juror",
) -> JurorVerdict:
    """Validate a parsed key/value record into a JurorVerdict.

    Total over structured records: either returns a verdict or raises
    VerdictValidationError carrying every violated constraint.
    """
    issues: list[Issue] = []

    attribution = None
    if "attribution" not in raw:
        issues.append(Issue("missing_field", "attribution"))
    else:
        try:
            attribution = Attribution.parse(raw["attribution"])
        except ValueError:
            issues.append(Issue("invalid_value", "attribution", repr(raw["attribution"])))

    category = None
    if "category" not in raw:
        issues.append(Issue("missing_field", "category"))
    elif not isinstance(raw["category"], str):
        issues.append(Issue("invalid_type", "category", repr(raw["category"])))
    else:
        category = registry.get(raw["category"])
        if category is None:
            issues.append(Issue("unknown_category", "category", raw["category"]))

    severity = None
    if "severity" not in raw:
        issues.append(Issue("missing_field", "severity"))
    else:
        value = raw["severity"]
        if isinstance(value, float) and value.is_integer():
            value = int(value)  # JSON round-trips may widen ints
        if isinstance(value, bool) or not isinstance(value, int):
            issues.append(Issue("invalid_type", "severity", repr(raw["severity"])))
        elif not SEVERITY_MIN <= value <= SEVERITY_MAX:
            issues.append(Issue("out_of_range", "severity", str(value)))
        else:
            severity = value

    confidence = None
    if "confidence" not in raw:
        issues.append(Issue("missing_field", "confidence"))
    else:
        value = raw["confidence"]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            issues.append(Issue("invalid_type", "confidence", repr(value)))
        elif not 0.0 <= value <= 1.0:
            issues.append(Issue("out_of_range", "confidence", str(value)))
        else:
            confidence = float(value)

    reasoning = None
    if "reasoning" not in raw:
        issues.append(Issue("missing_field", "reasoning"))
    elif not isinstance(raw["reasoning"], str):
        issues.append(Issue("invalid_type", "reasoning", repr(raw["reasoning"])))
    elif not raw["reasoning"].strip():
        issues.append(Issue("empty_reasoning", "reasoning"))
    else:
        reasoning = raw["reasoning"]

    if issues:
        raise VerdictValidationError(issues)
    return JurorVerdict(
        juror_id=str(raw.get("juror_id", juror_id)),
        attribution=attribution,
        category=category,
        severity=severity,
        confidence=confidence,
        reasoning=reasoning,
    )


def juror_verdict_from_dict(data: Mapping[str, Any], registry: TaxonomyRegistry) -> JurorVerdict:
    return validate_juror_verdict(data, registry, juror_id=str(data.get("juror_id", "juror")))
