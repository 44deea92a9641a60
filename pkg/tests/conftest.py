import json

import pytest

from biasaudit.domain import Attribution, JurorVerdict, TaxonomyRegistry
from biasaudit.jury import JuryRecord
from biasaudit.screening import FlaggedExcerpt


@pytest.fixture(scope="session")
def registry() -> TaxonomyRegistry:
    return TaxonomyRegistry.default()


def make_excerpt(
    excerpt_id="doc1-b1-e1",
    document_id="doc1",
    batch_index=1,
    page=2,
    quote="The nation has always stood united.",
    attribution=Attribution.TEXTBOOK_NARRATIVE,
    reasoning="essentialist framing of national identity",
) -> FlaggedExcerpt:
    return FlaggedExcerpt(
        excerpt_id=excerpt_id,
        document_id=document_id,
        batch_index=batch_index,
        page=page,
        quote=quote,
        attribution=attribution,
        screening_reasoning=reasoning,
    )


def make_record(jury, registry, excerpt=None, jurors_configured=None) -> JuryRecord:
    """Build a JuryRecord from (severity, confidence, category-label) tuples."""
    excerpt = excerpt or make_excerpt()
    verdicts = [
        JurorVerdict(
            juror_id=f"j{i + 1}",
            attribution=Attribution.TEXTBOOK_NARRATIVE,
            category=registry.lookup(category),
            severity=severity,
            confidence=confidence,
            reasoning=f"assessment {i + 1}",
        )
        for i, (severity, confidence, category) in enumerate(jury)
    ]
    return JuryRecord(
        excerpt=excerpt,
        jurors_configured=jurors_configured if jurors_configured is not None else len(verdicts),
        verdicts=verdicts,
    )


def juror_payload(
    severity=3,
    confidence=0.8,
    category="Narrative Framing",
    attribution="Textbook Narrative",
    reasoning="tonal loading without a second perspective",
    **extra,
) -> str:
    record = {
        "attribution": attribution,
        "category": category,
        "severity": severity,
        "confidence": confidence,
        "reasoning": reasoning,
    }
    record.update(extra)
    return json.dumps(record)


def screening_payload(records) -> str:
    return json.dumps(records)
