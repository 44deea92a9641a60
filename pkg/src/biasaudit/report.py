"""Corpus-level statistics and report rendering.

All statistics are pure functions of their input lists. Percentages are
rounded half-away-from-zero to 1 decimal, means to 2 decimals. The HTML
report and the structured summary are generated from one internal model, so
every number appearing in both is the identical formatted string.
"""
from __future__ import annotations

import html
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Mapping, Sequence

from .domain import Attribution, FinalVerdict, SEVERITY_MAX, severity_label, severity_score
from .errors import MismatchedIds
from .jury import JuryRecord
from .meta import severity_range

_PCT = Decimal("0.1")
_MEAN = Decimal("0.01")

SUMMARY_SCHEMA_VERSION = 1


def _pct(part: int, whole: int) -> Decimal:
    return (Decimal(part) * 100 / Decimal(whole)).quantize(_PCT, rounding=ROUND_HALF_UP)


def _mean(total, count: int) -> Decimal:
    return (Decimal(str(total)) / Decimal(count)).quantize(_MEAN, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class SeverityDistribution:
    counts: tuple[int, ...]  # indexed by severity 1..7
    percentages: tuple[Decimal, ...]
    mean: Decimal | None
    n: int

    def share_at_most(self, severity: int) -> Decimal | None:
        if self.n == 0:
            return None
        return _pct(sum(self.counts[: severity]), self.n)


def severity_distribution(severities: Sequence[int]) -> SeverityDistribution:
    counts = [0] * SEVERITY_MAX
    for s in severities:
        counts[severity_score(s) - 1] += 1
    n = len(severities)
    if n == 0:
        return SeverityDistribution(tuple(counts), tuple(Decimal("0.0") for _ in counts), None, 0)
    percentages = tuple(_pct(c, n) for c in counts)
    mean = _mean(sum((i + 1) * c for i, c in enumerate(counts)), n)
    return SeverityDistribution(tuple(counts), percentages, mean, n)


@dataclass(frozen=True)
class AgreementStats:
    n_excerpts: int
    full_jury_count: int
    full_jury_rate: Decimal | None
    mean_range: Decimal | None
    pct_range_le_1: Decimal | None
    pct_range_ge_3: Decimal | None
    escalation_count: int
    escalation_rate: Decimal | None


def agreement_stats(records: Sequence[JuryRecord], verdicts: Sequence[FinalVerdict]) -> AgreementStats:
    record_ids = sorted(r.excerpt.excerpt_id for r in records)
    verdict_ids = sorted(v.excerpt_id for v in verdicts)
    if record_ids != verdict_ids:
        raise MismatchedIds("jury records and final verdicts cover different excerpts")
    n = len(records)
    if n == 0:
        return AgreementStats(0, 0, None, None, None, None, 0, None)
    ranges = [severity_range(r.verdicts) for r in records]
    full = sum(1 for r in records if r.complete)
    escalations = sum(1 for v in verdicts if v.human_review)
    return AgreementStats(
        n_excerpts=n,
        full_jury_count=full,
        full_jury_rate=_pct(full, n),
        mean_range=_mean(sum(ranges), n),
        pct_range_le_1=_pct(sum(1 for r in ranges if r <= 1), n),
        pct_range_ge_3=_pct(sum(1 for r in ranges if r >= 3), n),
        escalation_count=escalations,
        escalation_rate=_pct(escalations, n),
    )


@dataclass(frozen=True)
class AttributionRow:
    label: str
    n: int
    mean_severity: Decimal | None


@dataclass(frozen=True)
class AttributionSplit:
    rows: tuple[AttributionRow, ...]
    gap: Decimal | None  # absolute difference between the two means


def attribution_split(records: Sequence[JuryRecord], verdicts: Sequence[FinalVerdict]) -> AttributionSplit:
    by_id = {r.excerpt.excerpt_id: r.excerpt.attribution for r in records}
    buckets: dict[Attribution, list[int]] = {a: [] for a in Attribution}
    for v in verdicts:
        buckets[by_id[v.excerpt_id]].append(v.severity)
    rows = []
    raw_means = []
    for attribution in (Attribution.PRIMARY_SOURCE_USAGE, Attribution.TEXTBOOK_NARRATIVE):
        severities = buckets[attribution]
        if severities:
            raw = sum(severities) / len(severities)
            raw_means.append(raw)
            rows.append(AttributionRow(attribution.value, len(severities), _mean(sum(severities), len(severities))))
        else:
            rows.append(AttributionRow(attribution.value, 0, None))
    gap = None
    if len(raw_means) == 2:
        gap = Decimal(str(abs(raw_means[0] - raw_means[1]))).quantize(_MEAN, rounding=ROUND_HALF_UP)
    return AttributionSplit(tuple(rows), gap)


@dataclass(frozen=True)
class CategoryRow:
    label: str
    count: int
    mean_severity: Decimal


def category_table(verdicts: Sequence[FinalVerdict]) -> list[CategoryRow]:
    """Rows sorted by count descending, ties by label."""
    buckets: dict[str, list[int]] = {}
    for v in verdicts:
        buckets.setdefault(v.category.label, []).append(v.severity)
    rows = [
        CategoryRow(label, len(sevs), _mean(sum(sevs), len(sevs)))
        for label, sevs in buckets.items()
    ]
    return sorted(rows, key=lambda r: (-r.count, r.label))


def _fmt(value: Decimal | None) -> str | None:
    return None if value is None else str(value)


def build_summary(
    records: Sequence[JuryRecord],
    verdicts: Sequence[FinalVerdict],
    ledger_data: Mapping[str, Any] | None = None,
) -> dict:
    """The single source of truth behind both the summary file and the HTML
    report. All display values are pre-formatted strings."""
    dist = severity_distribution([v.severity for v in verdicts])
    agreement = agreement_stats(records, verdicts)
    split = attribution_split(records, verdicts)
    categories = category_table(verdicts)

    summary: dict[str, Any] = {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "n_excerpts": dist.n,
        "severity": {
            "counts": list(dist.counts),
            "percentages": [str(p) for p in dist.percentages],
            "mean": _fmt(dist.mean),
            "share_at_most_3": _fmt(dist.share_at_most(3)),
        },
        "agreement": {
            "n_excerpts": agreement.n_excerpts,
            "full_jury_count": agreement.full_jury_count,
            "full_jury_rate": _fmt(agreement.full_jury_rate),
            "mean_range": _fmt(agreement.mean_range),
            "pct_range_le_1": _fmt(agreement.pct_range_le_1),
            "pct_range_ge_3": _fmt(agreement.pct_range_ge_3),
            "escalation_count": agreement.escalation_count,
            "escalation_rate": _fmt(agreement.escalation_rate),
        },
        "attribution": {
            "rows": [
                {"label": r.label, "n": r.n, "mean": _fmt(r.mean_severity)} for r in split.rows
            ],
            "gap": _fmt(split.gap),
        },
        "categories": [
            {"label": r.label, "count": r.count, "mean": str(r.mean_severity)} for r in categories
        ],
        "escalated_excerpts": sorted(v.excerpt_id for v in verdicts if v.human_review),
    }
    if ledger_data is not None:
        stage_totals = ledger_data.get("stage_totals", {})
        proportions = ledger_data.get("stage_proportions", {})
        summary["cost"] = {
            "total": ledger_data.get("total"),
            "stages": [
                {
                    "stage": stage,
                    "cost": stage_totals.get(stage),
                    "pct": proportions.get(stage),
                }
                for stage in sorted(stage_totals)
            ],
        }
    return summary


_CSS = """
body { font-family: Georgia, serif; margin: 2rem auto; max-width: 60rem; color: #222; }
h1, h2 { font-family: Helvetica, Arial, sans-serif; }
table { border-collapse: collapse; margin: 1rem 0; }
th, td { border: 1px solid #bbb; padding: 0.3rem 0.7rem; text-align: left; }
th { background: #f0f0f0; }
.card { border: 1px solid #ccc; border-radius: 6px; padding: 1rem; margin: 1rem 0; }
.card blockquote { border-left: 3px solid #888; margin: 0.5rem 0; padding-left: 0.8rem; font-style: italic; }
.badge { display: inline-block; padding: 0.1rem 0.5rem; border-radius: 4px; font-family: sans-serif; font-size: 0.85rem; }
.badge.review { background: #c0392b; color: #fff; }
.badge.attribution { background: #2c3e50; color: #fff; }
.badge.severity { background: #7f8c8d; color: #fff; }
.banner { background: #fdf6e3; border: 1px solid #ccc; padding: 1rem; }
.num { font-variant-numeric: tabular-nums; }
"""


def _span(value: Any) -> str:
    return f'<span class="num">{html.escape(str(value))}</span>'


def render_report(
    summary: Mapping[str, Any],
    records: Sequence[JuryRecord],
    verdicts: Sequence[FinalVerdict],
    title: str = "Bias audit report",
) -> str:
    """Self-contained static HTML: summary statistics plus one card per
    excerpt. Every number is taken verbatim from the summary model."""
    by_id = {r.excerpt.excerpt_id: r for r in records}
    out: list[str] = []
    push = out.append
    push("<!DOCTYPE html>")
    push('<html lang="en"><head><meta charset="utf-8">')
    push(f"<title>{html.escape(title)}</title>")
    push(f"<style>{_CSS}</style></head><body>")
    push(f"<h1>{html.escape(title)}</h1>")

    if summary["n_excerpts"] == 0:
        push('<p class="banner">No excerpts were flagged in this corpus.</p>')
        push("</body></html>")
        return "\n".join(out) + "\n"

    push("<h2>Severity distribution</h2>")
    push("<table><tr><th>Severity</th><th>Label</th><th>Count</th><th>%</th></tr>")
    for i, (count, pct) in enumerate(
        zip(summary["severity"]["counts"], summary["severity"]["percentages"]), start=1
    ):
        push(
            f"<tr><td>{i}</td><td>{html.escape(severity_label(i).name)}</td>"
            f"<td>{_span(count)}</td><td>{_span(pct)}</td></tr>"
        )
    push("</table>")
    push(
        f"<p>Excerpts: {_span(summary['n_excerpts'])}; mean severity {_span(summary['severity']['mean'])}; "
        f"share at severity &le;3: {_span(summary['severity']['share_at_most_3'])}%.</p>"
    )

    agreement = summary["agreement"]
    push("<h2>Jury agreement</h2><ul>")
    push(
        f"<li>Full juries: {_span(agreement['full_jury_count'])} of {_span(agreement['n_excerpts'])} "
        f"({_span(agreement['full_jury_rate'])}%)</li>"
    )
    push(f"<li>Mean severity range: {_span(agreement['mean_range'])}</li>")
    push(f"<li>Range &le;1: {_span(agreement['pct_range_le_1'])}%; range &ge;3: {_span(agreement['pct_range_ge_3'])}%</li>")
    push(
        f"<li>Escalated for human review: {_span(agreement['escalation_count'])} "
        f"({_span(agreement['escalation_rate'])}%)</li>"
    )
    push("</ul>")

    push("<h2>Source attribution</h2>")
    push("<table><tr><th>Attribution</th><th>N</th><th>Mean severity</th></tr>")
    for row in summary["attribution"]["rows"]:
        mean = row["mean"] if row["mean"] is not None else "&mdash;"
        push(f"<tr><td>{html.escape(row['label'])}</td><td>{_span(row['n'])}</td><td>{_span(mean) if row['mean'] is not None else mean}</td></tr>")
    push("</table>")
    if summary["attribution"]["gap"] is not None:
        push(f"<p>Mean-severity gap between attributions: {_span(summary['attribution']['gap'])}</p>")

    push("<h2>Categories</h2>")
    push("<table><tr><th>Category</th><th>Count</th><th>Mean severity</th></tr>")
    for row in summary["categories"]:
        push(
            f"<tr><td>{html.escape(row['label'])}</td><td>{_span(row['count'])}</td>"
            f"<td>{_span(row['mean'])}</td></tr>"
        )
    push("</table>")

    if "cost" in summary:
        push("<h2>Cost</h2>")
        push("<table><tr><th>Stage</th><th>Cost (USD)</th><th>Share</th></tr>")
        for row in summary["cost"]["stages"]:
            push(
                f"<tr><td>{html.escape(row['stage'])}</td><td>{_span(row['cost'])}</td>"
                f"<td>{_span(row['pct'])}%</td></tr>"
            )
        push("</table>")
        push(f"<p>Total: ${_span(summary['cost']['total'])}</p>")

    push("<h2>Excerpts</h2>")
    for verdict in verdicts:
        record = by_id[verdict.excerpt_id]
        excerpt = record.excerpt
        label = severity_label(verdict.severity)
        push('<div class="card">')
        push(f"<h3>{html.escape(verdict.excerpt_id)} &middot; page {excerpt.page}</h3>")
        badges = [
            f'<span class="badge severity">Severity {verdict.severity} &middot; {html.escape(label.name)}</span>',
            f'<span class="badge attribution">{html.escape(excerpt.attribution.value)}</span>',
        ]
        if verdict.human_review:
            badges.append('<span class="badge review">Human review</span>')
        push("<p>" + " ".join(badges) + "</p>")
        push(f"<blockquote>{html.escape(excerpt.quote)}</blockquote>")
        push(f"<p><strong>Category:</strong> {html.escape(verdict.category.label)}</p>")
        push(f"<p><strong>Justification:</strong> {html.escape(verdict.justification)}</p>")
        push("</div>")

    push("</body></html>")
    return "\n".join(out) + "\n"
