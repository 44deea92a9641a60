import json

import pytest

from biasaudit.backends import (
    BackendHandle,
    BackendPrice,
    CostLedger,
    PriceTable,
    ScriptedBackend,
    Stage,
)
from biasaudit.domain import Strategy
from biasaudit.errors import EmptyJury, TransportError, ZeroTotalConfidence
from biasaudit.meta import (
    AggregationConfig,
    aggregate_deliberative,
    aggregate_heuristic,
    confidence_weighted_severity,
    high_confidence_consensus,
    parse_meta_output,
    plurality_category,
    render_meta_prompt,
    round_severity,
    run_meta,
    severity_range,
)

from conftest import make_record

CFG = AggregationConfig()

META_TEMPLATE = (
    "Excerpt (page ${page}): ${excerpt_quote}\n"
    "Juror verdicts:\n${juror_tuples}\n"
    "Scale:\n${severity_scale}\nCategories:\n${taxonomy_labels}\n"
)


def meta_handle(script) -> BackendHandle:
    return BackendHandle(
        backend=ScriptedBackend("meta", script),
        max_output_tokens=512,
        temperature=0.2,
    )


def meta_payload(severity=3, category="Narrative Framing", justification="synthesis", human_review=False, **extra):
    record = {
        "severity": severity,
        "category": category,
        "justification": justification,
        "human_review": human_review,
    }
    record.update(extra)
    return json.dumps(record)


class TestPrimitives:
    def test_severity_range(self, registry):
        record = make_record([(2, 0.5, "Narrative Framing"), (5, 0.5, "Narrative Framing")], registry)
        assert severity_range(record.verdicts) == 3

    def test_severity_range_empty(self):
        with pytest.raises(EmptyJury):
            severity_range([])

    def test_consensus_strictly_above_threshold(self, registry):
        # 0.7 is not strictly above the 0.7 threshold
        record = make_record(
            [(4, 0.7, "Narrative Framing"), (4, 0.7, "Narrative Framing")], registry
        )
        assert high_confidence_consensus(record.verdicts, 0.7) is None

    def test_consensus_agreement(self, registry):
        record = make_record(
            [(4, 0.9, "Narrative Framing"), (4, 0.8, "Narrative Framing"), (2, 0.3, "Narrative Framing")],
            registry,
        )
        assert high_confidence_consensus(record.verdicts, 0.7) == 4

    def test_consensus_disagreement(self, registry):
        record = make_record(
            [(4, 0.9, "Narrative Framing"), (5, 0.8, "Narrative Framing")], registry
        )
        assert high_confidence_consensus(record.verdicts, 0.7) is None

    def test_weighted_severity(self, registry):
        record = make_record(
            [(2, 0.5, "Narrative Framing"), (4, 1.0, "Narrative Framing")], registry
        )
        assert confidence_weighted_severity(record.verdicts) == pytest.approx((1.0 + 4.0) / 1.5)

    def test_weighted_severity_zero_total(self, registry):
        record = make_record(
            [(2, 0.0, "Narrative Framing"), (4, 0.0, "Narrative Framing")], registry
        )
        with pytest.raises(ZeroTotalConfidence):
            confidence_weighted_severity(record.verdicts)

    @pytest.mark.parametrize(
        "mean, expected",
        [
            (1.0, 1), (2.4, 2), (2.5, 2), (2.51, 3), (3.0, 3),
            (3.49, 3), (3.5, 3), (6.5, 6), (6.51, 7), (7.0, 7),
        ],
    )
    def test_round_severity_half_down(self, mean, expected):
        assert round_severity(mean) == expected

    def test_round_severity_out_of_scale(self):
        with pytest.raises(ValueError):
            round_severity(0.4)

    def test_plurality_by_summed_confidence(self, registry):
        record = make_record(
            [
                (3, 0.4, "Narrative Framing"),
                (3, 0.4, "Narrative Framing"),
                (3, 0.7, "Moral Loading"),
            ],
            registry,
        )
        assert plurality_category(record.verdicts).label == "Narrative Framing"

    def test_plurality_tie_broken_by_peak_confidence(self, registry):
        record = make_record(
            [
                (3, 0.5, "Narrative Framing"),
                (3, 0.3, "Narrative Framing"),
                (3, 0.8, "Moral Loading"),
            ],
            registry,
        )
        # sums tie at 0.8; Moral Loading has the higher single confidence
        assert plurality_category(record.verdicts).label == "Moral Loading"

    def test_plurality_full_tie_is_lexicographic(self, registry):
        record = make_record(
            [(3, 0.5, "Selection Bias"), (3, 0.5, "Moral Loading")], registry
        )
        assert plurality_category(record.verdicts).label == "Moral Loading"


class TestAggregationConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"confidence_threshold": 0.0},
            {"confidence_threshold": 1.0},
            {"divergence_threshold": 0},
            {"min_quorum": 0},
        ],
    )
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            AggregationConfig(**kwargs)


class TestAggregateHeuristic:
    def test_consensus_branch(self, registry):
        record = make_record(
            [
                (4, 0.9, "Narrative Framing"),
                (4, 0.8, "Narrative Framing"),
                (3, 0.5, "Narrative Framing"),
            ],
            registry,
        )
        verdict = aggregate_heuristic(record, CFG)
        assert verdict.severity == 4
        assert verdict.trace["branch"] == "consensus"
        assert verdict.human_review is False
        assert verdict.strategy is Strategy.HEURISTIC

    def test_weighted_branch_hand_computed(self, registry):
        # mean = (2*0.5 + 3*0.6 + 5*0.4) / 1.5 = 4.8 / 1.5 = 3.2 -> 3
        record = make_record(
            [
                (2, 0.5, "Narrative Framing"),
                (3, 0.6, "Narrative Framing"),
                (5, 0.4, "Narrative Framing"),
            ],
            registry,
        )
        verdict = aggregate_heuristic(record, CFG)
        assert verdict.severity == 3
        assert verdict.trace["branch"] == "weighted"
        assert verdict.trace["weighted_mean"] == pytest.approx(3.2)
        # range 3 > 1.5 -> review
        assert verdict.human_review is True
        assert verdict.trace["divergence"] is True

    def test_unweighted_branch_when_all_zero_confidence(self, registry):
        record = make_record(
            [(2, 0.0, "Narrative Framing"), (3, 0.0, "Narrative Framing"), (5, 0.0, "Narrative Framing")],
            registry,
        )
        verdict = aggregate_heuristic(record, CFG)
        # unweighted mean 10/3 = 3.33 -> 3
        assert verdict.severity == 3
        assert verdict.trace["branch"] == "unweighted"

    def test_below_quorum_flags_review(self, registry):
        record = make_record(
            [(3, 0.9, "Narrative Framing"), (3, 0.9, "Narrative Framing")],
            registry,
        )
        verdict = aggregate_heuristic(record, CFG)
        assert verdict.severity == 3
        assert verdict.human_review is True
        assert verdict.trace["below_quorum"] is True
        assert verdict.trace["divergence"] is False

    def test_exact_threshold_range_does_not_flag(self, registry):
        # integer range 1 is under the 1.5 threshold
        record = make_record(
            [(3, 0.5, "Narrative Framing"), (4, 0.5, "Narrative Framing"), (3, 0.5, "Narrative Framing")],
            registry,
        )
        assert aggregate_heuristic(record, CFG).human_review is False

    def test_range_two_flags(self, registry):
        record = make_record(
            [(3, 0.5, "Narrative Framing"), (5, 0.5, "Narrative Framing"), (4, 0.5, "Narrative Framing")],
            registry,
        )
        assert aggregate_heuristic(record, CFG).human_review is True

    def test_empty_jury_raises(self, registry):
        record = make_record([], registry, jurors_configured=5)
        with pytest.raises(EmptyJury):
            aggregate_heuristic(record, CFG)

    def test_determinism(self, registry):
        record = make_record(
            [(2, 0.5, "Narrative Framing"), (4, 0.6, "Moral Loading"), (3, 0.7, "Selection Bias")],
            registry,
        )
        first = aggregate_heuristic(record, CFG)
        second = aggregate_heuristic(record, CFG)
        assert first == second

    def test_justification_cites_jurors_and_flags(self, registry):
        record = make_record(
            [(2, 0.5, "Narrative Framing"), (5, 0.6, "Narrative Framing"), (3, 0.4, "Narrative Framing")],
            registry,
        )
        verdict = aggregate_heuristic(record, CFG)
        for juror in ("j1", "j2", "j3"):
            assert juror in verdict.justification
        assert "human review" in verdict.justification


class TestParseMetaOutput:
    def test_valid_payload(self, registry):
        payload = parse_meta_output(meta_payload(severity=5, human_review=True), registry)
        assert payload["severity"] == 5
        assert payload["human_review"] is True
        assert payload["category"].label == "Narrative Framing"

    def test_non_boolean_review_rejected(self, registry):
        from biasaudit.errors import VerdictValidationError

        with pytest.raises(VerdictValidationError):
            parse_meta_output(meta_payload(human_review="yes"), registry)

    def test_unknown_category_rejected(self, registry):
        from biasaudit.errors import VerdictValidationError

        with pytest.raises(VerdictValidationError):
            parse_meta_output(meta_payload(category="Not A Thing"), registry)


class TestAggregateDeliberative:
    def record(self, registry):
        return make_record(
            [
                (3, 0.6, "Narrative Framing"),
                (4, 0.5, "Moral Loading"),
                (3, 0.7, "Narrative Framing"),
            ],
            registry,
        )

    def test_success_adopts_meta_verdict(self, registry):
        handle = meta_handle([meta_payload(severity=6, category="Selection Bias", human_review=True)])
        verdict = aggregate_deliberative(self.record(registry), handle, META_TEMPLATE, registry, CFG)
        # the meta judge may adopt a minority position; its verdict stands
        assert verdict.severity == 6
        assert verdict.category.label == "Selection Bias"
        assert verdict.human_review is True
        assert verdict.strategy is Strategy.INDEPENDENT_DELIBERATION
        assert verdict.fallback is False

    def test_prompt_carries_all_juror_tuples(self, registry):
        handle = meta_handle([meta_payload()])
        record = self.record(registry)
        aggregate_deliberative(record, handle, META_TEMPLATE, registry, CFG)
        prompt = handle.backend.call_log[0].text_content()
        for verdict in record.verdicts:
            assert verdict.juror_id in prompt
            assert verdict.reasoning in prompt

    def test_exhaustion_falls_back_to_heuristic(self, registry):
        handle = meta_handle(["junk", "junk", "junk"])
        record = self.record(registry)
        verdict = aggregate_deliberative(record, handle, META_TEMPLATE, registry, CFG, max_attempts=3)
        expected = aggregate_heuristic(record, CFG)
        assert verdict.fallback is True
        assert verdict.severity == expected.severity
        assert verdict.category == expected.category
        assert verdict.strategy is Strategy.HEURISTIC
        assert verdict.trace["meta_attempts"] == 3
        assert "fallback_reason" in verdict.trace

    def test_backend_failure_falls_back(self, registry):
        handle = meta_handle([TransportError("down")])
        verdict = aggregate_deliberative(self.record(registry), handle, META_TEMPLATE, registry, CFG)
        assert verdict.fallback is True
        assert verdict.trace["fallback_reason"].startswith("backend:")

    def test_ledger_records_meta_stage(self, registry):
        ledger = CostLedger(PriceTable({"meta": BackendPrice.of(1, 1)}))
        handle = meta_handle([meta_payload()])
        aggregate_deliberative(self.record(registry), handle, META_TEMPLATE, registry, CFG, ledger=ledger)
        assert [e.stage for e in ledger.entries] == [Stage.META]


class TestRunMeta:
    def test_heuristic_needs_no_backend(self, registry):
        records = [
            make_record([(3, 0.8, "Narrative Framing")] * 3, registry),
        ]
        verdicts = run_meta(records, CFG)
        assert len(verdicts) == 1
        assert verdicts[0].severity == 3

    def test_empty_jury_records_skipped(self, registry):
        records = [
            make_record([(3, 0.8, "Narrative Framing")] * 3, registry),
            make_record([], registry, jurors_configured=5),
        ]
        verdicts = run_meta(records, CFG)
        assert len(verdicts) == 1

    def test_deliberative_requires_backend(self, registry):
        records = [make_record([(3, 0.8, "Narrative Framing")] * 3, registry)]
        cfg = AggregationConfig(strategy=Strategy.INDEPENDENT_DELIBERATION)
        with pytest.raises(ValueError):
            run_meta(records, cfg)

    def test_prompted_heuristic_keeps_heuristic_provenance(self, registry):
        records = [make_record([(3, 0.8, "Narrative Framing")] * 3, registry)]
        cfg = AggregationConfig(prompted_heuristic=True)
        handle = meta_handle([meta_payload(severity=3)])
        verdicts = run_meta(
            records, cfg, meta_handle=handle, template_text=META_TEMPLATE, registry=registry
        )
        assert verdicts[0].strategy is Strategy.HEURISTIC
        assert len(handle.backend.call_log) == 1


def test_render_meta_prompt_substitutes_fields(registry):
    record = make_record([(3, 0.6, "Narrative Framing")], registry)
    text = render_meta_prompt(META_TEMPLATE, record, registry, CFG)
    assert record.excerpt.quote in text
    assert '"severity": 3' in text
    assert "7 - Harmful" in text
