import pytest
from hypothesis import given, strategies as st

from biasaudit.domain import (
    Attribution,
    FinalVerdict,
    SEVERITY_SCALE,
    Strategy,
    TaxonomyDomain,
    TaxonomyRegistry,
    severity_label,
    severity_scale_text,
    severity_score,
    validate_juror_verdict,
)
from biasaudit.errors import TaxonomyConfigError, UnknownCategory, VerdictValidationError


class TestSeverityScale:
    def test_seven_labels_in_order(self):
        assert len(SEVERITY_SCALE) == 7
        assert [s.score for s in SEVERITY_SCALE] == list(range(1, 8))
        assert [s.name for s in SEVERITY_SCALE] == [
            "Neutral", "Negligible", "Minor", "Moderate", "Significant", "Severe", "Harmful",
        ]

    @pytest.mark.parametrize("value", [1, 4, 7])
    def test_valid_scores(self, value):
        assert severity_score(value) == value

    @pytest.mark.parametrize("value", [0, 8, -1, 3.5, "3", None, True, False])
    def test_invalid_scores(self, value):
        with pytest.raises(ValueError):
            severity_score(value)

    def test_label_lookup(self):
        assert severity_label(1).name == "Neutral"
        assert severity_label(7).name == "Harmful"

    def test_scale_text_lists_every_level(self):
        text = severity_scale_text()
        for label in SEVERITY_SCALE:
            assert f"{label.score} - {label.name}" in text


class TestAttribution:
    def test_parse_exact_labels(self):
        assert Attribution.parse("Textbook Narrative") is Attribution.TEXTBOOK_NARRATIVE
        assert Attribution.parse("Primary Source Usage") is Attribution.PRIMARY_SOURCE_USAGE

    def test_parse_trims_whitespace(self):
        assert Attribution.parse("  Textbook Narrative ") is Attribution.TEXTBOOK_NARRATIVE

    def test_parse_passthrough(self):
        assert Attribution.parse(Attribution.PRIMARY_SOURCE_USAGE) is Attribution.PRIMARY_SOURCE_USAGE

    @pytest.mark.parametrize("value", ["textbook narrative", "Narrative", "", None, 3])
    def test_parse_rejects(self, value):
        with pytest.raises(ValueError):
            Attribution.parse(value)


class TestTaxonomyRegistry:
    def test_default_registry_has_fifteen_labels(self, registry):
        assert len(registry.labels()) == 15
        assert len(set(registry.labels())) == 15

    def test_four_domains_all_populated(self, registry):
        domains = {c.domain for c in registry.categories()}
        assert domains == set(TaxonomyDomain)

    def test_lookup_trims_whitespace(self, registry):
        label = registry.labels()[0]
        assert registry.lookup(f"  {label} ").label == label

    def test_lookup_is_case_sensitive(self, registry):
        label = registry.labels()[0]
        with pytest.raises(UnknownCategory):
            registry.lookup(label.upper() if label != label.upper() else label.lower())

    def test_unknown_label_raises(self, registry):
        with pytest.raises(UnknownCategory):
            registry.lookup("Completely Made Up")
        assert registry.get("Completely Made Up") is None

    def test_wrong_count_fails_closed(self):
        cats = [
            {"label": f"Label {i}", "domain": TaxonomyDomain.SOURCE_HANDLING.value}
            for i in range(14)
        ]
        with pytest.raises(TaxonomyConfigError):
            TaxonomyRegistry.from_mapping({"categories": cats})

    def test_duplicate_labels_fail_closed(self):
        cats = [
            {"label": "Same", "domain": TaxonomyDomain.SOURCE_HANDLING.value}
            for _ in range(15)
        ]
        with pytest.raises(TaxonomyConfigError):
            TaxonomyRegistry.from_mapping({"categories": cats})

    def test_alias_resolves_to_target(self, registry):
        # the shipped registry carries at least one alias
        assert registry.lookup("Omission/Underdevelopment").label == "Omission / Underdevelopment"
        assert registry.lookup("National/Cultural Centering").label == "National or Cultural Centering"

    def test_alias_to_unknown_target_fails(self):
        cats = [
            {"label": f"Label {i}", "domain": TaxonomyDomain.SOURCE_HANDLING.value}
            for i in range(15)
        ]
        with pytest.raises(TaxonomyConfigError):
            TaxonomyRegistry.from_mapping(
                {"categories": cats, "aliases": {"X": "Not A Label"}}
            )

    def test_from_file(self, registry, tmp_path):
        import yaml

        data = {
            "categories": [
                {"label": c.label, "domain": c.domain.value} for c in registry.categories()
            ]
        }
        path = tmp_path / "taxonomy.yaml"
        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        loaded = TaxonomyRegistry.from_file(path)
        assert loaded.labels() == registry.labels()


class TestValidateJurorVerdict:
    def good(self, **overrides):
        raw = {
            "attribution": "Textbook Narrative",
            "category": "Narrative Framing",
            "severity": 4,
            "confidence": 0.75,
            "reasoning": "loaded language",
        }
        raw.update(overrides)
        return raw

    def test_valid_record(self, registry):
        verdict = validate_juror_verdict(self.good(), registry, juror_id="j1")
        assert verdict.juror_id == "j1"
        assert verdict.severity == 4
        assert verdict.confidence == 0.75
        assert verdict.category.label == "Narrative Framing"

    def test_integral_float_severity_accepted(self, registry):
        # JSON round-trips may widen ints to floats
        verdict = validate_juror_verdict(self.good(severity=4.0), registry)
        assert verdict.severity == 4

    def test_fractional_severity_rejected(self, registry):
        with pytest.raises(VerdictValidationError):
            validate_juror_verdict(self.good(severity=4.5), registry)

    def test_boolean_severity_rejected(self, registry):
        with pytest.raises(VerdictValidationError):
            validate_juror_verdict(self.good(severity=True), registry)

    def test_confidence_bounds(self, registry):
        assert validate_juror_verdict(self.good(confidence=0), registry).confidence == 0.0
        assert validate_juror_verdict(self.good(confidence=1), registry).confidence == 1.0
        with pytest.raises(VerdictValidationError):
            validate_juror_verdict(self.good(confidence=1.01), registry)

    def test_all_issues_collected(self, registry):
        raw = {
            "attribution": "nope",
            "category": "nope",
            "severity": 9,
            "confidence": 2.0,
            "reasoning": "   ",
        }
        with pytest.raises(VerdictValidationError) as err:
            validate_juror_verdict(raw, registry)
        codes = {(i.code, i.field) for i in err.value.issues}
        assert codes == {
            ("invalid_value", "attribution"),
            ("unknown_category", "category"),
            ("out_of_range", "severity"),
            ("out_of_range", "confidence"),
            ("empty_reasoning", "reasoning"),
        }

    def test_missing_fields_all_reported(self, registry):
        with pytest.raises(VerdictValidationError) as err:
            validate_juror_verdict({}, registry)
        assert {i.field for i in err.value.issues} == {
            "attribution", "category", "severity", "confidence", "reasoning",
        }

    @given(
        severity=st.integers(min_value=1, max_value=7),
        confidence=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    )
    def test_valid_range_always_accepted(self, severity, confidence):
        registry = TaxonomyRegistry.default()
        verdict = validate_juror_verdict(
            self.good(severity=severity, confidence=confidence), registry
        )
        assert verdict.severity == severity
        assert verdict.confidence == pytest.approx(confidence)


class TestFinalVerdict:
    def test_round_trip(self, registry):
        verdict = FinalVerdict(
            excerpt_id="doc1-b1-e1",
            severity=5,
            category=registry.lookup("Selection Bias"),
            justification="one-sided narrative",
            human_review=True,
            strategy=Strategy.HEURISTIC,
            juror_count_valid=4,
            fallback=True,
            trace={"branch": "weighted"},
        )
        loaded = FinalVerdict.from_dict(verdict.to_dict(), registry)
        assert loaded == verdict

    def test_invalid_severity_rejected(self, registry):
        with pytest.raises(ValueError):
            FinalVerdict(
                excerpt_id="x",
                severity=0,
                category=registry.lookup("Selection Bias"),
                justification="j",
                human_review=False,
                strategy=Strategy.HEURISTIC,
                juror_count_valid=1,
            )
