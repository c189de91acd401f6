"""Tests for the rule-based report parser."""

import re

import pytest

from rsuper_engine.errors import MalformedDocument, MalformedMeasurement
from rsuper_engine.lexicon import Lexicon
from rsuper_engine.models import (
    Cohort,
    Modality,
    Polarity,
    ReportDocument,
    Substructure,
    cue_set_to_json,
)
from rsuper_engine.report_parser import (
    classify_cohort,
    parse_count,
    parse_modality_section,
    parse_report,
    parse_size,
    split_sentences,
)

from tests.conftest import GOLDEN_DIR, SAMPLE_REPORT


# ---------------------------------------------------------------------------
# Sentences
# ---------------------------------------------------------------------------


def test_split_sentences_keeps_decimals():
    assert split_sentences("Mass of 2.5 cm. No edema; mild core\nEnd") == [
        "Mass of 2.5 cm",
        "No edema",
        "mild core",
        "End",
    ]


def test_split_sentences_drops_blanks():
    assert split_sentences("  .\n\n;  ") == []


# ---------------------------------------------------------------------------
# Modality sections
# ---------------------------------------------------------------------------


def test_present_cue_keeps_evidence():
    [cue] = parse_modality_section(Modality.T1c, "Avid enhancement. Nothing else.")
    assert cue.substructure == Substructure.ET
    assert cue.polarity == Polarity.PRESENT
    assert cue.certainty == 1.0
    assert cue.evidence_span == "Avid enhancement"


def test_absent_cue():
    [cue] = parse_modality_section(Modality.FLAIR, "No surrounding edema.")
    assert cue.polarity == Polarity.ABSENT
    assert cue.evidence_span == "No surrounding edema"


def test_section_only_constrains_aligned_substructure():
    assert parse_modality_section(Modality.T1c, "Surrounding edema.") == []


def test_empty_section():
    assert parse_modality_section(Modality.T2, "   ") == []


def test_negation_blocked_by_terminator():
    [cue] = parse_modality_section(Modality.T1c, "No mass, but there is enhancement.")
    assert cue.polarity == Polarity.PRESENT


def test_negation_window():
    text = "No change in size of the lesion or its enhancement."
    [cue] = parse_modality_section(Modality.T1c, text)
    assert cue.polarity == Polarity.PRESENT


def test_post_negation():
    [cue] = parse_modality_section(Modality.T1c, "Enhancement not identified.")
    assert cue.polarity == Polarity.ABSENT


def test_post_negation_after_colon():
    [cue] = parse_modality_section(Modality.T1c, "Enhancement: none.")
    assert cue.polarity == Polarity.ABSENT


@pytest.mark.parametrize(
    "text", ["Nonenhancing mass.", "Non-enhancing mass.", "Non enhancing mass."]
)
def test_negation_prefix_forms(text):
    [cue] = parse_modality_section(Modality.T1c, text)
    assert cue.substructure == Substructure.ET
    assert cue.polarity == Polarity.ABSENT


def test_fused_negation_keeps_other_affirmed_head():
    [cue] = parse_modality_section(Modality.T1c, "Nonenhancing core with an enhancing rim.")
    assert cue.polarity == Polarity.PRESENT


def test_negated_head_overrides_its_affirmation():
    [cue] = parse_modality_section(Modality.FLAIR, "Probably edema. No edema.")
    assert cue.polarity == Polarity.ABSENT
    assert cue.certainty == 1.0


def test_other_affirmed_head_survives_negation():
    [cue] = parse_modality_section(Modality.T2, "No necrosis. Heterogeneous core.")
    assert cue.polarity == Polarity.PRESENT
    assert cue.evidence_span == "Heterogeneous core"


def test_qualifier_lowers_certainty():
    [cue] = parse_modality_section(Modality.FLAIR, "Possible mild edema.")
    assert cue.certainty == 0.5


def test_custom_lexicon(lexicon):
    data = lexicon.model_dump(mode="json")
    data["certainty_qualifiers"]["subtle"] = 0.6
    custom = Lexicon.model_validate(data)
    [cue] = parse_modality_section(Modality.FLAIR, "Subtle edema.", custom)
    assert cue.certainty == 0.6


# ---------------------------------------------------------------------------
# Quantitative cues
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("A single lesion.", 1),
        ("Multiple lesions.", 2),
        ("Three lesions.", 3),
        ("7 enhancing nodules.", 7),
        ("Two lesions. Innumerable tiny foci.", 2),
        ("Lesion measuring 2 cm.", None),
        ("No count given.", None),
        ("In 2019 the tumor was resected.", None),
        ("12 lesions.", 12),
    ],
)
def test_parse_count(text, expected):
    assert parse_count(text) == expected


def test_parse_size_takes_largest():
    size = parse_size("Lesions of 8 mm and 1.4 cm.")
    assert size.dims_mm == (14.0,)
    assert size.max_mm == 14.0
    assert not size.approx


def test_parse_size_keeps_axis_order():
    size = parse_size("Measuring 1.2 x 3.4 x 2 cm.")
    assert size.dims_mm == (12.0, 34.0, 20.0)


def test_parse_size_approximation_keeps_certainty():
    size = parse_size("Approximately 12 mm.")
    assert size.approx
    assert size.certainty == 1.0


def test_parse_size_hedged():
    assert parse_size("Possibly 12 mm.").certainty == 0.5


@pytest.mark.parametrize(
    ("text", "expected"),
    [("Lesion of 1,5 cm.", (15.0,)), ("Measuring 2,1 x 1,8 cm.", (21.0, 18.0))],
)
def test_parse_size_decimal_comma(text, expected):
    assert parse_size(text).dims_mm == expected


def test_parse_size_none():
    assert parse_size("No measurement.") is None


@pytest.mark.parametrize("text", ["Lesion of 0 mm.", "Lesion of 3 x 0 mm.", "Lesion of -2 cm."])
def test_parse_size_rejects_non_positive(text):
    with pytest.raises(MalformedMeasurement):
        parse_size(text)


# ---------------------------------------------------------------------------
# Cohort
# ---------------------------------------------------------------------------


def test_cohort_men():
    cue = classify_cohort("Dural-based lesion along the falx.")
    assert cue.cohort == Cohort.MEN
    assert cue.evidence_spans == ["Dural-based", "falx"]


def test_cohort_met():
    cue = classify_cohort("Parenchymal ring-enhancing lesion.")
    assert cue.cohort == Cohort.MET
    assert cue.evidence_spans == ["Parenchymal", "ring-enhancing"]


def test_cohort_ignores_negated_phrases():
    cue = classify_cohort("No metastases. Dural-based extra-axial lesion.")
    assert cue.cohort == Cohort.MEN
    assert cue.evidence_spans == ["Dural-based", "extra-axial"]
    assert classify_cohort("No metastases.").cohort == Cohort.UNKNOWN


def test_cohort_hyphenated_negation_stays_local():
    cue = classify_cohort("Non-enhancing parenchymal lesion.")
    assert cue.cohort == Cohort.MET
    assert cue.evidence_spans == ["parenchymal"]


def test_cohort_tie_is_unknown():
    cue = classify_cohort("Falx lesion with parenchymal extension.")
    assert cue.cohort == Cohort.UNKNOWN
    assert cue.evidence_spans == []


# ---------------------------------------------------------------------------
# Whole reports
# ---------------------------------------------------------------------------


def test_parse_report_emits_one_cue_per_modality():
    cues = parse_report(ReportDocument.from_text("[T1C]\nEnhancement."))
    assert [c.source_modality for c in cues.qual_cues] == list(Modality)
    assert [c.polarity for c in cues.qual_cues] == [
        Polarity.UNSTATED,
        Polarity.PRESENT,
        Polarity.UNSTATED,
        Polarity.UNSTATED,
    ]
    assert cues.quant.min_count is None
    assert not cues.quant.has_size
    assert cues.cohort.cohort == Cohort.UNKNOWN


def test_parse_report_empty():
    with pytest.raises(MalformedDocument):
        parse_report(ReportDocument.from_text("[GLOBAL]\n\n[T1]\n  \n"))


def test_parse_report_ignores_modality_sizes():
    doc = ReportDocument.from_text("[GLOBAL]\nSingle lesion.\n[T1C]\nEnhancing 15 mm lesion.")
    cues = parse_report(doc)
    assert cues.quant.min_count == 1
    assert not cues.quant.has_size


def test_parse_report_tolerates_bad_modality_size():
    doc = ReportDocument.from_text("[GLOBAL]\nSingle lesion.\n[T1C]\nEnhancing 0 mm focus.")
    assert parse_report(doc).qual_cues[1].polarity == Polarity.PRESENT


def test_parse_report_rejects_bad_global_size():
    with pytest.raises(MalformedMeasurement):
        parse_report(ReportDocument.from_text("Lesion of 0 mm."))


def test_parse_report_diameter_vs_dims():
    one = parse_report(ReportDocument.from_text("Lesion of 12 mm."))
    assert one.quant.largest_diameter_mm == 12.0
    assert one.quant.largest_dims_mm is None
    two = parse_report(ReportDocument.from_text("Lesion of 12 x 10 mm."))
    assert two.quant.largest_dims_mm == (12.0, 10.0)
    assert two.quant.largest_diameter_mm is None


def test_sample_report_matches_golden():
    doc = ReportDocument.from_text(SAMPLE_REPORT.read_text(encoding="utf-8"))
    expected = (GOLDEN_DIR / "sample_report.json").read_text(encoding="utf-8")
    assert cue_set_to_json(parse_report(doc)) == expected


def test_parse_report_is_deterministic():
    doc = ReportDocument.from_text(SAMPLE_REPORT.read_text(encoding="utf-8"))
    assert cue_set_to_json(parse_report(doc)) == cue_set_to_json(parse_report(doc))


def test_parse_report_ignores_case_and_whitespace():
    text = SAMPLE_REPORT.read_text(encoding="utf-8")
    variants = [
        text.upper(),
        text.lower(),
        re.sub(r"[ \t]+", "  \t ", text),
        text.replace("\n", "\n\n"),
    ]
    expected = parse_report(ReportDocument.from_text(text))
    for variant in variants:
        cues = parse_report(ReportDocument.from_text(variant))
        assert summary_of(cues) == summary_of(expected)


def summary_of(cues):
    return (
        [(c.source_modality, c.polarity, c.certainty) for c in cues.qual_cues],
        cues.quant.min_count,
        cues.quant.largest_dims_mm,
        cues.quant.largest_diameter_mm,
        cues.quant.approx,
        cues.cohort.cohort,
        [span.lower() for span in cues.cohort.evidence_spans],
    )
