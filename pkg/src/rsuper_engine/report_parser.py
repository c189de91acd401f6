"""Deterministic rule-based parsing of hierarchical reports into cue sets.

Each modality section only constrains its aligned substructure (T1c -> ET,
FLAIR -> ED, T1/T2 -> TC). Quantitative cues and the cohort come from the
global section. Negation is NegEx-style: a trigger negates a head word in the
same sentence when no scope terminator sits between them and they are at
most ``negation.window`` words apart.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from rsuper_engine import get_lexicon
from rsuper_engine.errors import MalformedDocument, MalformedMeasurement
from rsuper_engine.lexicon import Lexicon
from rsuper_engine.models import (
    ALIGNMENT,
    CohortCue,
    Cohort,
    CueSet,
    Modality,
    Polarity,
    QualCue,
    QuantCue,
    ReportDocument,
)

logger = logging.getLogger(__name__)

# A '.' ends a sentence unless it sits between two digits.
_SENTENCE_SPLIT_RE = re.compile(r"\.(?!\d)|(?<!\d)\.|[;\n]")

# A decimal comma ("1,5 cm") reads like a decimal point.
_NUM = r"-?\d+(?:[.,]\d+)?"
_SIZE_RE = re.compile(
    r"(?P<approx>(?<!\w)(?:approximately|about|roughly|around)\s+|~\s*)?"
    rf"(?<![\w.,])(?P<a>{_NUM})\s*"
    rf"(?:[x×]\s*(?P<b>{_NUM})\s*(?:[x×]\s*(?P<c>{_NUM})\s*)?)?"
    r"(?P<unit>mm|cm)(?![a-z])",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class SizeReading:
    """One size phrase, in mm, with the axis order of the report."""

    dims_mm: tuple[float, ...]
    certainty: float
    approx: bool

    @property
    def max_mm(self) -> float:
        return max(self.dims_mm)


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT_RE.split(text) if s.strip()]


def _norm(phrase: str) -> str:
    return " ".join(phrase.lower().split())


# ---------------------------------------------------------------------------
# Qualitative cues
# ---------------------------------------------------------------------------


def _in_scope(gap: str, lexicon: Lexicon) -> bool:
    if lexicon.terminator.search(gap):
        return False
    return len(gap.split()) <= lexicon.negation.window


def _is_negated(sentence: str, head: re.Match[str], lexicon: Lexicon) -> bool:
    before = sentence[: head.start()]
    for trigger in lexicon.pre_negation.finditer(before):
        gap = before[trigger.end() :]
        if gap.startswith("-"):
            # A hyphenated prefix only negates the word it is attached to.
            if gap == "-":
                return True
            continue
        if _in_scope(gap, lexicon):
            return True
    after = sentence[head.end() :]
    for trigger in lexicon.post_negation.finditer(after):
        if _in_scope(after[: trigger.start()], lexicon):
            return True
    return False


def parse_modality_section(
    modality: Modality, text: str, lexicon: Lexicon | None = None
) -> list[QualCue]:
    """Extract the cue for the substructure aligned with ``modality``.

    Returns an empty list when the section never mentions a head word of that
    substructure. A head word that is negated somewhere in the section
    overrides its affirmed mentions; any other affirmed head word wins over
    the negations.
    """
    lexicon = lexicon or get_lexicon()
    target = ALIGNMENT[modality]
    pattern = lexicon.head_patterns.get(target)
    if pattern is None or not text.strip():
        return []

    fused = lexicon.fused_negations.get(target)
    present: dict[str, str] = {}
    absent: dict[str, str] = {}
    for sentence in split_sentences(text):
        for m in pattern.finditer(sentence):
            bucket = absent if _is_negated(sentence, m, lexicon) else present
            bucket.setdefault(_norm(m.group(0)), sentence)
        if fused is not None:
            for m in fused.finditer(sentence):
                absent.setdefault(_norm(m.group(0)), sentence)

    surviving = [head for head in present if head not in absent]
    if surviving:
        polarity, evidence = Polarity.PRESENT, present[surviving[0]]
    elif absent:
        polarity, evidence = Polarity.ABSENT, next(iter(absent.values()))
    else:
        return []

    return [
        QualCue(
            substructure=target,
            polarity=polarity,
            certainty=lexicon.certainty_of(evidence),
            source_modality=modality,
            evidence_span=evidence,
        )
    ]


# ---------------------------------------------------------------------------
# Quantitative cues
# ---------------------------------------------------------------------------


def _find_count(text: str, lexicon: Lexicon) -> tuple[int, str] | None:
    """Largest count and the sentence it came from; numerals beat count words."""
    sentences = split_sentences(text)
    for pattern in (lexicon.numeral_pattern, lexicon.count_word_pattern):
        best: tuple[int, str] | None = None
        for sentence in sentences:
            for m in pattern.finditer(sentence):
                phrase = m.group("num") if "num" in pattern.groupindex else m.group(0)
                value = lexicon.count_value(phrase)
                if value >= 1 and (best is None or value > best[0]):
                    best = (value, sentence)
        if best is not None:
            return best
    return None


def parse_count(text: str, lexicon: Lexicon | None = None) -> int | None:
    found = _find_count(text, lexicon or get_lexicon())
    return found[0] if found else None


def _to_mm(raw: str, unit: str, phrase: str) -> float:
    value = float(raw.replace(",", "."))
    if value <= 0:
        raise MalformedMeasurement(f"non-positive measurement in {phrase!r}")
    if unit.lower() == "cm":
        return round(value * 10, 6)
    return value


def parse_size(text: str, lexicon: Lexicon | None = None) -> SizeReading | None:
    """Return the size phrase with the largest maximal dimension, if any.

    An approximation word sets ``approx`` without lowering certainty.
    """
    lexicon = lexicon or get_lexicon()
    best: SizeReading | None = None
    for sentence in split_sentences(text):
        for m in _SIZE_RE.finditer(sentence):
            raw = [g for g in (m.group("a"), m.group("b"), m.group("c")) if g is not None]
            dims = tuple(_to_mm(v, m.group("unit"), m.group(0).strip()) for v in raw)
            reading = SizeReading(
                dims_mm=dims,
                certainty=lexicon.certainty_of(sentence),
                approx=m.group("approx") is not None,
            )
            if best is None or reading.max_mm > best.max_mm:
                best = reading
    return best


# ---------------------------------------------------------------------------
# Cohort
# ---------------------------------------------------------------------------


def classify_cohort(global_text: str, lexicon: Lexicon | None = None) -> CohortCue:
    """Vote extra-axial (MEN) against intra-axial (MET) location phrases.

    Negated phrases such as "no metastases" cast no vote.
    """
    lexicon = lexicon or get_lexicon()
    hits: dict[Cohort, list[str]] = {cohort: [] for cohort in lexicon.cohort_patterns}
    for sentence in split_sentences(global_text):
        for cohort, pattern in lexicon.cohort_patterns.items():
            hits[cohort].extend(
                m.group(0)
                for m in pattern.finditer(sentence)
                if not _is_negated(sentence, m, lexicon)
            )
    n_men, n_met = len(hits[Cohort.MEN]), len(hits[Cohort.MET])
    if n_men > n_met:
        return CohortCue(cohort=Cohort.MEN, evidence_spans=hits[Cohort.MEN])
    if n_met > n_men:
        return CohortCue(cohort=Cohort.MET, evidence_spans=hits[Cohort.MET])
    return CohortCue(cohort=Cohort.UNKNOWN)


# ---------------------------------------------------------------------------
# Whole report
# ---------------------------------------------------------------------------


def parse_report(doc: ReportDocument, lexicon: Lexicon | None = None) -> CueSet:
    """Parse a report into a CueSet with one qualitative cue per modality.

    Modalities without a finding get an Unstated cue. Size mentions inside
    modality sections repeat the global finding and are ignored.
    """
    if doc.is_empty():
        raise MalformedDocument("report has no non-empty section")
    lexicon = lexicon or get_lexicon()

    qual_cues: list[QualCue] = []
    for modality in Modality:
        text = doc.modality_texts.get(modality, "")
        cues = parse_modality_section(modality, text, lexicon)
        qual_cues.extend(cues or [QualCue.unstated(modality)])
        try:
            if parse_size(text, lexicon) is not None:
                logger.debug("Ignoring size mention in %s section", modality)
        except MalformedMeasurement:
            logger.debug("Ignoring malformed size mention in %s section", modality)

    size = parse_size(doc.global_text, lexicon)
    count = _find_count(doc.global_text, lexicon)
    quant = QuantCue(
        largest_dims_mm=size.dims_mm if size and len(size.dims_mm) > 1 else None,
        largest_diameter_mm=size.dims_mm[0] if size and len(size.dims_mm) == 1 else None,
        min_count=count[0] if count else None,
        approx=size.approx if size else False,
        size_certainty=size.certainty if size else 0.0,
        count_certainty=lexicon.certainty_of(count[1]) if count else 0.0,
    )
    return CueSet(
        qual_cues=qual_cues,
        quant=quant,
        cohort=classify_cohort(doc.global_text, lexicon),
    )
