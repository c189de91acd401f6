"""Phrase lexicon driving the rule-based report parser."""

from __future__ import annotations

import json
import re
from functools import cached_property
from importlib.resources import files
from pathlib import Path
from typing import Self

from pydantic import BaseModel, Field, ValidationError, model_validator

from rsuper_engine.errors import GridIOError, MalformedDocument
from rsuper_engine.models import Cohort, Substructure


def phrase_pattern(phrases: list[str], *, hyphen_is_boundary: bool = True) -> re.Pattern[str]:
    """Compile an alternation of phrases, longest first, matching whole words.

    Runs of whitespace inside a phrase match any whitespace. With
    ``hyphen_is_boundary`` a hyphen may delimit a phrase, so ``enhancing``
    matches inside ``non-enhancing``.
    """
    alts = []
    for phrase in sorted(set(phrases), key=lambda p: (-len(p), p)):
        alts.append(r"\s+".join(re.escape(tok) for tok in phrase.split()))
    edge = r"\w" if hyphen_is_boundary else r"[\w-]"
    return re.compile(rf"(?<!{edge})(?:{'|'.join(alts)})(?!{edge})", re.IGNORECASE)


class NegationRules(BaseModel):
    pre: list[str]
    post: list[str]
    terminators: list[str]
    #: Negation prefixes glued onto a head word, as in "nonenhancing".
    fused_prefixes: list[str] = Field(default_factory=list)
    #: Maximum number of words between a trigger and the head it negates.
    window: int = Field(default=5, ge=0)


class CohortPhrases(BaseModel):
    MEN: list[str]
    MET: list[str]


class Lexicon(BaseModel):
    heads: dict[Substructure, list[str]]
    negation: NegationRules
    certainty_qualifiers: dict[str, float]
    count_words: dict[str, int]
    number_words: dict[str, int]
    count_nouns: list[str]
    cohort: CohortPhrases

    @model_validator(mode="after")
    def _check_values(self) -> Self:
        for word, value in self.certainty_qualifiers.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"certainty for {word!r} must lie in [0, 1]")
        for word, value in {**self.count_words, **self.number_words}.items():
            if value < 1:
                raise ValueError(f"count for {word!r} must be at least 1")
        if Substructure.WT in self.heads:
            raise ValueError("WT has no head words")
        return self

    # -- compiled patterns ---------------------------------------------------

    @cached_property
    def head_patterns(self) -> dict[Substructure, re.Pattern[str]]:
        return {k: phrase_pattern(v) for k, v in self.heads.items() if v}

    @cached_property
    def fused_negations(self) -> dict[Substructure, re.Pattern[str]]:
        prefixes = self.negation.fused_prefixes
        return {
            k: phrase_pattern([p + h for p in prefixes for h in v])
            for k, v in self.heads.items()
            if v and prefixes
        }

    @cached_property
    def pre_negation(self) -> re.Pattern[str]:
        return phrase_pattern(self.negation.pre)

    @cached_property
    def post_negation(self) -> re.Pattern[str]:
        return phrase_pattern(self.negation.post)

    @cached_property
    def terminator(self) -> re.Pattern[str]:
        words = [t for t in self.negation.terminators if t.isalnum()]
        marks = [re.escape(t) for t in self.negation.terminators if not t.isalnum()]
        parts = [phrase_pattern(words).pattern] if words else []
        parts.extend(marks)
        return re.compile("|".join(parts), re.IGNORECASE)

    @cached_property
    def qualifier_pattern(self) -> re.Pattern[str]:
        return phrase_pattern(list(self.certainty_qualifiers))

    @cached_property
    def count_word_pattern(self) -> re.Pattern[str]:
        return phrase_pattern(list(self.count_words))

    @cached_property
    def numeral_pattern(self) -> re.Pattern[str]:
        """A digit or number word followed, within two words, by a lesion noun.

        Numerals have at most two digits, so a year is never read as a count.
        """
        number = phrase_pattern(list(self.number_words)).pattern
        noun = phrase_pattern(self.count_nouns).pattern
        return re.compile(
            rf"(?P<num>(?<![\w.])\d{{1,2}}(?![\w.])|{number})\s+"
            rf"(?:(?!(?:of|mm|cm)\b)[a-z][\w-]*\s+){{0,2}}{noun}",
            re.IGNORECASE,
        )

    @cached_property
    def cohort_patterns(self) -> dict[Cohort, re.Pattern[str]]:
        return {
            Cohort.MEN: phrase_pattern(self.cohort.MEN, hyphen_is_boundary=False),
            Cohort.MET: phrase_pattern(self.cohort.MET, hyphen_is_boundary=False),
        }

    # -- lookups -------------------------------------------------------------

    def certainty_of(self, text: str) -> float:
        """Minimum certainty over qualifiers in ``text``; 1.0 when none occur."""
        values = [
            self.certainty_qualifiers[_norm(m.group(0))]
            for m in self.qualifier_pattern.finditer(text)
        ]
        return min(values, default=1.0)

    def count_value(self, phrase: str) -> int:
        key = _norm(phrase)
        if key.isdigit():
            return int(key)
        if key in self.number_words:
            return self.number_words[key]
        return self.count_words[key]


def _norm(phrase: str) -> str:
    return " ".join(phrase.lower().split())


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_lexicon(path: Path | str | None = None) -> Lexicon:
    """Load a lexicon file, or the bundled default when ``path`` is None."""
    if path is None:
        raw = (files("rsuper_engine") / "data" / "lexicon.json").read_text(encoding="utf-8")
        source = "bundled lexicon"
    else:
        p = Path(path)
        try:
            raw = p.read_text(encoding="utf-8")
        except OSError as e:
            raise GridIOError(f"cannot read lexicon {p}: {e.strerror}") from e
        source = str(p)
    try:
        return Lexicon.model_validate(json.loads(raw))
    except (json.JSONDecodeError, ValidationError) as e:
        raise MalformedDocument(f"invalid lexicon {source}: {e}") from e
