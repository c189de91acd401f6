"""Domain models: report documents, cue sets, loss breakdowns and fit reports."""

from __future__ import annotations

import json
import re
from enum import StrEnum
from typing import Any, Self

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rsuper_engine.errors import MalformedDocument


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------


class Modality(StrEnum):
    T1 = "T1"
    T1c = "T1c"
    T2 = "T2"
    FLAIR = "FLAIR"


class Substructure(StrEnum):
    ET = "ET"
    ED = "ED"
    TC = "TC"
    WT = "WT"


class Polarity(StrEnum):
    PRESENT = "Present"
    ABSENT = "Absent"
    UNSTATED = "Unstated"


class Cohort(StrEnum):
    MEN = "MEN"
    MET = "MET"
    UNKNOWN = "Unknown"


class SizeMode(StrEnum):
    MAX_EXTENT = "MaxExtent"
    VOLUME = "Volume"


class Variant(StrEnum):
    HARD = "Hard"
    SOFT = "Soft"


#: Modality section -> the substructure its findings constrain.
ALIGNMENT: dict[Modality, Substructure] = {
    Modality.T1: Substructure.TC,
    Modality.T1c: Substructure.ET,
    Modality.T2: Substructure.TC,
    Modality.FLAIR: Substructure.ED,
}

#: The three directly predicted channels, in evaluation order.
CHANNELS: tuple[Substructure, ...] = (Substructure.ET, Substructure.ED, Substructure.TC)


# ---------------------------------------------------------------------------
# Report documents
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^\s*\[(GLOBAL|T1C|T1|T2|FLAIR)\]\s*$", re.IGNORECASE)

_HEADER_TO_MODALITY: dict[str, Modality] = {
    "T1": Modality.T1,
    "T1C": Modality.T1c,
    "T2": Modality.T2,
    "FLAIR": Modality.FLAIR,
}


class ReportDocument(BaseModel):
    """A hierarchical report: one global section plus up to four modality sections."""

    model_config = ConfigDict(frozen=True)

    global_text: str = ""
    modality_texts: dict[Modality, str] = Field(default_factory=dict)

    def is_empty(self) -> bool:
        if self.global_text.strip():
            return False
        return not any(t.strip() for t in self.modality_texts.values())

    @classmethod
    def from_text(cls, text: str) -> ReportDocument:
        """Split ``[GLOBAL]``/``[T1]``/``[T1C]``/``[T2]``/``[FLAIR]`` sections.

        Text ahead of the first header belongs to the global section, so a file
        without headers is read as all-global.
        """
        sections: dict[str, list[str]] = {}
        current = "GLOBAL"
        for line in text.splitlines():
            m = _HEADER_RE.match(line)
            if m:
                current = m.group(1).upper()
                sections.setdefault(current, [])
                continue
            sections.setdefault(current, []).append(line)

        global_text = "\n".join(sections.pop("GLOBAL", [])).strip()
        modality_texts = {
            _HEADER_TO_MODALITY[name]: "\n".join(lines).strip()
            for name, lines in sections.items()
        }
        return cls(global_text=global_text, modality_texts=modality_texts)

    def to_text(self) -> str:
        parts = [f"[GLOBAL]\n{self.global_text}"]
        for header, modality in _HEADER_TO_MODALITY.items():
            if modality in self.modality_texts:
                parts.append(f"[{header}]\n{self.modality_texts[modality]}")
        return "\n\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Cues
# ---------------------------------------------------------------------------


class QualCue(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    substructure: Substructure
    polarity: Polarity
    certainty: float = Field(ge=0.0, le=1.0)
    source_modality: Modality = Field(alias="modality")
    evidence_span: str = Field(default="", alias="evidence")

    @model_validator(mode="after")
    def _check_cue(self) -> Self:
        if self.substructure is Substructure.WT:
            raise ValueError("WT is derived and cannot be a qualitative cue target")
        if self.polarity is Polarity.UNSTATED and self.certainty != 0.0:
            raise ValueError("an Unstated cue must have certainty 0")
        return self

    @classmethod
    def unstated(cls, modality: Modality) -> QualCue:
        return cls(
            substructure=ALIGNMENT[modality],
            polarity=Polarity.UNSTATED,
            certainty=0.0,
            source_modality=modality,
            evidence_span="",
        )


class QuantCue(BaseModel):
    """Quantitative global findings: the largest lesion's size and a minimal count.

    ``largest_dims_mm`` keeps the axis order of the report and holds two or three
    entries; a single written diameter goes to ``largest_diameter_mm``.
    """

    model_config = ConfigDict(frozen=True)

    largest_dims_mm: tuple[float, ...] | None = None
    largest_diameter_mm: float | None = Field(default=None, gt=0.0)
    min_count: int | None = Field(default=None, ge=1)
    approx: bool = False
    size_certainty: float = Field(default=0.0, ge=0.0, le=1.0)
    count_certainty: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="before")
    @classmethod
    def _default_certainties(cls, data: Any) -> Any:
        # A cue that is set defaults to full certainty, an unset one to zero.
        if isinstance(data, dict):
            data = dict(data)
            has_size = (
                data.get("largest_dims_mm") is not None
                or data.get("largest_diameter_mm") is not None
            )
            data.setdefault("size_certainty", 1.0 if has_size else 0.0)
            data.setdefault("count_certainty", 1.0 if data.get("min_count") is not None else 0.0)
        return data

    @model_validator(mode="after")
    def _check_size(self) -> Self:
        if self.largest_dims_mm is not None:
            if self.largest_diameter_mm is not None:
                raise ValueError("set at most one of largest_dims_mm / largest_diameter_mm")
            if len(self.largest_dims_mm) not in (2, 3):
                raise ValueError("largest_dims_mm must hold two or three values")
            if any(d <= 0 for d in self.largest_dims_mm):
                raise ValueError("largest_dims_mm values must be positive")
        return self

    @property
    def has_size(self) -> bool:
        return self.largest_dims_mm is not None or self.largest_diameter_mm is not None

    @property
    def d_max(self) -> float | None:
        """Largest written dimension in mm."""
        if self.largest_dims_mm is not None:
            return max(self.largest_dims_mm)
        return self.largest_diameter_mm


class CohortCue(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    cohort: Cohort = Field(default=Cohort.UNKNOWN, alias="label")
    evidence_spans: list[str] = Field(default_factory=list, alias="evidence")

    @model_validator(mode="after")
    def _check_evidence(self) -> Self:
        if self.cohort is Cohort.UNKNOWN and self.evidence_spans:
            raise ValueError("an Unknown cohort carries no evidence")
        return self


class CueSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    qual_cues: list[QualCue] = Field(default_factory=list)
    quant: QuantCue = Field(default_factory=QuantCue)
    cohort: CohortCue = Field(default_factory=CohortCue)

    @model_validator(mode="after")
    def _check_cues(self) -> Self:
        seen: set[tuple[Substructure, Modality]] = set()
        for cue in self.qual_cues:
            if ALIGNMENT[cue.source_modality] is not cue.substructure:
                raise ValueError(
                    f"{cue.source_modality} findings cannot constrain {cue.substructure}"
                )
            key = (cue.substructure, cue.source_modality)
            if key in seen:
                raise ValueError(f"duplicate cue for {key[0]}/{key[1]}")
            seen.add(key)
        return self

    def cues_for(self, substructure: Substructure) -> list[QualCue]:
        return [c for c in self.qual_cues if c.substructure is substructure]


def cue_set_to_json(cues: CueSet) -> str:
    """Serialize with the fixed key order and aliases used on disk."""
    return json.dumps(cues.model_dump(mode="json", by_alias=True), indent=2) + "\n"


def cue_set_from_json(text: str) -> CueSet:
    try:
        return CueSet.model_validate_json(text)
    except ValidationError as e:
        raise MalformedDocument(f"invalid cue file: {e.errors()[0]['msg']}") from e


# ---------------------------------------------------------------------------
# Loss results
# ---------------------------------------------------------------------------


class LossWeights(BaseModel):
    w_r: float = Field(default=0.2, ge=0.0)
    w_size: float = Field(default=1.0, ge=0.0)
    w_count: float = Field(default=0.5, ge=0.0)
    w_prior: float = Field(default=0.2, ge=0.0)


class LossMetadata(BaseModel):
    tau: float
    connectivity: int
    variant: Variant
    #: Terms whose value flows through a differentiable path in this variant.
    gradient_terms: list[str] = Field(default_factory=list)


class LossBreakdown(BaseModel):
    exist_per_class: dict[Substructure, float]
    size: float
    count: float
    prior: float
    report_total: float
    size_mode: SizeMode
    weights: LossWeights
    metadata: LossMetadata

    def recompute_total(self) -> float:
        return compose_report_total(
            self.exist_per_class, self.size, self.count, self.prior, self.weights
        )


def compose_report_total(
    exist_per_class: dict[Substructure, float],
    size: float,
    count: float,
    prior: float,
    weights: LossWeights,
) -> float:
    """Weighted report total with a fixed summation order."""
    total = 0.0
    for k in CHANNELS:
        total += exist_per_class.get(k, 0.0)
    total += weights.w_size * size
    total += weights.w_count * count
    total += weights.w_prior * prior
    return total


# ---------------------------------------------------------------------------
# Fit results
# ---------------------------------------------------------------------------


class ConstraintStatus(BaseModel):
    exist_satisfied: dict[Substructure, bool]
    count_satisfied: bool
    #: Thresholded WT volume inside the cohort-forbidden compartment.
    prior_value: float
    prior_initial: float = 0.0
    prior_soft: float = 0.0
    prior_satisfied: bool = True

    @property
    def all_satisfied(self) -> bool:
        return (
            all(self.exist_satisfied.values())
            and self.count_satisfied
            and self.prior_satisfied
        )


class FitReport(BaseModel):
    iterations: int
    loss_trace: list[float]
    final_breakdown: LossBreakdown
    constraint_status: ConstraintStatus

    @model_validator(mode="after")
    def _check_trace(self) -> Self:
        if len(self.loss_trace) != self.iterations + 1:
            raise ValueError("loss_trace must hold iterations + 1 values")
        return self


def model_to_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json", by_alias=True), indent=2) + "\n"
