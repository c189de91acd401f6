"""Shared test fixtures."""

from __future__ import annotations

import os
from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

from rsuper_engine import get_lexicon
from rsuper_engine.config import EngineConfig
from rsuper_engine.lexicon import Lexicon
from rsuper_engine.models import (
    ALIGNMENT,
    Cohort,
    CohortCue,
    CueSet,
    Modality,
    Polarity,
    QualCue,
    QuantCue,
)
from rsuper_engine.voxels import AnatomyMasks, ProbMaps, VoxelGrid

GOLDEN_DIR = Path(__file__).parent / "golden"
SAMPLE_REPORT = Path(str(files("rsuper_engine") / "data" / "sample_report.txt"))

#: Suite-scale tests (full fits, ablation) only run with RSUPER_RUN_SLOW set.
slow = pytest.mark.skipif(
    not os.environ.get("RSUPER_RUN_SLOW"),
    reason="RSUPER_RUN_SLOW not set",
)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def qual(
    modality: Modality,
    polarity: Polarity = Polarity.PRESENT,
    certainty: float = 1.0,
) -> QualCue:
    return QualCue(
        substructure=ALIGNMENT[modality],
        polarity=polarity,
        certainty=certainty,
        source_modality=modality,
    )


def cue_set(
    *qual_cues: QualCue,
    cohort: Cohort = Cohort.UNKNOWN,
    **quant: object,
) -> CueSet:
    evidence = [] if cohort is Cohort.UNKNOWN else ["test"]
    return CueSet(
        qual_cues=list(qual_cues),
        quant=QuantCue(**quant),
        cohort=CohortCue(cohort=cohort, evidence_spans=evidence),
    )


def grid(shape: tuple[int, int, int] = (4, 4, 4), fill: float = 0.0) -> np.ndarray:
    """Array for dims ``(nx, ny, nz)`` in storage order."""
    nx, ny, nz = shape
    return np.full((nz, ny, nx), fill, dtype=np.float64)


def maps_from(et: np.ndarray, ed: np.ndarray | None = None, tc: np.ndarray | None = None) -> ProbMaps:
    zeros = np.zeros_like(et)
    return ProbMaps.from_arrays(et, zeros if ed is None else ed, zeros if tc is None else tc)


def empty_masks(data: np.ndarray) -> AnatomyMasks:
    return AnatomyMasks.empty_like(VoxelGrid(data))


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    for key in list(os.environ):
        if key.startswith("RSUPER_") and key != "RSUPER_RUN_SLOW":
            monkeypatch.delenv(key)


@pytest.fixture
def cfg() -> EngineConfig:
    return EngineConfig()


@pytest.fixture
def lexicon() -> Lexicon:
    return get_lexicon()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)
