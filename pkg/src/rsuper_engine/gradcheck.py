"""Central finite-difference verification of the soft report-loss gradient."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from rsuper_engine.config import DEFAULT_SEED, EngineConfig
from rsuper_engine.errors import GradientCheckFailed
from rsuper_engine.fitter import LogitField, LossTerm, evaluate_soft, subset_name
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
from rsuper_engine.voxels import AnatomyMasks, VoxelGrid

logger = logging.getLogger(__name__)

CERTAINTIES = (1.0, 0.7, 0.5, 0.3)
LOGIT_OFFSETS = (-4.0, -2.0, 0.0)
#: Upper bound on configurations, as a multiple of the requested count.
MAX_CONFIG_FACTOR = 4
#: Every non-empty combination of the three loss terms.
TERM_SUBSETS: tuple[frozenset[LossTerm], ...] = tuple(
    frozenset(t for bit, t in enumerate(LossTerm) if mask >> bit & 1) for mask in range(1, 8)
)


@dataclass(frozen=True)
class Coordinate:
    config: int
    channel: int
    voxel: tuple[int, int, int]
    analytic: float
    numeric: float
    rel_error: float

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "channel": self.channel,
            "voxel": list(self.voxel),
            "analytic": self.analytic,
            "numeric": self.numeric,
            "rel_error": self.rel_error,
        }


@dataclass(frozen=True)
class GradcheckResult:
    n_configs: int
    n_checked: int
    n_requested: int
    n_skipped: int
    max_rel_error: float
    tolerance: float
    worst: Coordinate | None

    @property
    def passed(self) -> bool:
        return self.n_checked >= self.n_requested and self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_configs": self.n_configs,
            "n_checked": self.n_checked,
            "n_requested": self.n_requested,
            "n_skipped": self.n_skipped,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "worst": self.worst.to_dict() if self.worst else None,
        }

    def raise_for_failure(self) -> None:
        if self.passed:
            return
        w = self.worst
        if w is None or self.max_rel_error < self.tolerance:
            raise GradientCheckFailed(
                f"only {self.n_checked} of {self.n_requested} coordinates could be checked "
                f"({self.n_skipped} skipped)"
            )
        raise GradientCheckFailed(
            f"max relative error {self.max_rel_error:.3g} >= {self.tolerance:g} "
            f"at config {w.config}, channel {w.channel}, voxel {w.voxel} "
            f"(analytic {w.analytic:.6g}, numeric {w.numeric:.6g})"
        )


# ---------------------------------------------------------------------------
# Random configurations
# ---------------------------------------------------------------------------


def random_cues(rng: np.random.Generator) -> CueSet:
    qual = []
    for modality in Modality:
        polarity = Polarity(str(rng.choice([p.value for p in Polarity])))
        if polarity is Polarity.UNSTATED:
            qual.append(QualCue.unstated(modality))
            continue
        qual.append(
            QualCue(
                substructure=ALIGNMENT[modality],
                polarity=polarity,
                certainty=float(rng.choice(CERTAINTIES)),
                source_modality=modality,
            )
        )
    min_count = int(rng.integers(1, 5)) if rng.random() < 0.8 else None
    quant = QuantCue(
        min_count=min_count,
        count_certainty=float(rng.choice(CERTAINTIES)) if min_count else 0.0,
    )
    cohort = Cohort(str(rng.choice([c.value for c in Cohort])))
    evidence = [] if cohort is Cohort.UNKNOWN else ["random"]
    return CueSet(qual_cues=qual, quant=quant, cohort=CohortCue(cohort=cohort, evidence_spans=evidence))


def random_masks(rng: np.random.Generator, dims: tuple[int, int, int]) -> AnatomyMasks:
    nx, ny, nz = dims
    u = rng.random((nz, ny, nx))
    return AnatomyMasks(
        VoxelGrid((u < 0.3).astype(np.uint8)),
        VoxelGrid((u > 0.6).astype(np.uint8)),
    )


def random_field(rng: np.random.Generator, dims: tuple[int, int, int]) -> LogitField:
    nx, ny, nz = dims
    offset = float(rng.choice(LOGIT_OFFSETS))
    return LogitField(offset + 0.5 * rng.standard_normal((3, nz, ny, nx)))


# ---------------------------------------------------------------------------
# Check
# ---------------------------------------------------------------------------


def check_gradients(
    cfg: EngineConfig,
    *,
    seed: int = DEFAULT_SEED,
    n_coords: int = 1000,
    n_configs: int = 20,
    dims: tuple[int, int, int] = (6, 6, 6),
    h: float = 1e-4,
    tolerance: float = 1e-4,
    corrupt: bool = False,
) -> GradcheckResult:
    """Compare the analytic gradient with central differences on random cases.

    Configurations cycle through every loss-term subset and alternate the
    presence surrogate. Distinct coordinates are drawn per configuration; a
    coordinate is skipped when its analytic value is at most 1e-8 or too small
    to resolve above the rounding noise of the central difference, when its
    voxel's WT lies within 1e-3 of tau, or when the ±h perturbation changes the
    loss's discrete structure. A shortfall in one configuration is drawn from
    the following ones, adding configurations past ``n_configs`` if needed.
    ``corrupt`` scales the analytic gradient to provide a negative control.
    """
    if n_coords < 1:
        raise ValueError("n_coords must be at least 1")
    rng = np.random.default_rng(seed)

    checked = skipped = 0
    worst: Coordinate | None = None
    i = 0
    while (i < n_configs or checked < n_coords) and i < MAX_CONFIG_FACTOR * n_configs:
        surrogate = "peak" if i % 2 == 0 else "volume"
        case_cfg = cfg.model_copy(
            update={"fit": cfg.fit.model_copy(update={"presence_surrogate": surrogate})}
        )
        terms = TERM_SUBSETS[i % len(TERM_SUBSETS)]
        field = random_field(rng, dims)
        cues = random_cues(rng)
        masks = random_masks(rng, dims)
        weights = case_cfg.weights

        base = evaluate_soft(field, cues, masks, weights, case_cfg, terms)
        analytic = base.logit_gradient()
        if corrupt:
            analytic = analytic * 1.01
        wt = base.probs.sum(axis=0)
        # Rounding error of (L+ - L-) / 2h, as a gradient magnitude.
        noise = np.finfo(np.float64).eps * max(1.0, abs(base.loss)) / h
        eligible = (
            (np.abs(analytic) > 1e-8)
            & (np.abs(analytic) * tolerance >= 100 * noise)
            & (np.abs(wt - case_cfg.tau) >= 1e-3)[np.newaxis]
        )
        skipped += int(analytic.size - np.count_nonzero(eligible))

        quota = -(-(n_coords - checked) // max(1, n_configs - i))
        done = 0
        for flat in rng.permutation(np.flatnonzero(eligible)):
            if done == quota:
                break
            k, z, y, x = (int(c) for c in np.unravel_index(flat, analytic.shape))
            a = float(analytic[k, z, y, x])
            delta = np.zeros_like(field.logits)
            delta[k, z, y, x] = h
            plus = evaluate_soft(field.step(delta), cues, masks, weights, case_cfg, terms)
            minus = evaluate_soft(field.step(-delta), cues, masks, weights, case_cfg, terms)
            if plus.structure != base.structure or minus.structure != base.structure:
                skipped += 1
                continue
            numeric = (plus.loss - minus.loss) / (2 * h)
            rel = abs(a - numeric) / max(abs(a), abs(numeric))
            done += 1
            if worst is None or rel > worst.rel_error:
                worst = Coordinate(i, k, (x, y, z), a, numeric, rel)
        checked += done
        logger.debug(
            "Config %d (%s, %s): %d coordinates checked", i, subset_name(terms), surrogate, done
        )
        i += 1

    if checked < n_coords:
        logger.warning("Only %d of %d coordinates could be checked", checked, n_coords)
    result = GradcheckResult(
        n_configs=i,
        n_checked=checked,
        n_requested=n_coords,
        n_skipped=skipped,
        max_rel_error=worst.rel_error if worst else 0.0,
        tolerance=tolerance,
        worst=worst,
    )
    logger.info(
        "Gradient check: %d coordinates, max relative error %.3g", checked, result.max_rel_error
    )
    return result
