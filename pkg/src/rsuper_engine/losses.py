"""Report-derived loss terms and their composition.

Hard terms threshold the maps at ``tau`` exactly as written; soft terms
replace volumes by probability sums. Size and count always work on the
connected components of the thresholded whole-tumor map, so they carry no
gradient in either variant.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from typing import TYPE_CHECKING

import numpy as np

from rsuper_engine.components import ComponentSet, label_components
from rsuper_engine.errors import BothBatchesEmpty
from rsuper_engine.models import (
    CHANNELS,
    Cohort,
    CueSet,
    LossBreakdown,
    LossMetadata,
    LossWeights,
    Polarity,
    QuantCue,
    SizeMode,
    Substructure,
    Variant,
    compose_report_total,
)
from rsuper_engine.voxels import (
    LABEL_OF,
    AnatomyMasks,
    ProbMaps,
    VoxelGrid,
    threshold,
)

if TYPE_CHECKING:
    from rsuper_engine.config import EngineConfig

logger = logging.getLogger(__name__)

#: Probability clamp for the cross-entropy term.
CE_EPS = 1e-7
#: Soft-Dice smoothing added to numerator and denominator.
DICE_SMOOTH = 1.0


# ---------------------------------------------------------------------------
# Volumes and existence
# ---------------------------------------------------------------------------


def volume_hard(p: VoxelGrid, tau: float) -> float:
    """Number of voxels with ``p >= tau``."""
    return float(np.count_nonzero(p.data >= tau))


def volume_soft(p: VoxelGrid) -> float:
    return float(np.sum(p.data, dtype=np.float64))


def exist_loss(polarity: Polarity, certainty: float, v: float) -> float:
    if polarity == Polarity.PRESENT:
        return certainty * max(0.0, 1.0 - v)
    if polarity == Polarity.ABSENT:
        return certainty * v
    return 0.0


# ---------------------------------------------------------------------------
# Global terms: size and count
# ---------------------------------------------------------------------------


def reported_size(quant: QuantCue, mode: SizeMode) -> float | None:
    """Reported size of the largest lesion in the units of ``mode``.

    Volume mode treats the written dimensions as ellipsoid diameters. A
    two-axis measurement reuses its smaller axis as the third one, and a
    single diameter describes a sphere.
    """
    if not quant.has_size:
        return None
    if mode == SizeMode.MAX_EXTENT:
        return quant.d_max
    if quant.largest_dims_mm is not None:
        dims = list(quant.largest_dims_mm)
        if len(dims) == 2:
            dims.append(min(dims))
    else:
        dims = [quant.largest_diameter_mm] * 3
    a, b, c = dims
    return math.pi / 6.0 * a * b * c


def size_loss(
    quant: QuantCue, comps: ComponentSet, mode: SizeMode, *, one_sided: bool = False
) -> float:
    """Absolute error between the reported and the largest predicted size.

    Returns 0 without a size cue; with no predicted component the largest
    predicted size counts as 0. ``one_sided`` only penalises undershoot.
    """
    target = reported_size(quant, mode)
    if target is None:
        return 0.0
    diff = target - comps.largest_size(mode)
    return max(0.0, diff) if one_sided else abs(diff)


def count_loss(n_qual: int | None, comps: ComponentSet) -> float:
    if n_qual is None:
        return 0.0
    return float(max(0, n_qual - comps.count))


# ---------------------------------------------------------------------------
# Anatomical prior
# ---------------------------------------------------------------------------


def forbidden_mask(masks: AnatomyMasks, cohort: Cohort) -> VoxelGrid | None:
    """Compartment a cohort's tumor must stay out of (None when Unknown)."""
    if cohort == Cohort.MEN:
        return masks.parench
    if cohort == Cohort.MET:
        return masks.dural
    return None


def prior_loss(wt: VoxelGrid, masks: AnatomyMasks, cohort: Cohort) -> float:
    masks.require_geometry(wt)
    mask = forbidden_mask(masks, cohort)
    if mask is None:
        return 0.0
    return float(np.sum(wt.data.astype(np.float64) * mask.data))


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def _exist_terms(cues: CueSet, maps: ProbMaps, tau: float, variant: Variant) -> dict[Substructure, float]:
    terms: dict[Substructure, float] = {}
    for k in CHANNELS:
        grid = maps.channel(k)
        v = volume_soft(grid) if variant == Variant.SOFT else volume_hard(grid, tau)
        terms[k] = sum(exist_loss(c.polarity, c.certainty, v) for c in cues.cues_for(k))
    return terms


def report_loss(
    cues: CueSet,
    maps: ProbMaps,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
) -> LossBreakdown:
    """Itemized report loss for one case.

    Exist terms use every cue aligned to the class, so TC receives both its T1
    and T2 cues. Size and count are scaled by their own certainties.
    """
    masks.require_geometry(maps.et)
    wt = maps.wt
    comps = label_components(threshold(wt, cfg.tau), cfg.connectivity)
    quant = cues.quant

    exist = _exist_terms(cues, maps, cfg.tau, cfg.variant)
    size = quant.size_certainty * size_loss(
        quant, comps, cfg.size_mode, one_sided=cfg.size_one_sided
    )
    count = quant.count_certainty * count_loss(quant.min_count, comps)
    prior = prior_loss(wt, masks, cues.cohort.cohort)

    gradient_terms = ["exist", "prior"] if cfg.variant == Variant.SOFT else []
    return LossBreakdown(
        exist_per_class=exist,
        size=size,
        count=count,
        prior=prior,
        report_total=compose_report_total(exist, size, count, prior, weights),
        size_mode=cfg.size_mode,
        weights=weights,
        metadata=LossMetadata(
            tau=cfg.tau,
            connectivity=cfg.connectivity,
            variant=cfg.variant,
            gradient_terms=gradient_terms,
        ),
    )


# ---------------------------------------------------------------------------
# Fully supervised term and mixed batches
# ---------------------------------------------------------------------------


def seg_loss(pred: ProbMaps, truth: VoxelGrid) -> float:
    """Mean (1 - soft Dice) over ET/ED/TC plus voxel-mean cross-entropy.

    The background probability is ``1 - wt``.
    """
    pred.et.require_geometry(truth, "prediction and label volume")
    labels = np.rint(truth.data).astype(np.int64)

    dice_losses = []
    for k in CHANNELS:
        p = pred.channel(k).data.astype(np.float64)
        g = (labels == LABEL_OF[k]).astype(np.float64)
        dice = (2.0 * np.sum(p * g) + DICE_SMOOTH) / (np.sum(p) + np.sum(g) + DICE_SMOOTH)
        dice_losses.append(1.0 - dice)

    probs = np.stack(
        [
            1.0 - pred.wt.data,
            pred.tc.data.astype(np.float64),
            pred.ed.data.astype(np.float64),
            pred.et.data.astype(np.float64),
        ]
    )
    probs = np.clip(probs, CE_EPS, 1.0 - CE_EPS)
    # Label values index the stacked channels directly.
    picked = np.take_along_axis(probs, labels[np.newaxis], axis=0)[0]
    ce = float(-np.mean(np.log(picked)))
    return float(np.mean(dice_losses)) + ce


def total_loss(
    batch_masked: Sequence[tuple[ProbMaps, VoxelGrid]],
    batch_report: Sequence[tuple[ProbMaps, CueSet, AnatomyMasks]],
    weights: LossWeights,
    cfg: EngineConfig,
) -> float:
    """Mixed-batch objective: mean seg loss plus ``w_r`` times mean report loss.

    An empty batch contributes nothing.
    """
    if not batch_masked and not batch_report:
        raise BothBatchesEmpty("both the masked and the report batch are empty")
    total = 0.0
    if batch_masked:
        seg = [seg_loss(pred, truth) for pred, truth in batch_masked]
        total += math.fsum(seg) / len(seg)
    if batch_report:
        rep = [
            report_loss(cues, maps, masks, weights, cfg).report_total
            for maps, cues, masks in batch_report
        ]
        total += weights.w_r * math.fsum(rep) / len(rep)
    logger.debug(
        "total_loss over %d masked / %d report cases = %g",
        len(batch_masked),
        len(batch_report),
        total,
    )
    return total
