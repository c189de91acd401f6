"""Differentiable report loss over a logit field, plain gradient descent and ablation.

The field carries ET/ED/TC logits per voxel; background is pinned at logit 0
and probabilities come from a per-voxel softmax, so the channels always sum
to at most 1. The soft loss mirrors the report loss with smooth surrogates:

* absence: ``λ·Σ p_k``
* presence: ``λ·max(0, 1 - max_x p_k / (tau + margin))`` (``peak``) or
  ``λ·max(0, 1 - Σ p_k)`` (``volume``)
* count: ``w_count·λc·max(0, N - soft_count)`` where ``soft_count`` sums
  ``min(1, mass)`` over the thresholded WT components plus the WT of
  ``N - |C|`` seed voxels that are not adjacent to any component
* prior: ``w_prior·Σ wt·M_forbidden``

The size term has no smooth counterpart and is left out of the soft loss.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import StrEnum
from functools import partial
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from rsuper_engine.components import label_components
from rsuper_engine.config import DEFAULT_SEED
from rsuper_engine.errors import DivergenceDetected
from rsuper_engine.losses import forbidden_mask, report_loss, volume_hard
from rsuper_engine.models import (
    CHANNELS,
    ConstraintStatus,
    CueSet,
    FitReport,
    LossWeights,
    Polarity,
    Substructure,
)
from rsuper_engine.phantom import PhantomSpec, generate
from rsuper_engine.report_parser import parse_report
from rsuper_engine.voxels import LABEL_OF, AnatomyMasks, ProbMaps, VoxelGrid

if TYPE_CHECKING:
    from rsuper_engine.config import EngineConfig

logger = logging.getLogger(__name__)

#: Per-step loss increase tolerated before a step is reported as non-descending.
DESCENT_TOLERANCE = 1e-9


class LossTerm(StrEnum):
    EXIST = "exist"
    GLOBAL = "global"
    PRIOR = "prior"


ALL_TERMS: frozenset[LossTerm] = frozenset(LossTerm)

#: Cumulative ablation rows, starting from the report-free baseline.
ABLATION_SUBSETS: tuple[frozenset[LossTerm], ...] = (
    frozenset(),
    frozenset({LossTerm.EXIST}),
    frozenset({LossTerm.EXIST, LossTerm.GLOBAL}),
    ALL_TERMS,
)


def subset_name(terms: Iterable[LossTerm]) -> str:
    chosen = set(terms)
    return "+".join(t.value for t in LossTerm if t in chosen) or "none"


def parse_subset(name: str) -> frozenset[LossTerm]:
    if name == "none":
        return frozenset()
    return frozenset(LossTerm(part) for part in name.split("+"))


# ---------------------------------------------------------------------------
# LogitField
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LogitField:
    """ET/ED/TC logits, shape ``(3, nz, ny, nx)``."""

    logits: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.array(self.logits, dtype=np.float64, copy=True)
        if arr.ndim != 4 or arr.shape[0] != len(CHANNELS):
            raise ValueError(f"logits must have shape (3, nz, ny, nx), got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "logits", arr)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @classmethod
    def uniform(
        cls,
        dims: tuple[int, int, int],
        spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
        value: float = -2.0,
        jitter: float = 0.01,
        seed: int = DEFAULT_SEED,
    ) -> LogitField:
        """Constant logits plus seeded Gaussian jitter that breaks argmax ties."""
        nx, ny, nz = dims
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((len(CHANNELS), nz, ny, nx))
        return cls(value + jitter * noise, spacing_mm)

    @classmethod
    def from_labels(cls, labels: VoxelGrid, magnitude: float = 8.0) -> LogitField:
        """``+magnitude`` on each voxel's labelled channel, ``-magnitude`` elsewhere."""
        lab = np.rint(labels.data).astype(np.int64)
        logits = np.stack(
            [np.where(lab == LABEL_OF[k], magnitude, -magnitude) for k in CHANNELS]
        )
        return cls(logits, labels.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        _, nz, ny, nx = self.logits.shape
        return nx, ny, nz

    def probs(self) -> np.ndarray:
        m = np.maximum(0.0, self.logits.max(axis=0))
        e = np.exp(self.logits - m)
        return e / (np.exp(-m) + e.sum(axis=0))

    def to_probmaps(self) -> ProbMaps:
        p = self.probs()
        return ProbMaps.from_arrays(p[0], p[1], p[2], self.spacing_mm)

    def grid_like(self, data: np.ndarray) -> VoxelGrid:
        return VoxelGrid(data, self.spacing_mm)

    def step(self, delta: np.ndarray) -> LogitField:
        return LogitField(self.logits + delta, self.spacing_mm)


# ---------------------------------------------------------------------------
# Soft loss and gradient
# ---------------------------------------------------------------------------


@dataclass
class SoftEvaluation:
    loss: float
    #: dL/dp for the ET/ED/TC probabilities.
    grad_p: np.ndarray
    probs: np.ndarray
    #: Discrete choices the value depends on (labels, seeds, peaks, hinge states).
    structure: list

    def logit_gradient(self) -> np.ndarray:
        return _chain_softmax(self.probs, self.grad_p)


def _masked_argmax(values: np.ndarray, allowed: np.ndarray | None) -> int:
    if allowed is None:
        return int(np.argmax(values))
    return int(np.argmax(np.where(allowed, values, -np.inf)))


def _pick_seeds(
    wt: np.ndarray, support: np.ndarray, n: int, allowed: np.ndarray | None
) -> list[int]:
    """Highest-WT voxels outside the support, never touching it or each other."""
    if n <= 0:
        return []
    cube = np.ones((3, 3, 3), dtype=bool)
    blocked = ndimage.binary_dilation(support, structure=cube) if support.any() else support.copy()
    candidates = ~blocked if allowed is None else (~blocked & allowed)
    flat = np.flatnonzero(candidates)
    flat = flat[np.argsort(-wt.ravel()[flat], kind="stable")]

    seeds: list[int] = []
    for index in flat:
        if len(seeds) == n:
            break
        z, y, x = np.unravel_index(index, wt.shape)
        if blocked[z, y, x]:
            continue
        seeds.append(int(index))
        blocked[max(z - 1, 0) : z + 2, max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2] = True
    return seeds


def evaluate_soft(
    field: LogitField,
    cues: CueSet,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
    terms: frozenset[LossTerm],
) -> SoftEvaluation:
    p = field.probs()
    wt = p.sum(axis=0)
    g = np.zeros_like(p)
    loss = 0.0
    structure: list = []

    forbidden = None
    if LossTerm.PRIOR in terms:
        masks.require_geometry(field.grid_like(wt))
        mask = forbidden_mask(masks, cues.cohort.cohort)
        if mask is not None:
            forbidden = mask.data != 0
    # Peaks and seeds stay out of the forbidden compartment while the prior is on.
    allowed = None
    if forbidden is not None and not forbidden.all():
        allowed = ~forbidden

    if LossTerm.EXIST in terms:
        target = cfg.tau + cfg.fit.presence_margin
        for idx, k in enumerate(CHANNELS):
            for cue in cues.cues_for(k):
                lam = cue.certainty
                if lam == 0.0 or cue.polarity == Polarity.UNSTATED:
                    continue
                if cue.polarity == Polarity.ABSENT:
                    loss += lam * float(p[idx].sum())
                    g[idx] += lam
                elif cfg.fit.presence_surrogate == "volume":
                    volume = float(p[idx].sum())
                    active = volume < 1.0
                    if active:
                        loss += lam * (1.0 - volume)
                        g[idx] -= lam
                    structure.append(("volume", idx, active))
                else:
                    peak = _masked_argmax(p[idx], allowed)
                    coords = np.unravel_index(peak, wt.shape)
                    value = float(p[idx][coords])
                    active = value < target
                    if active:
                        loss += lam * (1.0 - value / target)
                        g[(idx, *coords)] -= lam / target
                    structure.append(("peak", idx, peak, active))

    quant = cues.quant
    if LossTerm.GLOBAL in terms and quant.min_count is not None and quant.count_certainty > 0:
        support = wt >= cfg.tau
        comps = label_components(field.grid_like(support.astype(np.uint8)), cfg.connectivity)
        labels = comps.labels.data
        d_count = np.zeros_like(wt)
        soft_count = 0.0
        light: list[bool] = []
        if comps.count:
            masses = ndimage.sum_labels(wt, labels, index=np.arange(1, comps.count + 1))
            for label, mass in enumerate(masses, start=1):
                soft_count += min(1.0, float(mass))
                light.append(bool(mass < 1.0))
                if mass < 1.0:
                    d_count[labels == label] = 1.0
        seeds = _pick_seeds(wt, support, quant.min_count - comps.count, allowed)
        for index in seeds:
            soft_count += float(wt.flat[index])
            d_count.flat[index] = 1.0
        deficit = quant.min_count - soft_count
        active = deficit > 0
        if active:
            scale = weights.w_count * quant.count_certainty
            loss += scale * deficit
            g -= scale * d_count
        structure.append(("count", labels.tobytes(), tuple(seeds), tuple(light), active))

    if forbidden is not None:
        loss += weights.w_prior * float(np.sum(wt[forbidden]))
        g += weights.w_prior * forbidden

    return SoftEvaluation(loss=loss, grad_p=g, probs=p, structure=structure)


def _chain_softmax(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    # Background logit is fixed, so it contributes only through the normaliser.
    weighted = (grad_p * probs).sum(axis=0)
    return probs * (grad_p - weighted)


def soft_report_loss(
    field: LogitField,
    cues: CueSet,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
    terms: frozenset[LossTerm] = ALL_TERMS,
) -> float:
    return evaluate_soft(field, cues, masks, weights, cfg, terms).loss


def grad(
    field: LogitField,
    cues: CueSet,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
    terms: frozenset[LossTerm] = ALL_TERMS,
) -> np.ndarray:
    """Analytic gradient of ``soft_report_loss`` w.r.t. every logit."""
    return evaluate_soft(field, cues, masks, weights, cfg, terms).logit_gradient()


def loss_and_grad(
    field: LogitField,
    cues: CueSet,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
    terms: frozenset[LossTerm] = ALL_TERMS,
) -> tuple[float, np.ndarray]:
    ev = evaluate_soft(field, cues, masks, weights, cfg, terms)
    return ev.loss, ev.logit_gradient()


# ---------------------------------------------------------------------------
# Constraint status
# ---------------------------------------------------------------------------


def hard_prior(maps: ProbMaps, masks: AnatomyMasks, cues: CueSet, tau: float) -> float:
    """Thresholded WT voxels inside the cohort-forbidden compartment."""
    mask = forbidden_mask(masks, cues.cohort.cohort)
    if mask is None:
        return 0.0
    return float(np.count_nonzero((maps.wt.data >= tau) & (mask.data != 0)))


def constraint_status(
    maps: ProbMaps,
    cues: CueSet,
    masks: AnatomyMasks,
    cfg: EngineConfig,
    *,
    prior_initial: float,
) -> ConstraintStatus:
    exist: dict[Substructure, bool] = {}
    for k in CHANNELS:
        volume = volume_hard(maps.channel(k), cfg.tau)
        ok = True
        for cue in cues.cues_for(k):
            if cue.certainty == 0.0:
                continue
            if cue.polarity == Polarity.PRESENT:
                ok = ok and volume >= 1.0
            elif cue.polarity == Polarity.ABSENT:
                ok = ok and volume == 0.0
        exist[k] = ok

    quant = cues.quant
    count_ok = True
    if quant.min_count is not None and quant.count_certainty > 0:
        wt_bin = VoxelGrid((maps.wt.data >= cfg.tau).astype(np.uint8), maps.spacing_mm)
        count_ok = label_components(wt_bin, cfg.connectivity).count >= quant.min_count

    mask = forbidden_mask(masks, cues.cohort.cohort)
    prior_value = hard_prior(maps, masks, cues, cfg.tau)
    prior_soft = 0.0 if mask is None else float(np.sum(maps.wt.data * mask.data))
    return ConstraintStatus(
        exist_satisfied=exist,
        count_satisfied=count_ok,
        prior_value=prior_value,
        prior_initial=prior_initial,
        prior_soft=prior_soft,
        prior_satisfied=prior_value <= 0.01 * prior_initial,
    )


# ---------------------------------------------------------------------------
# Gradient descent
# ---------------------------------------------------------------------------


def fit_field(
    field0: LogitField,
    cues: CueSet,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
    steps: int | None = None,
    lr: float | None = None,
    terms: frozenset[LossTerm] = ALL_TERMS,
) -> tuple[LogitField, FitReport]:
    """Run fixed-step gradient descent and return the final field with its report.

    Stops early once the gradient vanishes everywhere, so ``iterations`` counts
    the steps actually taken.
    """
    steps = cfg.fit.steps if steps is None else steps
    lr = cfg.fit.lr if lr is None else lr
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if lr <= 0:
        raise ValueError("lr must be positive")

    field = field0
    loss, g = loss_and_grad(field, cues, masks, weights, cfg, terms)
    trace = [loss]
    increases = 0
    for i in range(steps):
        if not g.any():
            logger.debug("Zero gradient after %d steps", i)
            break
        field = field.step(-lr * g)
        loss, g = loss_and_grad(field, cues, masks, weights, cfg, terms)
        if not math.isfinite(loss):
            raise DivergenceDetected(f"loss became {loss} at step {i + 1}")
        if loss > trace[-1] + DESCENT_TOLERANCE:
            increases += 1
            logger.debug("Step %d increased loss %.6g -> %.6g", i + 1, trace[-1], loss)
        trace.append(loss)
    if increases:
        logger.warning("%d of %d steps increased the soft loss", increases, len(trace) - 1)

    final_maps = field.to_probmaps()
    prior_initial = hard_prior(field0.to_probmaps(), masks, cues, cfg.tau)
    report = FitReport(
        iterations=len(trace) - 1,
        loss_trace=trace,
        final_breakdown=report_loss(cues, final_maps, masks, weights, cfg),
        constraint_status=constraint_status(
            final_maps, cues, masks, cfg, prior_initial=prior_initial
        ),
    )
    logger.debug(
        "Fit finished after %d steps: loss %.6g -> %.6g",
        report.iterations,
        trace[0],
        trace[-1],
    )
    return field, report


def fit(
    field0: LogitField,
    cues: CueSet,
    masks: AnatomyMasks,
    weights: LossWeights,
    cfg: EngineConfig,
    steps: int | None = None,
    lr: float | None = None,
    terms: frozenset[LossTerm] = ALL_TERMS,
) -> FitReport:
    return fit_field(field0, cues, masks, weights, cfg, steps, lr, terms)[1]


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    subset: str
    n_phantoms: int
    satisfied_fraction: float
    mean_final_loss: float

    def to_dict(self) -> dict:
        return {
            "subset": self.subset,
            "n_phantoms": self.n_phantoms,
            "satisfied_fraction": self.satisfied_fraction,
            "mean_final_loss": self.mean_final_loss,
        }


def fit_phantom(
    spec: PhantomSpec,
    cfg: EngineConfig,
    terms: frozenset[LossTerm] = ALL_TERMS,
    cues: CueSet | None = None,
) -> FitReport:
    """Fit a uniform field to a phantom's masks.

    The cues default to those parsed from the phantom's own report.
    """
    _, masks, doc = generate(spec)
    if cues is None:
        cues = parse_report(doc)
    field0 = LogitField.uniform(
        spec.dims, spec.spacing_mm, cfg.fit.init_logit, cfg.fit.init_jitter, spec.seed
    )
    return fit(field0, cues, masks, cfg.weights, cfg, cfg.fit.steps, cfg.fit.lr, terms)


def ablation_run(
    suite: Sequence[PhantomSpec],
    cfg: EngineConfig,
    subsets: Sequence[frozenset[LossTerm]] = ABLATION_SUBSETS,
) -> list[AblationRow]:
    """Constraint-satisfaction rate per cumulative loss-term subset.

    Phantoms are fitted concurrently when ``cfg.fit.workers > 1``; results are
    merged in suite order.
    """
    if not suite:
        raise ValueError("ablation needs a non-empty phantom suite")
    rows = []
    with ThreadPoolExecutor(max_workers=cfg.fit.workers) as pool:
        for terms in subsets:
            reports = list(pool.map(partial(fit_phantom, cfg=cfg, terms=terms), suite))
            satisfied = sum(r.constraint_status.all_satisfied for r in reports)
            row = AblationRow(
                subset=subset_name(terms),
                n_phantoms=len(reports),
                satisfied_fraction=satisfied / len(reports),
                mean_final_loss=math.fsum(r.final_breakdown.report_total for r in reports)
                / len(reports),
            )
            logger.info(
                "Ablation %s: %d/%d satisfied", row.subset, satisfied, row.n_phantoms
            )
            rows.append(row)
    return rows


def ablation_to_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf,
        fieldnames=["subset", "n_phantoms", "satisfied_fraction", "mean_final_loss"],
        lineterminator="\n",
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row.to_dict())
    return buf.getvalue()
