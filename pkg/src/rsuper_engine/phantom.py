"""Synthetic phantoms: brain geometry, ellipsoidal lesions and a matching report.

The brain is a sphere of radius ``0.4 * min(extent)`` centred in the grid.
Its outer ``shell_voxels`` form the dural mask and the rest is parenchyma.
Each lesion is an ellipsoid with a TC core, an optional ET shell (a thin
ring for MET, a thick solid fill for MEN) and an optional ED rim, clipped to
its cohort's compartment. The report is written from what was actually
rasterized, so a phantom's own report is consistent with its labels.
"""

from __future__ import annotations

import json
import logging
from functools import cache
from pathlib import Path
from typing import Self

import numpy as np
from jinja2 import Environment, PackageLoader, StrictUndefined
from pydantic import BaseModel, Field, ValidationError, model_validator

from rsuper_engine import get_lexicon
from rsuper_engine.components import label_components
from rsuper_engine.config import DEFAULT_SEED
from rsuper_engine.errors import GridIOError, MalformedDocument, SpecInvalid
from rsuper_engine.models import Cohort, Modality, ReportDocument, cue_set_to_json
from rsuper_engine.report_parser import parse_report
from rsuper_engine.voxels import (
    AnatomyMasks,
    LabelValue,
    ProbMaps,
    VoxelGrid,
    labels_to_probmaps,
    write_grid,
)

logger = logging.getLogger(__name__)

BRAIN_RADIUS_FRACTION = 0.4
#: Normalized radius of the TC core when an ET shell is present.
CORE_FRACTION: dict[Cohort, float] = {Cohort.MET: 0.6, Cohort.MEN: 0.4}


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


class LesionSpec(BaseModel):
    center: tuple[int, int, int]
    semi_axes_mm: tuple[float, float, float]
    has_et: bool = True
    has_ed: bool = True
    ed_rim_mm: float = Field(default=2.0, ge=0.0)

    @model_validator(mode="after")
    def _check_axes(self) -> Self:
        if any(a <= 0 for a in self.semi_axes_mm):
            raise ValueError("semi-axes must be positive")
        return self


class PhantomSpec(BaseModel):
    id: str = "phantom"
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    cohort: Cohort
    lesions: list[LesionSpec] = Field(min_length=1)
    seed: int = DEFAULT_SEED
    shell_voxels: int = Field(default=2, ge=1)
    #: Write the exact lesion count as a number word instead of single/multiple.
    numeral_count: bool = False
    #: Hedge this modality's sentence with "possible"/"possibly".
    hedge_modality: Modality | None = None

    @model_validator(mode="after")
    def _check_geometry(self) -> Self:
        if self.cohort is Cohort.UNKNOWN:
            raise ValueError("phantom cohort must be MEN or MET")
        if min(self.dims) < 1 or min(self.spacing_mm) <= 0:
            raise ValueError("dims and spacing must be positive")
        return self


class PhantomManifest(BaseModel):
    phantoms: list[PhantomSpec]


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def _axis_offsets(
    dims: tuple[int, int, int],
    spacing_mm: tuple[float, float, float],
    center: tuple[float, float, float],
) -> tuple[np.ndarray, ...]:
    """Physical offsets (mm) from ``center`` along x, y, z, broadcastable to (nz, ny, nx)."""
    nx, ny, nz = dims
    sx, sy, sz = spacing_mm
    cx, cy, cz = center
    x = ((np.arange(nx) - cx) * sx)[np.newaxis, np.newaxis, :]
    y = ((np.arange(ny) - cy) * sy)[np.newaxis, :, np.newaxis]
    z = ((np.arange(nz) - cz) * sz)[:, np.newaxis, np.newaxis]
    return x, y, z


def anatomy_masks(
    dims: tuple[int, int, int],
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
    shell_voxels: int = 2,
) -> AnatomyMasks:
    """Dural shell and parenchymal interior of the centred spherical brain."""
    nx, ny, nz = dims
    extent = min(n * s for n, s in zip(dims, spacing_mm))
    radius = BRAIN_RADIUS_FRACTION * extent
    shell = shell_voxels * min(spacing_mm)
    x, y, z = _axis_offsets(dims, spacing_mm, ((nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2))
    r = np.sqrt(x**2 + y**2 + z**2)
    brain = r <= radius
    dural = brain & (r > radius - shell)
    parench = brain & ~dural
    return AnatomyMasks(
        VoxelGrid(dural.astype(np.uint8), spacing_mm),
        VoxelGrid(parench.astype(np.uint8), spacing_mm),
    )


def _normalized_radius(
    spec: PhantomSpec, center: tuple[int, int, int], axes: tuple[float, float, float]
) -> np.ndarray:
    x, y, z = _axis_offsets(spec.dims, spec.spacing_mm, center)
    a, b, c = axes
    return np.sqrt((x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2)


def _check_lesion(spec: PhantomSpec, i: int, lesion: LesionSpec, compartment: np.ndarray) -> None:
    reach = [a + lesion.ed_rim_mm for a in lesion.semi_axes_mm]
    for axis, (c, n, s, r) in enumerate(zip(lesion.center, spec.dims, spec.spacing_mm, reach)):
        if c - r / s < 0 or c + r / s > n - 1:
            raise SpecInvalid(
                f"{spec.id}: lesion {i} does not fit inside the grid along axis {'xyz'[axis]}"
            )
    x, y, z = lesion.center
    if not compartment[z, y, x]:
        raise SpecInvalid(f"{spec.id}: lesion {i} centre lies outside the {spec.cohort} compartment")


def rasterize(spec: PhantomSpec, masks: AnatomyMasks) -> VoxelGrid:
    """Label volume for all lesions of ``spec``; inner labels win over outer ones."""
    compartment = (masks.dural if spec.cohort is Cohort.MEN else masks.parench).data != 0
    labels = np.zeros(compartment.shape, dtype=np.uint8)
    for i, lesion in enumerate(spec.lesions):
        _check_lesion(spec, i, lesion, compartment)
        rho = _normalized_radius(spec, lesion.center, lesion.semi_axes_mm)
        core = CORE_FRACTION[spec.cohort] if lesion.has_et else 1.0
        if lesion.has_ed:
            rim_axes = tuple(a + lesion.ed_rim_mm for a in lesion.semi_axes_mm)
            rim = _normalized_radius(spec, lesion.center, rim_axes) <= 1.0
            labels[rim & compartment & (labels == LabelValue.BACKGROUND)] = LabelValue.ED
        if lesion.has_et:
            labels[(rho <= 1.0) & compartment] = LabelValue.ET
        labels[(rho <= core) & compartment] = LabelValue.TC
    return VoxelGrid(labels, spec.spacing_mm)


# ---------------------------------------------------------------------------
# Report text
# ---------------------------------------------------------------------------


@cache
def _environment() -> Environment:
    return Environment(
        loader=PackageLoader("rsuper_engine", "templates"),
        autoescape=False,
        keep_trailing_newline=True,
        undefined=StrictUndefined,
    )


def _hedge(sentence: str, present: bool) -> str:
    word = "Possible" if present else "Possibly"
    return f"{word} {sentence[0].lower()}{sentence[1:]}"


def _count_phrase(count: int, numeral: bool) -> str:
    if numeral:
        words = {v: k for k, v in get_lexicon().number_words.items()}
        if count in words:
            return words[count]
        logger.warning("No number word for %d lesions, falling back to a count word", count)
    return "a single" if count == 1 else "multiple"


def render_report(
    spec: PhantomSpec,
    *,
    count: int,
    largest_extents_mm: tuple[float, float, float],
    has_et: bool,
    has_ed: bool,
) -> str:
    noun = "lesion" if count == 1 else "lesions"
    if spec.cohort is Cohort.MEN:
        location = f"dural-based extra-axial {noun} along the falx cerebri"
        enhancement = "Avid homogeneous enhancement."
    else:
        location = f"parenchymal intra-axial {noun}"
        enhancement = "Ring enhancement."

    sentences = {
        Modality.T1: ("Hypointense tumor core.", True),
        Modality.T1c: (enhancement if has_et else "No enhancement.", has_et),
        Modality.T2: ("Heterogeneous tumor core.", True),
        Modality.FLAIR: ("Surrounding edema." if has_ed else "No surrounding edema.", has_ed),
    }
    if spec.hedge_modality is not None:
        text, present = sentences[spec.hedge_modality]
        sentences[spec.hedge_modality] = (_hedge(text, present), present)

    return _environment().get_template("report.txt.j2").render(
        count=count,
        count_phrase=_count_phrase(count, spec.numeral_count),
        location=location,
        size="x".join(f"{e:g}" for e in largest_extents_mm),
        t1=sentences[Modality.T1][0],
        t1c=sentences[Modality.T1c][0],
        t2=sentences[Modality.T2][0],
        flair=sentences[Modality.FLAIR][0],
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate(spec: PhantomSpec) -> tuple[VoxelGrid, AnatomyMasks, ReportDocument]:
    """Rasterize a phantom and write its report.

    Raises SpecInvalid when a lesion leaves the grid, its centre leaves the
    cohort compartment, or lesions touch so they no longer form one 26-connected
    component each.
    """
    masks = anatomy_masks(spec.dims, spec.spacing_mm, spec.shell_voxels)
    labels = rasterize(spec, masks)
    lab = labels.data

    wt = labels.with_data((lab != LabelValue.BACKGROUND).astype(np.uint8))
    comps = label_components(wt, connectivity=26)
    centre_labels = {
        int(comps.labels.data[z, y, x]) for x, y, z in (les.center for les in spec.lesions)
    }
    if comps.count != len(spec.lesions) or len(centre_labels) != len(spec.lesions):
        raise SpecInvalid(
            f"{spec.id}: {len(spec.lesions)} lesions rasterized into {comps.count} components"
        )

    largest = max(comps.stats, key=lambda s: s.max_extent_mm)
    text = render_report(
        spec,
        count=len(spec.lesions),
        largest_extents_mm=largest.extents_mm,
        has_et=bool(np.any(lab == LabelValue.ET)),
        has_ed=bool(np.any(lab == LabelValue.ED)),
    )
    return labels, masks, ReportDocument.from_text(text)


def ground_truth_probmaps(labels: VoxelGrid) -> ProbMaps:
    """One-hot probability maps for a label volume."""
    return labels_to_probmaps(labels)


# ---------------------------------------------------------------------------
# Suites and manifests
# ---------------------------------------------------------------------------

_TETRAHEDRON = np.array([(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)]) / np.sqrt(3.0)

#: Radius (mm, from the grid centre) and semi-axis range per cohort for the bundled suite.
_SUITE_LAYOUT: dict[Cohort, tuple[float, float, float]] = {
    Cohort.MET: (6.5, 1.5, 2.0),
    Cohort.MEN: (11.8, 2.0, 3.0),
}


def default_suite(n: int = 50, seed: int = DEFAULT_SEED) -> list[PhantomSpec]:
    """Deterministic 32^3 suite alternating MEN/MET with 1-4 lesions each.

    Lesions sit on the vertices of a tetrahedron, deep in the parenchyma for
    MET and on the dural shell for MEN.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n):
        cohort = Cohort.MEN if i % 2 == 0 else Cohort.MET
        n_lesions = 1 + (i // 2) % 4
        radius, lo, hi = _SUITE_LAYOUT[cohort]
        lesions = []
        for direction in _TETRAHEDRON[:n_lesions]:
            center = np.rint(15.5 + radius * direction).astype(int)
            lesions.append(
                LesionSpec(
                    center=tuple(int(c) for c in center),
                    semi_axes_mm=tuple(round(float(a), 1) for a in rng.uniform(lo, hi, 3)),
                    has_et=bool(rng.random() < 0.7),
                    has_ed=bool(rng.random() < 0.7),
                    ed_rim_mm=round(float(rng.uniform(1.0, 1.5)), 1),
                )
            )
        specs.append(
            PhantomSpec(
                id=f"ph{i:03d}",
                cohort=cohort,
                lesions=lesions,
                seed=seed + i,
                numeral_count=i % 5 == 4,
                hedge_modality=Modality.FLAIR if i % 7 == 6 else None,
            )
        )
    return specs


def load_manifest(path: Path | str) -> list[PhantomSpec]:
    p = Path(path)
    try:
        raw = p.read_text(encoding="utf-8")
    except OSError as e:
        raise GridIOError(f"cannot read manifest {p}: {e.strerror}") from e
    try:
        return PhantomManifest.model_validate_json(raw).phantoms
    except ValidationError as e:
        raise MalformedDocument(f"invalid manifest {p}: {e.errors()[0]['msg']}") from e


def write_phantom(spec: PhantomSpec, out_dir: Path) -> None:
    """Write one phantom's grids, ground-truth maps, report and parsed cues."""
    labels, masks, doc = generate(spec)
    maps = ground_truth_probmaps(labels)
    case_dir = out_dir / spec.id
    try:
        case_dir.mkdir(parents=True, exist_ok=True)
        (case_dir / "report.txt").write_text(doc.to_text(), encoding="utf-8")
        (case_dir / "cues.json").write_text(cue_set_to_json(parse_report(doc)), encoding="utf-8")
    except OSError as e:
        raise GridIOError(f"cannot write phantom {spec.id} to {case_dir}: {e.strerror}") from e
    write_grid(labels, case_dir / "labels.vgr")
    write_grid(masks.dural, case_dir / "dural.vgr")
    write_grid(masks.parench, case_dir / "parench.vgr")
    write_grid(maps.et, case_dir / "et.vgr")
    write_grid(maps.ed, case_dir / "ed.vgr")
    write_grid(maps.tc, case_dir / "tc.vgr")


def write_suite(specs: list[PhantomSpec], out_dir: Path | str) -> Path:
    """Write every phantom plus a ``manifest.json`` index that reloads as a manifest."""
    out = Path(out_dir)
    for spec in specs:
        write_phantom(spec, out)
    index = out / "manifest.json"
    manifest = PhantomManifest(phantoms=specs)
    index.write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8"
    )
    logger.info("Wrote %d phantoms to %s", len(specs), out)
    return index
