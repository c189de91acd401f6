"""Voxel grids, probability maps, anatomy masks and the VGR1 file format.

Arrays are stored with shape ``(nz, ny, nx)`` in C order, so the flat index
of voxel ``(x, y, z)`` is ``x + nx * (y + ny * z)`` (x fastest) and
``data[z, y, x]`` addresses it directly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from rsuper_engine.errors import (
    DimsMismatch,
    FormatError,
    GridIOError,
    InvalidProbMaps,
    NonBinaryInput,
)
from rsuper_engine.models import Substructure

logger = logging.getLogger(__name__)

MAGIC = b"VGR1"
#: magic, (nx, ny, nz) as uint32, (sx, sy, sz) as float64; 40 bytes.
HEADER = struct.Struct("<4s3I3d")
PAYLOAD_DTYPE = np.dtype("<f4")


class LabelValue(IntEnum):
    """Integer coding of label volumes."""

    BACKGROUND = 0
    TC = 1
    ED = 2
    ET = 3


LABEL_OF: dict[Substructure, LabelValue] = {
    Substructure.TC: LabelValue.TC,
    Substructure.ED: LabelValue.ED,
    Substructure.ET: LabelValue.ET,
}


# ---------------------------------------------------------------------------
# VoxelGrid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Immutable 3D scalar field with spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3 or 0 in arr.shape:
            raise FormatError(f"grid data must be a non-empty 3D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise FormatError(f"spacing must be three positive values, got {self.spacing_mm}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", spacing)

    @classmethod
    def zeros(
        cls, dims: tuple[int, int, int], spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ) -> VoxelGrid:
        nx, ny, nz = dims
        return cls(np.zeros((nz, ny, nx)), spacing_mm)

    @classmethod
    def from_flat(
        cls,
        dims: tuple[int, int, int],
        spacing_mm: tuple[float, float, float],
        values: np.ndarray,
    ) -> VoxelGrid:
        nx, ny, nz = dims
        flat = np.asarray(values)
        if flat.size != nx * ny * nz:
            raise FormatError(f"expected {nx * ny * nz} values for dims {dims}, got {flat.size}")
        return cls(flat.reshape(nz, ny, nx), spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def index_of(self, x: int, y: int, z: int) -> int:
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def coords_of(self, index: int) -> tuple[int, int, int]:
        nx, ny, _ = self.dims
        return index % nx, (index // nx) % ny, index // (nx * ny)

    def with_data(self, data: np.ndarray) -> VoxelGrid:
        return VoxelGrid(data, self.spacing_mm)

    def same_geometry(self, other: VoxelGrid) -> bool:
        return self.data.shape == other.data.shape and self.spacing_mm == other.spacing_mm

    def require_geometry(self, other: VoxelGrid, what: str = "grids") -> None:
        if not self.same_geometry(other):
            raise DimsMismatch(
                f"{what} differ: dims {self.dims} / {other.dims}, "
                f"spacing {self.spacing_mm} / {other.spacing_mm}"
            )

    def bit_equal(self, other: VoxelGrid) -> bool:
        """Equal dims, spacing and float32 payload bytes."""
        return self.same_geometry(other) and (
            self.data.astype(PAYLOAD_DTYPE).tobytes() == other.data.astype(PAYLOAD_DTYPE).tobytes()
        )


def threshold(grid: VoxelGrid, tau: float) -> VoxelGrid:
    """Binary grid with 1 where ``grid >= tau`` (inclusive)."""
    return grid.with_data((grid.data >= tau).astype(np.uint8))


def is_binary(grid: VoxelGrid) -> bool:
    return bool(np.isin(grid.data, (0, 1)).all())


# ---------------------------------------------------------------------------
# ProbMaps / AnatomyMasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProbMaps:
    et: VoxelGrid
    ed: VoxelGrid
    tc: VoxelGrid

    def __post_init__(self) -> None:
        self.et.require_geometry(self.ed, "ET/ED channels")
        self.et.require_geometry(self.tc, "ET/TC channels")

    @classmethod
    def from_arrays(
        cls,
        et: np.ndarray,
        ed: np.ndarray,
        tc: np.ndarray,
        spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> ProbMaps:
        return cls(VoxelGrid(et, spacing_mm), VoxelGrid(ed, spacing_mm), VoxelGrid(tc, spacing_mm))

    @property
    def spacing_mm(self) -> tuple[float, float, float]:
        return self.et.spacing_mm

    @property
    def wt(self) -> VoxelGrid:
        total = (
            self.et.data.astype(np.float64)
            + self.ed.data.astype(np.float64)
            + self.tc.data.astype(np.float64)
        )
        return self.et.with_data(total)

    def channel(self, k: Substructure) -> VoxelGrid:
        if k is Substructure.WT:
            return self.wt
        return {Substructure.ET: self.et, Substructure.ED: self.ed, Substructure.TC: self.tc}[k]

    def validate(self, atol: float = 1e-6) -> None:
        """Raise InvalidProbMaps unless channels lie in [0, 1] and sum to at most 1."""
        for name, grid in (("et", self.et), ("ed", self.ed), ("tc", self.tc)):
            d = grid.data
            if not np.isfinite(d).all():
                raise InvalidProbMaps(f"{name} channel has non-finite values")
            if d.min() < -atol or d.max() > 1.0 + atol:
                raise InvalidProbMaps(f"{name} channel leaves [0, 1]")
        if self.wt.data.max() > 1.0 + atol:
            raise InvalidProbMaps("et + ed + tc exceeds 1 at some voxel")


@dataclass(frozen=True, eq=False)
class AnatomyMasks:
    dural: VoxelGrid
    parench: VoxelGrid

    def __post_init__(self) -> None:
        self.dural.require_geometry(self.parench, "dural/parench masks")
        for name, grid in (("dural", self.dural), ("parench", self.parench)):
            if not is_binary(grid):
                raise NonBinaryInput(f"{name} mask must hold only 0 and 1")
        if np.any((self.dural.data != 0) & (self.parench.data != 0)):
            raise FormatError("dural and parench masks overlap")

    @classmethod
    def empty_like(cls, grid: VoxelGrid) -> AnatomyMasks:
        zeros = grid.with_data(np.zeros(grid.data.shape, dtype=np.uint8))
        return cls(zeros, zeros)

    def require_geometry(self, grid: VoxelGrid) -> None:
        self.dural.require_geometry(grid, "masks and maps")


# ---------------------------------------------------------------------------
# VGR1 I/O
# ---------------------------------------------------------------------------


def write_grid(grid: VoxelGrid, path: Path | str) -> None:
    """Write ``grid`` as VGR1. Payload values are stored as float32 bit copies."""
    payload = grid.data.astype(PAYLOAD_DTYPE)
    if not np.isfinite(payload).all():
        logger.warning("Writing non-finite values to %s", path)
    nx, ny, nz = grid.dims
    header = HEADER.pack(MAGIC, nx, ny, nz, *grid.spacing_mm)
    try:
        Path(path).write_bytes(header + payload.tobytes())
    except OSError as e:
        raise GridIOError(f"cannot write {path}: {e.strerror}") from e


def read_grid(path: Path | str) -> VoxelGrid:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise GridIOError(f"cannot read {path}: {e.strerror}") from e
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(nx, ny, nz) == 0:
        raise FormatError(f"{path}: dims must be positive, got {(nx, ny, nz)}")
    if not all(np.isfinite(s) and s > 0 for s in (sx, sy, sz)):
        raise FormatError(f"{path}: spacing must be positive, got {(sx, sy, sz)}")
    expected = nx * ny * nz * PAYLOAD_DTYPE.itemsize
    if len(raw) - HEADER.size != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - HEADER.size} bytes, dims need {expected}"
        )
    data = np.frombuffer(raw, dtype=PAYLOAD_DTYPE, offset=HEADER.size).reshape(nz, ny, nx)
    return VoxelGrid(data, (sx, sy, sz))


def read_probmaps(et: Path | str, ed: Path | str, tc: Path | str) -> ProbMaps:
    return ProbMaps(read_grid(et), read_grid(ed), read_grid(tc))


def read_masks(dural: Path | str, parench: Path | str) -> AnatomyMasks:
    return AnatomyMasks(read_grid(dural), read_grid(parench))


def labels_to_probmaps(labels: VoxelGrid) -> ProbMaps:
    """One-hot channels from a label volume."""
    lab = np.rint(labels.data).astype(np.int64)
    if not np.isin(lab, [v.value for v in LabelValue]).all():
        raise FormatError("label volume holds values outside {0, 1, 2, 3}")
    return ProbMaps(
        labels.with_data((lab == LabelValue.ET).astype(np.float64)),
        labels.with_data((lab == LabelValue.ED).astype(np.float64)),
        labels.with_data((lab == LabelValue.TC).astype(np.float64)),
    )
