"""Connected-component labelling and per-component size statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from rsuper_engine.errors import NonBinaryInput
from rsuper_engine.models import SizeMode
from rsuper_engine.voxels import VoxelGrid, is_binary


def structure_for(connectivity: int) -> np.ndarray:
    """3x3x3 adjacency structure: faces only (6) or faces, edges and corners (26)."""
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


@dataclass(frozen=True)
class ComponentStats:
    label: int
    voxel_count: int
    volume_mm3: float
    extents_mm: tuple[float, float, float]

    @property
    def max_extent_mm(self) -> float:
        return max(self.extents_mm)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "voxel_count": self.voxel_count,
            "volume_mm3": self.volume_mm3,
            "extents_mm": list(self.extents_mm),
            "max_extent_mm": self.max_extent_mm,
        }


@dataclass(frozen=True, eq=False)
class ComponentSet:
    labels: VoxelGrid
    stats: list[ComponentStats] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.stats)

    def largest_size(self, mode: SizeMode) -> float:
        """Size of the largest component, 0.0 when there are none."""
        return max((component_size(s, mode) for s in self.stats), default=0.0)


def label_components(binary: VoxelGrid, connectivity: int = 26) -> ComponentSet:
    """Label foreground voxels; labels follow first encounter in x-fastest scan order."""
    structure = structure_for(connectivity)
    if not is_binary(binary):
        raise NonBinaryInput("component labelling needs a grid of 0s and 1s")

    raw, n = ndimage.label(binary.data != 0, structure=structure)
    if n == 0:
        return ComponentSet(binary.with_data(np.zeros(raw.shape, dtype=np.int32)))

    present, first = np.unique(raw.ravel(), return_index=True)
    keep = present > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[present[keep][order]] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]

    sx, sy, sz = binary.spacing_mm
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    stats = []
    for label, (zs, ys, xs) in enumerate(ndimage.find_objects(labels), start=1):
        voxels = int(counts[label])
        stats.append(
            ComponentStats(
                label=label,
                voxel_count=voxels,
                volume_mm3=voxels * binary.voxel_volume_mm3,
                extents_mm=(
                    (xs.stop - xs.start) * sx,
                    (ys.stop - ys.start) * sy,
                    (zs.stop - zs.start) * sz,
                ),
            )
        )
    return ComponentSet(binary.with_data(labels), stats)


def component_size(stats: ComponentStats, mode: SizeMode) -> float:
    if mode == SizeMode.VOLUME:
        return stats.volume_mm3
    return stats.max_extent_mm
