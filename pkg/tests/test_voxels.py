"""Tests for voxel grids, probability maps, masks and VGR1 I/O."""

import numpy as np
import pytest

from rsuper_engine.errors import (
    DimsMismatch,
    FormatError,
    GridIOError,
    InvalidProbMaps,
    NonBinaryInput,
)
from rsuper_engine.voxels import (
    HEADER,
    MAGIC,
    AnatomyMasks,
    ProbMaps,
    VoxelGrid,
    labels_to_probmaps,
    read_grid,
    threshold,
    write_grid,
)

from tests.conftest import grid


# ---------------------------------------------------------------------------
# VoxelGrid
# ---------------------------------------------------------------------------


def test_index_convention_is_x_fastest():
    g = VoxelGrid.from_flat((3, 2, 2), (1.0, 1.0, 1.0), np.arange(12))
    assert g.dims == (3, 2, 2)
    assert g.index_of(2, 1, 1) == 2 + 3 * (1 + 2 * 1)
    assert g.data[1, 1, 2] == 11
    assert g.coords_of(11) == (2, 1, 1)


@pytest.mark.parametrize("dims", [(1, 1, 1), (3, 2, 2), (5, 1, 4), (2, 7, 3)])
def test_index_mapping_is_a_bijection(dims):
    nx, ny, nz = dims
    n = nx * ny * nz
    g = VoxelGrid.from_flat(dims, (1.0, 1.0, 1.0), np.arange(n))
    coords = [g.coords_of(i) for i in range(n)]
    assert len(set(coords)) == n
    for i, (x, y, z) in enumerate(coords):
        assert 0 <= x < nx and 0 <= y < ny and 0 <= z < nz
        assert g.index_of(x, y, z) == i
        assert g.data[z, y, x] == i


def test_from_flat_wrong_size():
    with pytest.raises(FormatError):
        VoxelGrid.from_flat((2, 2, 2), (1.0, 1.0, 1.0), np.zeros(7))


@pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, float("nan"), 1.0)])
def test_rejects_bad_spacing(spacing):
    with pytest.raises(FormatError):
        VoxelGrid(np.zeros((2, 2, 2)), spacing)


def test_rejects_empty_or_flat_data():
    with pytest.raises(FormatError):
        VoxelGrid(np.zeros((0, 2, 2)))
    with pytest.raises(FormatError):
        VoxelGrid(np.zeros((2, 2)))


def test_grid_is_immutable():
    source = np.zeros((2, 2, 2))
    g = VoxelGrid(source)
    source[0, 0, 0] = 5.0
    assert g.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 1.0


def test_voxel_volume():
    assert VoxelGrid.zeros((2, 2, 2), (0.5, 2.0, 3.0)).voxel_volume_mm3 == 3.0


def test_threshold_is_inclusive():
    g = VoxelGrid(np.array([0.49, 0.5, 0.51]).reshape(1, 1, 3))
    assert threshold(g, 0.5).flat.tolist() == [0, 1, 1]


@pytest.mark.parametrize("tau", [1e-6, 0.3, 0.5, 1.0])
def test_threshold_is_idempotent_on_binary_grids(rng, tau):
    for _ in range(20):
        binary = VoxelGrid((rng.random((3, 4, 5)) < 0.4).astype(np.float64))
        once = threshold(binary, tau)
        assert np.array_equal(once.data, binary.data)
        assert np.array_equal(threshold(once, tau).data, once.data)


def test_require_geometry():
    a = VoxelGrid.zeros((2, 2, 2))
    with pytest.raises(DimsMismatch):
        a.require_geometry(VoxelGrid.zeros((2, 2, 3)))
    with pytest.raises(DimsMismatch):
        a.require_geometry(VoxelGrid.zeros((2, 2, 2), (1.0, 1.0, 2.0)))


# ---------------------------------------------------------------------------
# ProbMaps / AnatomyMasks
# ---------------------------------------------------------------------------


def test_probmaps_wt_sums_channels():
    maps = ProbMaps.from_arrays(grid(fill=0.2), grid(fill=0.3), grid(fill=0.1))
    np.testing.assert_allclose(maps.wt.data, 0.6)


def test_probmaps_channel_dims_must_match():
    with pytest.raises(DimsMismatch):
        ProbMaps.from_arrays(grid((2, 2, 2)), grid((2, 2, 2)), grid((2, 2, 3)))


def test_probmaps_validate():
    ProbMaps.from_arrays(grid(fill=0.3), grid(fill=0.3), grid(fill=0.4)).validate()
    with pytest.raises(InvalidProbMaps, match="exceeds 1"):
        ProbMaps.from_arrays(grid(fill=0.5), grid(fill=0.5), grid(fill=0.5)).validate()
    with pytest.raises(InvalidProbMaps, match="leaves"):
        ProbMaps.from_arrays(grid(fill=-0.1), grid(), grid()).validate()
    with pytest.raises(InvalidProbMaps, match="non-finite"):
        ProbMaps.from_arrays(grid(fill=np.nan), grid(), grid()).validate()


def test_masks_must_be_binary():
    with pytest.raises(NonBinaryInput):
        AnatomyMasks(VoxelGrid(grid(fill=0.5)), VoxelGrid(grid()))


def test_masks_must_not_overlap():
    with pytest.raises(FormatError, match="overlap"):
        AnatomyMasks(VoxelGrid(grid(fill=1.0)), VoxelGrid(grid(fill=1.0)))


def test_labels_to_probmaps():
    labels = VoxelGrid(np.array([0, 1, 2, 3]).reshape(1, 1, 4))
    maps = labels_to_probmaps(labels)
    assert maps.tc.flat.tolist() == [0, 1, 0, 0]
    assert maps.ed.flat.tolist() == [0, 0, 1, 0]
    assert maps.et.flat.tolist() == [0, 0, 0, 1]


def test_labels_to_probmaps_rejects_unknown_label():
    with pytest.raises(FormatError):
        labels_to_probmaps(VoxelGrid(np.full((1, 1, 2), 4.0)))


# ---------------------------------------------------------------------------
# VGR1 I/O
# ---------------------------------------------------------------------------


def test_write_read_preserves_bits(tmp_path, rng):
    g = VoxelGrid(rng.random((3, 4, 5)).astype(np.float32), (0.5, 1.0, 2.5))
    path = tmp_path / "g.vgr"
    write_grid(g, path)
    back = read_grid(path)
    assert back.dims == (5, 4, 3)
    assert back.spacing_mm == (0.5, 1.0, 2.5)
    assert back.bit_equal(g)


def test_file_layout(tmp_path):
    path = tmp_path / "g.vgr"
    write_grid(VoxelGrid.from_flat((2, 1, 1), (1.0, 1.0, 1.0), np.array([1.0, 2.0])), path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == HEADER.size + 8
    assert np.frombuffer(raw[HEADER.size :], dtype="<f4").tolist() == [1.0, 2.0]


def test_read_missing(tmp_path):
    with pytest.raises(GridIOError, match="missing.vgr"):
        read_grid(tmp_path / "missing.vgr")


def test_read_truncated_header(tmp_path):
    path = tmp_path / "g.vgr"
    path.write_bytes(MAGIC + b"\x00" * 10)
    with pytest.raises(FormatError, match="truncated"):
        read_grid(path)


def test_read_bad_magic(tmp_path):
    path = tmp_path / "g.vgr"
    path.write_bytes(HEADER.pack(b"NOPE", 1, 1, 1, 1.0, 1.0, 1.0) + b"\x00" * 4)
    with pytest.raises(FormatError, match="magic"):
        read_grid(path)


def test_read_zero_dims(tmp_path):
    path = tmp_path / "g.vgr"
    path.write_bytes(HEADER.pack(MAGIC, 0, 1, 1, 1.0, 1.0, 1.0))
    with pytest.raises(FormatError, match="dims"):
        read_grid(path)


def test_read_bad_spacing(tmp_path):
    path = tmp_path / "g.vgr"
    path.write_bytes(HEADER.pack(MAGIC, 1, 1, 1, 0.0, 1.0, 1.0) + b"\x00" * 4)
    with pytest.raises(FormatError, match="spacing"):
        read_grid(path)


@pytest.mark.parametrize("payload", [b"\x00" * 4, b"\x00" * 12])
def test_read_payload_mismatch(tmp_path, payload):
    path = tmp_path / "g.vgr"
    path.write_bytes(HEADER.pack(MAGIC, 2, 1, 1, 1.0, 1.0, 1.0) + payload)
    with pytest.raises(FormatError, match="payload"):
        read_grid(path)


def test_write_warns_on_non_finite(tmp_path, caplog):
    write_grid(VoxelGrid(np.full((1, 1, 1), np.inf)), tmp_path / "g.vgr")
    assert "non-finite" in caplog.text
