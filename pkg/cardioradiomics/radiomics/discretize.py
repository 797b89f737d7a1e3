from dataclasses import dataclass

import numpy as np

from cardioradiomics.errors import EmptyMask, InvalidSpacing
from cardioradiomics.volume import StructureMask, VolumeGrid, require_same_geometry


@dataclass(frozen=True, eq=False)
class DiscretizedRegion:
    levels: np.ndarray   # (K,) gray levels in 1..n_levels
    n_levels: int
    bin_width: float
    coords: np.ndarray   # (K, 3) voxel indices, lexicographic
    spacing: tuple

    @property
    def count(self):
        return len(self.levels)

    def grid(self, pad=1):
        """Levels on the mask bounding box, 0 outside the mask, padded by ``pad``."""
        lo = self.coords.min(axis=0)
        shape = self.coords.max(axis=0) - lo + 1 + 2*pad
        out = np.zeros(tuple(shape), dtype=np.int64)
        idx = self.coords - lo + pad
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = self.levels
        return out


def discretize(v: VolumeGrid, m: StructureMask, bin_width: float = 25.0) -> DiscretizedRegion:
    """Fixed bin width discretisation anchored at the region minimum."""
    if m.empty:
        raise EmptyMask("structure {} has no voxels".format(m.structure_code))
    if not bin_width > 0:
        raise InvalidSpacing("bin width must be positive, got {}".format(bin_width))
    require_same_geometry(v, m, "volume and mask")
    coords = m.coords()
    values = v.data[m.data]
    levels = np.floor((values - values.min())/bin_width).astype(np.int64) + 1
    return DiscretizedRegion(levels, int(levels.max()), float(bin_width), coords, m.spacing)


def region_from_levels(levels, spacing=(1.0, 1.0, 1.0)):
    """Builds a region straight from a level grid where 0 marks outside voxels."""
    levels = np.asarray(levels, dtype=np.int64)
    coords = np.argwhere(levels > 0)
    values = levels[levels > 0]
    return DiscretizedRegion(values, int(values.max()), 1.0, coords, tuple(spacing))


def test_constant_region_has_one_level():
    v = VolumeGrid(np.full((3, 3, 3), -40.0))
    m = StructureMask(np.ones((3, 3, 3)), 1)
    for bw in [1.0, 25.0, 300.0]:
        d = discretize(v, m, bw)
        assert d.n_levels == 1 and np.all(d.levels == 1)


def test_levels_by_formula():
    data = np.zeros((3, 1, 1))
    data[:, 0, 0] = [0.0, 25.0, 50.0]
    d = discretize(VolumeGrid(data), StructureMask(np.ones((3, 1, 1)), 2), 25.0)
    assert d.levels.tolist() == [1, 2, 3]
    assert d.n_levels == 3


def test_empty_mask_rejected():
    import pytest
    with pytest.raises(EmptyMask):
        discretize(VolumeGrid(np.zeros((2, 2, 2))), StructureMask(np.zeros((2, 2, 2)), 4), 25.0)


def test_grid_places_levels():
    levels = np.zeros((4, 4, 4), dtype=int)
    levels[1, 2, 3] = 2
    levels[2, 2, 3] = 1
    g = region_from_levels(levels).grid()
    assert g.shape == (4, 3, 3)
    assert g[1, 1, 1] == 2 and g[2, 1, 1] == 1
    assert g.sum() == 3
