"""Volumetric data model shared by every stage.

Arrays are indexed ``data[x, y, z]`` which, flattened in Fortran order, is the
x-fastest voxel order NIfTI stores on disk. All containers are immutable: the
arrays are copied on construction and flagged read-only.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from cardioradiomics.errors import DataError, GeometryMismatch, InvalidCode, InvalidSpacing, NonFiniteData
from cardioradiomics.util import N_LABELS, STRUCTURES


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_geometry(shape, spacing, origin):
    if len(shape) != 3 or any(d <= 0 for d in shape):
        raise GeometryMismatch("dims must be 3 positive integers, got {}".format(shape))
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise InvalidSpacing("spacing must be 3 positive reals, got {}".format(spacing))
    if len(origin) != 3 or not all(np.isfinite(o) for o in origin):
        raise GeometryMismatch("origin must be 3 finite reals, got {}".format(origin))


class _Grid(object):
    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def geometry(self):
        return (tuple(self.dims), tuple(self.spacing), tuple(self.origin))


@dataclass(frozen=True, eq=False)
class VolumeGrid(_Grid):
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        data = _frozen(self.data, np.float64)
        _check_geometry(data.shape, self.spacing, self.origin)
        if not np.all(np.isfinite(data)):
            raise NonFiniteData("VolumeGrid values must be finite")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class LabelMap(_Grid):
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        raw = np.asarray(self.data)
        if raw.size and (raw.min() < 0 or raw.max() >= N_LABELS or np.any(raw != np.round(raw))):
            raise InvalidCode("labelmap values must be integers in 0..{}".format(N_LABELS - 1))
        data = _frozen(raw, np.uint8)
        _check_geometry(data.shape, self.spacing, self.origin)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class StructureMask(_Grid):
    data: np.ndarray
    structure_code: int
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        data = _frozen(self.data, bool)
        _check_geometry(data.shape, self.spacing, self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "count", int(np.count_nonzero(data)))

    @property
    def empty(self):
        return self.count == 0

    def coords(self):
        """Voxel indices in lexicographic (x, y, z) order, shape (K, 3)."""
        return np.argwhere(self.data)


def same_geometry(a, b, atol=1e-6):
    if tuple(a.dims) != tuple(b.dims):
        return False
    return (np.allclose(a.spacing, b.spacing, atol=atol) and
            np.allclose(a.origin, b.origin, atol=atol))


def require_same_geometry(a, b, what="inputs"):
    if not same_geometry(a, b):
        raise GeometryMismatch("{} differ in geometry: {} vs {}".format(what, a.geometry, b.geometry))


def extract_structure_mask(l: LabelMap, code: int) -> StructureMask:
    if code not in STRUCTURES:
        raise InvalidCode("structure code must be in 1..7, got {}".format(code))
    return StructureMask(l.data == code, int(code), l.spacing, l.origin)


def resample_to_spacing(v, target_spacing):
    """Resamples onto a lattice with the same origin and ``target_spacing``.

    Trilinear for intensities, nearest-neighbour for labels. The new dims are
    rounded so the physical extent changes by less than one target voxel.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(np.isfinite(s) and s > 0 for s in target):
        raise InvalidSpacing("target spacing must be 3 positive reals, got {}".format(target_spacing))

    dims = [max(1, int(round(v.dims[a]*v.spacing[a]/target[a]))) for a in range(3)]
    coords = np.meshgrid(*[np.arange(dims[a])*(target[a]/v.spacing[a]) for a in range(3)],
                         indexing="ij")

    if isinstance(v, LabelMap):
        out = ndimage.map_coordinates(v.data, coords, order=0, mode="nearest")
        return LabelMap(out, target, v.origin)
    if isinstance(v, VolumeGrid):
        out = ndimage.map_coordinates(v.data, coords, order=1, mode="nearest")
        return VolumeGrid(out, target, v.origin)
    raise TypeError("cannot resample {}".format(type(v).__name__))


def common_lattice(grids, spacing=None):
    """``(dims, spacing, origin)`` of a lattice covering every grid.

    The spacing is ``spacing`` mm isotropic when given, else the finest
    spacing per axis over ``grids``. The origin is the lowest voxel centre
    and the extent reaches the far edge of the largest grid.
    """
    grids = list(grids)
    if spacing is None:
        target = tuple(float(min(g.spacing[a] for g in grids)) for a in range(3))
    else:
        target = (float(spacing),)*3
    if not all(np.isfinite(s) and s > 0 for s in target):
        raise InvalidSpacing("lattice spacing must be positive, got {}".format(spacing))
    origin = tuple(float(min(g.origin[a] for g in grids)) for a in range(3))
    end = [max(g.origin[a] + g.dims[a]*g.spacing[a] for g in grids) for a in range(3)]
    dims = tuple(max(1, int(round((end[a] - origin[a])/target[a]))) for a in range(3))
    return dims, target, origin


def resample_to_lattice(v, dims, spacing, origin):
    """Samples ``v`` at the voxel centres of the given lattice.

    Labels are nearest-neighbour with background outside ``v``; intensities
    are trilinear with edge clamping. A grid already on the lattice is
    returned unchanged.
    """
    if tuple(v.dims) == tuple(dims) and np.allclose(v.spacing, spacing) and np.allclose(v.origin, origin):
        return v
    coords = np.meshgrid(*[(origin[a] + spacing[a]*np.arange(dims[a]) - v.origin[a])/v.spacing[a]
                           for a in range(3)], indexing="ij")
    if isinstance(v, LabelMap):
        out = ndimage.map_coordinates(v.data, coords, order=0, mode="nearest")
        # a voxel covers half a voxel either side of its centre
        inside = np.all([(c >= -0.5) & (c <= n - 0.5) for c, n in zip(coords, v.dims)], axis=0)
        return LabelMap(np.where(inside, out, 0), spacing, origin)
    if isinstance(v, VolumeGrid):
        out = ndimage.map_coordinates(v.data, coords, order=1, mode="nearest")
        return VolumeGrid(out, spacing, origin)
    raise TypeError("cannot resample {}".format(type(v).__name__))


def _trilinear(data, p):
    """Pointwise trilinear lookup with edge clamping, used as a test oracle."""
    p = np.clip(np.asarray(p, dtype=float), 0, np.array(data.shape) - 1)
    lo = np.floor(p).astype(int)
    hi = np.minimum(lo + 1, np.array(data.shape) - 1)
    f = p - lo
    total = 0.0
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = ((f[0] if cx else 1 - f[0]) *
                     (f[1] if cy else 1 - f[1]) *
                     (f[2] if cz else 1 - f[2]))
                idx = (hi[0] if cx else lo[0], hi[1] if cy else lo[1], hi[2] if cz else lo[2])
                total += w*data[idx]
    return total


def test_volume_rejects_bad_values():
    import pytest
    with pytest.raises(DataError) as info:
        VolumeGrid(np.full((2, 2, 2), np.nan))
    assert info.value.exit_code == 3
    with pytest.raises(InvalidSpacing):
        VolumeGrid(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(InvalidCode):
        LabelMap(np.full((2, 2, 2), 9))


def test_volume_is_immutable():
    src = np.zeros((2, 3, 4))
    v = VolumeGrid(src)
    src[0, 0, 0] = 5
    assert v.data[0, 0, 0] == 0
    assert not v.data.flags.writeable
    assert v.dims == (2, 3, 4)


def test_extract_structure_mask():
    import pytest
    empty = extract_structure_mask(LabelMap(np.zeros((4, 4, 4))), 3)
    assert empty.empty and empty.count == 0

    data = np.zeros((4, 4, 4), dtype=np.uint8)
    data[1, 2, 3] = 5
    m = extract_structure_mask(LabelMap(data), 5)
    assert m.count == 1 and not m.empty
    assert m.coords().tolist() == [[1, 2, 3]]

    with pytest.raises(InvalidCode):
        extract_structure_mask(LabelMap(data), 9)


def test_masks_partition_nonzero_labels():
    rng = np.random.default_rng(0)
    l = LabelMap(rng.integers(0, 8, size=(6, 7, 8)))
    total = sum(extract_structure_mask(l, c).count for c in STRUCTURES)
    assert total == np.count_nonzero(l.data)


def test_resample_identity():
    rng = np.random.default_rng(1)
    l = LabelMap(rng.integers(0, 8, size=(5, 6, 7)), spacing=(1.5, 1.5, 2.0))
    out = resample_to_spacing(l, (1.5, 1.5, 2.0))
    assert np.array_equal(out.data, l.data)

    v = VolumeGrid(rng.normal(size=(5, 6, 7)), spacing=(1.5, 1.5, 2.0))
    out = resample_to_spacing(v, (1.5, 1.5, 2.0))
    np.testing.assert_allclose(out.data, v.data, rtol=0, atol=1e-12)


def test_resample_constant_and_labels():
    v = VolumeGrid(np.full((6, 6, 6), 42.0), spacing=(1, 1, 1))
    for target in [(0.7, 0.7, 0.7), (2, 2, 2), (1.3, 0.5, 3)]:
        out = resample_to_spacing(v, target)
        np.testing.assert_allclose(out.data, 42.0)

    rng = np.random.default_rng(2)
    l = LabelMap(rng.choice([0, 2, 6], size=(6, 6, 6)))
    out = resample_to_spacing(l, (0.6, 1.7, 0.9))
    assert set(np.unique(out.data)) <= {0, 2, 6}
    for a in range(3):
        assert abs(out.dims[a]*out.spacing[a] - l.dims[a]*l.spacing[a]) <= out.spacing[a]


def test_resample_linear_ramp_matches_trilinear_oracle():
    x, y, z = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
    ramp = VolumeGrid(3.0*x - 2.0*y + 0.5*z + 10.0)
    out = resample_to_spacing(ramp, (2, 2, 2))
    assert out.dims == (4, 4, 4)
    for idx in np.ndindex(*out.dims):
        expected = _trilinear(ramp.data, np.array(idx)*2.0)
        assert abs(out.data[idx] - expected) < 1e-9
        assert abs(out.data[idx] - (6.0*idx[0] - 4.0*idx[1] + 1.0*idx[2] + 10.0)) < 1e-9

    odd = resample_to_spacing(ramp, (1.5, 0.75, 1.25))
    for idx in [(0, 0, 0), (2, 5, 3), (4, 9, 5)]:
        p = np.array(idx)*np.array([1.5, 0.75, 1.25])
        assert abs(odd.data[idx] - _trilinear(ramp.data, p)) < 1e-9


def test_common_lattice_of_mixed_spacing():
    rng = np.random.default_rng(3)
    fine = LabelMap(rng.integers(0, 8, size=(8, 8, 8)), spacing=(2, 2, 2))
    coarse = LabelMap(rng.integers(0, 8, size=(4, 4, 4)), spacing=(4, 4, 4))
    dims, spacing, origin = common_lattice([fine, coarse])
    assert (dims, spacing, origin) == ((8, 8, 8), (2.0, 2.0, 2.0), (0.0, 0.0, 0.0))
    assert resample_to_lattice(fine, dims, spacing, origin) is fine
    up = resample_to_lattice(coarse, dims, spacing, origin)
    assert same_geometry(up, fine)
    assert np.array_equal(up.data[::2, ::2, ::2], coarse.data)
    assert np.array_equal(up.data[-1, -1, -1], coarse.data[-1, -1, -1])
    assert common_lattice([fine, coarse], spacing=4.0) == ((4, 4, 4), (4.0, 4.0, 4.0), (0.0, 0.0, 0.0))


def test_resample_to_lattice_pads_with_background():
    l = LabelMap(np.full((2, 2, 2), 3), origin=(2.0, 0.0, 0.0))
    out = resample_to_lattice(l, (4, 2, 2), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    assert np.array_equal(out.data[:, 0, 0], [0, 0, 3, 3])
    assert out.origin == (0.0, 0.0, 0.0)
