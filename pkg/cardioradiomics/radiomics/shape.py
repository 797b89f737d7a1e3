import warnings

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from cardioradiomics.errors import DegenerateShape, EmptyMask
from cardioradiomics.features import FeatureVector
from cardioradiomics.volume import StructureMask

NAMES = ["VoxelVolume", "MeshSurfaceArea", "Sphericity", "Compactness",
         "Elongation", "Flatness", "MajorAxisLength", "MinorAxisLength",
         "LeastAxisLength", "Maximum3DDiameter", "SurfaceVolumeRatio"]


def surface_area(mask, spacing):
    """Area of the voxel-face boundary mesh: every face between a mask voxel
    and a non-mask voxel contributes its rectangle."""
    padded = np.pad(mask.astype(np.int8), 1)
    area = 0.0
    for axis in range(3):
        faces = np.count_nonzero(np.diff(padded, axis=axis))
        others = [spacing[a] for a in range(3) if a != axis]
        area += faces*others[0]*others[1]
    return area


def boundary_points(mask, spacing):
    padded = np.pad(mask, 1)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)*np.asarray(spacing, dtype=float)


def max_diameter(points):
    if len(points) < 2:
        return 0.0
    if len(points) > 16:
        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            # flat or collinear sets; joggled hull still returns input points
            points = points[ConvexHull(points, qhull_options="QJ").vertices]
    return float(pdist(points).max())


def shape3d_features(m: StructureMask) -> FeatureVector:
    if m.empty:
        raise EmptyMask("structure {} has no voxels".format(m.structure_code))
    spacing = m.spacing
    volume = m.count*float(np.prod(spacing))
    area = surface_area(m.data, spacing)

    pts = m.coords()*np.asarray(spacing, dtype=float)
    if m.count > 1:
        cov = np.cov(pts, rowvar=False, bias=True)
        eig = np.clip(np.sort(np.linalg.eigvalsh(cov))[::-1], 0, None)
    else:
        eig = np.zeros(3)
    major, minor, least = eig
    if m.count == 1 or least <= 1e-12*max(major, 1.0):
        warnings.warn("structure {}: single voxel or coplanar mask".format(m.structure_code),
                      DegenerateShape)

    return FeatureVector([
        ("VoxelVolume", volume),
        ("MeshSurfaceArea", area),
        ("Sphericity", np.pi**(1.0/3)*(6*volume)**(2.0/3)/area),
        ("Compactness", 36*np.pi*volume**2/area**3),
        ("Elongation", np.sqrt(minor/major) if major > 0 else 0.0),
        ("Flatness", np.sqrt(least/major) if major > 0 else 0.0),
        ("MajorAxisLength", 4*np.sqrt(major)),
        ("MinorAxisLength", 4*np.sqrt(minor)),
        ("LeastAxisLength", 4*np.sqrt(least)),
        ("Maximum3DDiameter", max_diameter(boundary_points(m.data, spacing))),
        ("SurfaceVolumeRatio", area/volume),
    ])


def py_surface_area(mask, spacing):
    """Counts exposed faces voxel by voxel."""
    area = 0.0
    dims = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not (0 <= n[axis] < dims[axis]) or not mask[tuple(n)]:
                    others = [spacing[a] for a in range(3) if a != axis]
                    area += others[0]*others[1]
    return area


def _cube(s, pad=2):
    data = np.zeros((s + 2*pad,)*3, dtype=bool)
    data[pad:pad + s, pad:pad + s, pad:pad + s] = True
    return StructureMask(data, 1)


def test_cube_closed_form():
    for s in [1, 3, 6]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateShape)
            f = shape3d_features(_cube(s))
        assert f["VoxelVolume"] == s**3
        assert f["MeshSurfaceArea"] == 6*s**2
        expected = np.pi**(1.0/3)*(6.0*s**3)**(2.0/3)/(6.0*s**2)
        np.testing.assert_allclose(f["Sphericity"], expected, rtol=1e-12)
        np.testing.assert_allclose(f["Sphericity"], (np.pi/6)**(1.0/3), rtol=1e-12)
    f = shape3d_features(_cube(4))
    np.testing.assert_allclose(f["Maximum3DDiameter"], np.sqrt(3)*3, rtol=1e-12)
    np.testing.assert_allclose(f["Elongation"], 1.0, rtol=1e-12)


def test_anisotropic_spacing_volume_and_area():
    rng = np.random.default_rng(3)
    data = rng.random((5, 6, 4)) < 0.5
    data[2, 2, 2] = True
    spacing = (0.5, 1.25, 2.0)
    m = StructureMask(data, 1, spacing)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateShape)
        f = shape3d_features(m)
    np.testing.assert_allclose(f["VoxelVolume"], data.sum()*0.5*1.25*2.0, rtol=1e-12)
    np.testing.assert_allclose(f["MeshSurfaceArea"], py_surface_area(data, spacing), rtol=1e-12)


def test_ball_elongation():
    from cardioradiomics.util import make_ball
    m = StructureMask(make_ball((25, 25, 25), (12, 12, 12), 10), 1)
    f = shape3d_features(m)
    assert abs(f["Elongation"] - 1.0) < 0.02
    assert abs(f["Flatness"] - 1.0) < 0.02
    pts = m.coords().astype(float)
    eig = np.sort(np.linalg.eigvalsh(np.cov(pts.T, bias=True)))[::-1]
    np.testing.assert_allclose(f["Elongation"], np.sqrt(eig[1]/eig[0]), rtol=1e-9)


def test_rotation_invariance():
    rng = np.random.default_rng(4)
    data = np.zeros((9, 9, 9), dtype=bool)
    data[2:7, 3:6, 1:8] = rng.random((5, 3, 7)) < 0.8
    base = shape3d_features(StructureMask(data, 1))
    for k, axes in [(1, (0, 1)), (2, (1, 2)), (3, (0, 2))]:
        rotated = shape3d_features(StructureMask(np.rot90(data, k, axes), 1))
        for name in NAMES:
            np.testing.assert_allclose(rotated[name], base[name], rtol=1e-9, atol=1e-12, err_msg=name)


def test_degenerate_shapes_warn():
    import pytest
    data = np.zeros((3, 3, 3), dtype=bool)
    data[1, 1, 1] = True
    with pytest.warns(DegenerateShape):
        f = shape3d_features(StructureMask(data, 1))
    assert f["VoxelVolume"] == 1.0 and f["Elongation"] == 0.0
    plane = np.zeros((5, 5, 5), dtype=bool)
    plane[1:4, 1:4, 2] = True
    with pytest.warns(DegenerateShape):
        f = shape3d_features(StructureMask(plane, 1))
    assert f["LeastAxisLength"] < 1e-6
