"""Deformation features: per-structure SVD of masked displacement vectors."""
from collections import OrderedDict
from dataclasses import dataclass
from functools import partial

import numpy as np

from cardioradiomics.errors import EmptyMask, InvalidNSvd
from cardioradiomics.features import FeatureVector, concat_structures
from cardioradiomics.util import STRUCTURES
from cardioradiomics.volume import LabelMap, StructureMask, extract_structure_mask, require_same_geometry
from cardioradiomics.workers import map_ordered

FAMILY = "geom"
MAX_SVD = 3


@dataclass(frozen=True, eq=False)
class StructureDisplacementMatrix:
    structure_code: int
    matrix: np.ndarray           # (K, 3) mm
    centroid_offset: np.ndarray  # (3,) mm


def geometric_names(n_svd=MAX_SVD):
    return ["sv{}".format(i + 1) for i in range(n_svd)] + ["meanmag"]


def _check_n_svd(n_svd):
    if n_svd not in (1, 2, 3):
        raise InvalidNSvd("n_svd must be 1, 2 or 3, got {}".format(n_svd))


def mask_displacements(field, m: StructureMask) -> StructureDisplacementMatrix:
    require_same_geometry(field, m, "field and mask")
    if m.empty:
        raise EmptyMask("structure {} has no voxels".format(m.structure_code))
    # boolean indexing walks voxels in lexicographic (x, y, z) order
    matrix = np.array(field.data[m.data], dtype=np.float64)
    return StructureDisplacementMatrix(m.structure_code, matrix, matrix.mean(axis=0))


def svd_features(sdm: StructureDisplacementMatrix, n_svd=MAX_SVD, center=False) -> FeatureVector:
    """sigma_i / sqrt(K) for i <= n_svd, zero padded, plus the mean |u| in mm."""
    _check_n_svd(n_svd)
    a = sdm.matrix
    k = a.shape[0]
    meanmag = float(np.mean(np.sqrt(np.sum(a**2, axis=1))))
    if center:
        a = a - a.mean(axis=0)
    sigma = np.linalg.svd(a, compute_uv=False)/np.sqrt(k)
    sigma = np.concatenate([sigma, np.zeros(MAX_SVD)])[:n_svd]
    return FeatureVector(zip(geometric_names(n_svd), [float(s) for s in sigma] + [meanmag]))


def _structure_job(field, l, n_svd, center, code):
    m = extract_structure_mask(l, code)
    if m.empty:
        return None
    return {FAMILY: svd_features(mask_displacements(field, m), n_svd, center)}


def extract_geometric(field, l: LabelMap, n_svd=MAX_SVD, center=False) -> FeatureVector:
    """``<LV>_geom_sv1..svN`` and ``<LV>_geom_meanmag`` for structures 1..7."""
    _check_n_svd(n_svd)
    require_same_geometry(field, l, "field and labelmap")
    codes = list(STRUCTURES)
    results = map_ordered(partial(_structure_job, field, l, n_svd, center), codes)
    return concat_structures(dict(zip(codes, results)), OrderedDict([(FAMILY, geometric_names(n_svd))]))


def py_singular_values(a):
    """Square roots of the Gram matrix eigenvalues, descending."""
    gram = np.asarray(a, dtype=np.float64).T @ np.asarray(a, dtype=np.float64)
    eig = np.sort(np.linalg.eigvalsh(gram))[::-1]
    return np.sqrt(np.clip(eig, 0, None))


def _field(vectors, spacing=(1.0, 1.0, 1.0)):
    from cardioradiomics.registration import DisplacementField
    return DisplacementField(vectors, spacing)


def _sdm(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    return StructureDisplacementMatrix(1, matrix, matrix.mean(axis=0))


def test_mask_displacements():
    dims = (6, 5, 4)
    mask = np.zeros(dims, dtype=bool)
    mask[1:3, 1:3, 1:3] = True
    mask[4, 0, 0] = mask[5, 4, 3] = True
    m = StructureMask(mask, 2)
    zero = mask_displacements(_field(np.zeros(dims + (3,))), m)
    assert zero.matrix.shape == (10, 3) and not zero.matrix.any()
    assert np.array_equal(zero.centroid_offset, [0, 0, 0])
    t = np.array([1.0, -2.0, 0.5])
    const = mask_displacements(_field(np.broadcast_to(t, dims + (3,))), m)
    assert np.array_equal(const.matrix, np.tile(t, (10, 1)))
    rng = np.random.default_rng(0)
    f = _field(rng.normal(size=dims + (3,)))
    assert np.array_equal(mask_displacements(f, m).matrix, mask_displacements(f, m).matrix)
    assert np.array_equal(mask_displacements(f, m).matrix[0], f.data[1, 1, 1])


def test_svd_of_constant_field():
    t = np.array([3.0, 0.0, 4.0])
    for k in [1, 10, 100]:
        f = svd_features(_sdm(np.tile(t, (k, 1))))
        np.testing.assert_allclose([f["sv1"], f["sv2"], f["sv3"]], [5.0, 0, 0], atol=1e-12)
        assert abs(f["meanmag"] - 5.0) < 1e-12
        c = svd_features(_sdm(np.tile(t, (k, 1))), center=True)
        np.testing.assert_allclose([c["sv1"], c["sv2"], c["sv3"]], 0.0, atol=1e-12)
        assert abs(c["meanmag"] - 5.0) < 1e-12


def test_svd_matches_gram_oracle():
    rng = np.random.default_rng(1)
    for k in [1, 2, 3, 7, 50]:
        a = rng.normal(size=(k, 3))
        f = svd_features(_sdm(a), 3)
        ours = np.array([f["sv1"], f["sv2"], f["sv3"]])
        assert ours[0] >= ours[1] >= ours[2] >= 0
        # the oracle only resolves squared singular values to machine precision
        np.testing.assert_allclose(ours**2, py_singular_values(a)**2/k, rtol=1e-9, atol=1e-12)


def test_rotation_and_scaling():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(40, 3))
    base = svd_features(_sdm(a)).values_array()
    rot = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    np.testing.assert_allclose(svd_features(_sdm(a @ rot.T)).values_array(), base, rtol=1e-9)
    for c in [0.0, 0.5, 2.0]:
        np.testing.assert_allclose(svd_features(_sdm(c*a)).values_array(), c*base, rtol=1e-12, atol=1e-15)


def test_invalid_n_svd():
    import pytest
    for n in [0, 4]:
        with pytest.raises(InvalidNSvd):
            svd_features(_sdm(np.ones((3, 3))), n)


def test_extract_geometric():
    dims = (14, 7, 4)
    labels = np.zeros(dims, dtype=np.uint8)
    for code in STRUCTURES:
        labels[2*(code - 1):2*code, :, :] = code
    l = LabelMap(labels)
    zero = extract_geometric(_field(np.zeros(dims + (3,))), l)
    assert len(zero) == 28 and not zero.values_array().any()
    assert list(zero)[:4] == ["LV_geom_sv1", "LV_geom_sv2", "LV_geom_sv3", "LV_geom_meanmag"]
    rng = np.random.default_rng(3)
    u = rng.normal(size=dims + (3,))
    one = extract_geometric(_field(u), l).values_array()
    two = extract_geometric(_field(2*u), l).values_array()
    np.testing.assert_allclose(two, 2*one, rtol=1e-12)
    assert len(extract_geometric(_field(u), l, n_svd=1)) == 14

    partial_labels = labels.copy()
    partial_labels[partial_labels > 1] = 0
    f = extract_geometric(_field(u), LabelMap(partial_labels))
    assert np.isfinite(f["LV_geom_sv1"]) and np.isnan(f["PT_geom_meanmag"])
