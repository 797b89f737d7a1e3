import logging
from collections import OrderedDict
from dataclasses import dataclass
from functools import partial

import numpy as np

from cardioradiomics.errors import InvalidSpacing
from cardioradiomics.features import FeatureVector, concat_structures
from cardioradiomics.radiomics import firstorder, shape, texture
from cardioradiomics.radiomics.discretize import discretize
from cardioradiomics.util import STRUCTURES
from cardioradiomics.volume import (LabelMap, VolumeGrid, extract_structure_mask,
                                    require_same_geometry, resample_to_spacing)
from cardioradiomics.workers import map_ordered

log = logging.getLogger(__name__)

FAMILIES = OrderedDict([
    ("firstorder", firstorder.NAMES),
    ("shape", shape.NAMES),
    ("glcm", texture.GLCM_NAMES),
    ("glrlm", texture.GLRLM_NAMES),
    ("glszm", texture.GLSZM_NAMES),
    ("ngtdm", texture.NGTDM_NAMES),
    ("gldm", texture.GLDM_NAMES),
])


@dataclass
class RadiomicsConfig:
    bin_width: float = 25.0
    gldm_alpha: int = 0
    # isotropic resampling target in mm; None keeps the input lattice
    spacing: float = 1.0

    def __post_init__(self):
        if not self.bin_width > 0:
            raise InvalidSpacing("bin_width must be positive, got {}".format(self.bin_width))
        if self.spacing is not None and not self.spacing > 0:
            raise InvalidSpacing("spacing must be positive, got {}".format(self.spacing))


def feature_names():
    """Column names of an extract_radiomics vector, in order."""
    return list(concat_structures({}, FAMILIES))


def structure_features(v, l, code, config):
    m = extract_structure_mask(l, code)
    if m.empty:
        log.debug("structure %s absent", STRUCTURES[code])
        return None
    d = discretize(v, m, config.bin_width)
    return {
        "firstorder": firstorder.first_order_features(v, m, d),
        "shape": shape.shape3d_features(m),
        "glcm": texture.glcm_features(d),
        "glrlm": texture.glrlm_features(d),
        "glszm": texture.glszm_features(d),
        "ngtdm": texture.ngtdm_features(d),
        "gldm": texture.gldm_features(d, config.gldm_alpha),
    }


def _structure_job(v, l, config, code):
    return structure_features(v, l, code, config)


def extract_radiomics(v: VolumeGrid, l: LabelMap, config=None) -> FeatureVector:
    """All seven families for structures 1..7, named ``<LV>_<family>_<Feature>``.

    Absent structures contribute the missing-value sentinel for every one of
    their features.
    """
    config = config or RadiomicsConfig()
    require_same_geometry(v, l, "volume and labelmap")
    if config.spacing is not None and not np.allclose(v.spacing, config.spacing):
        target = (config.spacing,)*3
        v, l = resample_to_spacing(v, target), resample_to_spacing(l, target)
    codes = list(STRUCTURES)
    results = map_ordered(partial(_structure_job, v, l, config), codes)
    return concat_structures(dict(zip(codes, results)), FAMILIES)


def _heart():
    from cardioradiomics.util import make_ball
    rng = np.random.default_rng(0)
    data = rng.normal(40, 30, size=(14, 14, 14))
    labels = np.zeros((14, 14, 14), dtype=np.uint8)
    labels[make_ball((14, 14, 14), (7, 7, 7), 4)] = 1
    labels[2:5, 2:5, 9:12] = 3
    return data, labels


def test_feature_count_and_names():
    names = feature_names()
    assert len(names) == 406
    assert names[0] == "LV_firstorder_Mean"
    assert "MYO_glcm_Contrast" in names
    assert names[-1] == "PT_gldm_DependenceNonUniformity"
    assert sum(len(n) for n in FAMILIES.values()) == 58


def test_only_present_structures_populated():
    data, labels = _heart()
    f = extract_radiomics(VolumeGrid(data), LabelMap(labels))
    assert list(f) == feature_names()
    assert np.isfinite(f["LV_firstorder_Mean"]) and np.isfinite(f["LV_ngtdm_Coarseness"])
    assert np.isfinite(f["RV_shape_VoxelVolume"])
    assert all(np.isnan(f[n]) for n in f if n.startswith(("MYO_", "LA_", "RA_", "AO_", "PT_")))


def test_deterministic_and_scheduling_independent():
    from cardioradiomics import workers
    data, labels = _heart()
    a = extract_radiomics(VolumeGrid(data), LabelMap(labels)).values_array()
    b = extract_radiomics(VolumeGrid(data), LabelMap(labels)).values_array()
    with workers.use("thread", max_workers=3):
        c = extract_radiomics(VolumeGrid(data), LabelMap(labels)).values_array()
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_intensity_shift_invariance():
    data, labels = _heart()
    a = extract_radiomics(VolumeGrid(data), LabelMap(labels))
    b = extract_radiomics(VolumeGrid(data + 300.0), LabelMap(labels))
    for name in a:
        if np.isnan(a[name]):
            continue
        family = name.split("_")[1]
        if family in ("glcm", "glrlm", "glszm", "ngtdm", "gldm", "shape"):
            np.testing.assert_allclose(b[name], a[name], rtol=1e-9, atol=1e-12, err_msg=name)
    np.testing.assert_allclose(b["LV_firstorder_Mean"], a["LV_firstorder_Mean"] + 300.0, rtol=1e-12)


def test_mask_crop_invariance():
    data, labels = _heart()
    rng = np.random.default_rng(1)
    padded = np.pad(data, 3, constant_values=0.0)
    outside = np.pad(labels, 3) == 0
    padded[outside] = rng.normal(0, 500, size=outside.sum())
    a = extract_radiomics(VolumeGrid(data), LabelMap(labels))
    b = extract_radiomics(VolumeGrid(padded), LabelMap(np.pad(labels, 3)))
    np.testing.assert_allclose(b.values_array(), a.values_array(), rtol=1e-9, atol=1e-12)


def test_geometry_mismatch():
    import pytest
    from cardioradiomics.errors import GeometryMismatch
    with pytest.raises(GeometryMismatch):
        extract_radiomics(VolumeGrid(np.zeros((4, 4, 4))), LabelMap(np.zeros((4, 4, 5))))
