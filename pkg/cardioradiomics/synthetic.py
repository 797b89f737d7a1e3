"""Synthetic cardiac CT cohorts for desk-scale runs of the full pipeline.

Every subject is a jittered arrangement of seven ellipsoids on a small grid
with smooth intensity texture. Diseased subjects additionally get a radial
dilation of the left ventricle (a shape effect), bright calcification blobs
and high-frequency myocardial texture (intensity effects). All disease
randomness is drawn after the healthy anatomy, so with every effect size at
zero a diseased subject is identical to the healthy subject with the same
index.
"""
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import ndimage

from cardioradiomics.errors import ConfigError
from cardioradiomics.util import lattice, make_ellipsoid, seeded_rng
from cardioradiomics.volume import LabelMap, VolumeGrid

log = logging.getLogger(__name__)


def _default_anatomy():
    # code -> (centre, radii) in voxels of a 32^3 grid; painted in this order
    return OrderedDict([
        (2, ((12.0, 13.0, 16.0), (6.5, 6.5, 8.5))),   # MYO outer wall
        (1, ((12.0, 13.0, 16.0), (4.5, 4.5, 6.5))),   # LV cavity
        (3, ((21.0, 12.0, 16.0), (4.0, 5.5, 6.0))),
        (4, ((12.0, 22.0, 18.0), (3.5, 3.5, 3.5))),
        (5, ((21.0, 22.0, 18.0), (3.5, 3.5, 4.0))),
        (6, ((16.0, 16.0, 26.0), (2.0, 2.0, 4.0))),
        (7, ((21.0, 16.0, 25.0), (2.0, 2.0, 3.5))),
    ])


def scaled_anatomy(dims):
    """The default layout stretched from 32^3 onto ``dims``."""
    factor = np.asarray(dims, dtype=float)/32.0
    return OrderedDict((code, (tuple(np.asarray(c)*factor), tuple(np.asarray(r)*factor)))
                       for code, (c, r) in _default_anatomy().items())


# mean HU per code, 0 is background
BASE_HU = {0: -50.0, 1: 320.0, 2: 110.0, 3: 300.0, 4: 310.0, 5: 290.0, 6: 350.0, 7: 330.0}


@dataclass
class SyntheticCohortSpec:
    n_healthy: int = 20
    n_diseased: int = 20
    dims: tuple = (32, 32, 32)
    spacing: tuple = (2.0, 2.0, 2.0)
    anatomy: OrderedDict = field(default_factory=_default_anatomy)
    centre_jitter: float = 0.75      # voxels
    radius_jitter: float = 0.05      # relative
    noise_hu: float = 15.0
    texture_hu: float = 20.0         # smooth healthy texture
    dilation_mm: float = 3.0         # LV radial dilation at the cavity centre
    dilation_width: float = 6.0      # voxels
    texture_noise_hu: float = 60.0   # high-frequency myocardial texture
    calcifications: int = 6
    calcification_hu: float = 700.0
    seed: int = 0

    def __post_init__(self):
        if self.n_healthy < 1 or self.n_diseased < 1:
            raise ConfigError("a cohort needs at least one healthy and one diseased subject")
        amplitudes = (self.dilation_mm, self.texture_noise_hu, self.calcifications, self.calcification_hu,
                      self.noise_hu, self.texture_hu, self.centre_jitter, self.radius_jitter)
        if any(a < 0 for a in amplitudes):
            raise ConfigError("effect sizes and noise amplitudes must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigError("synthetic grids need 3 dims of at least 8 voxels, got {}".format(self.dims))

    @property
    def n_subjects(self):
        return self.n_healthy + self.n_diseased

    def subject_id(self, index):
        return "sub-{:03d}".format(index)

    def is_diseased(self, index):
        return index >= self.n_healthy


def _labels(spec, rng):
    dims = tuple(spec.dims)
    data = np.zeros(dims, dtype=np.uint8)
    shift = rng.normal(0.0, spec.centre_jitter, size=3)
    lv_centre = None
    for code, (centre, radii) in spec.anatomy.items():
        scale = 1.0 + rng.normal(0.0, spec.radius_jitter, size=3)
        centre = np.asarray(centre) + shift
        data[make_ellipsoid(dims, centre, np.asarray(radii)*scale)] = code
        if code == 1:
            lv_centre = centre
    return data, lv_centre


def _dilate(data, centre, amplitude_vox, width):
    """Backward-warps labels through an outward radial bump around ``centre``."""
    p = lattice(data.shape)
    r = p - centre
    dist = np.sqrt(np.sum(r**2, axis=-1))
    direction = r/np.maximum(dist, 1e-9)[..., None]
    u = amplitude_vox*np.exp(-dist**2/(2*width**2))[..., None]*direction
    coords = np.moveaxis(p - u, -1, 0)
    return ndimage.map_coordinates(data, coords, order=0, mode="nearest").astype(np.uint8)


def synthesize_subject(spec: SyntheticCohortSpec, index, diseased=None):
    """Returns ``(VolumeGrid, LabelMap)`` for subject ``index``."""
    if diseased is None:
        diseased = spec.is_diseased(index)
    rng = seeded_rng(spec.seed, index)
    dims = tuple(spec.dims)
    labels, lv_centre = _labels(spec, rng)
    smooth = ndimage.gaussian_filter(rng.normal(size=dims), 2.0)
    smooth *= spec.texture_hu/max(float(smooth.std()), 1e-12)
    noise = rng.normal(0.0, spec.noise_hu, size=dims)

    # disease draws come strictly after the healthy ones
    dr = seeded_rng(spec.seed, index, 1)
    fine = dr.normal(size=dims)
    if diseased and spec.dilation_mm > 0 and lv_centre is not None:
        labels = _dilate(labels, lv_centre, spec.dilation_mm/float(np.mean(spec.spacing)), spec.dilation_width)

    image = np.array([BASE_HU[c] for c in range(8)])[labels] + smooth + noise
    if diseased:
        image += np.where(labels == 2, spec.texture_noise_hu*fine, 0.0)
        candidates = np.argwhere(np.isin(labels, (1, 2, 6)))
        if spec.calcifications and len(candidates):
            picks = candidates[dr.choice(len(candidates), size=spec.calcifications, replace=True)]
            blobs = np.zeros(dims)
            blobs[tuple(picks.T)] = 1.0
            blobs = ndimage.gaussian_filter(blobs, 0.7)
            image += spec.calcification_hu*blobs/max(float(blobs.max()), 1e-12)

    return VolumeGrid(image, spec.spacing), LabelMap(labels, spec.spacing)


def generate_synthetic_cohort(spec: SyntheticCohortSpec, out_dir) -> pd.DataFrame:
    """Writes ``images/<id>.nii``, ``labelmaps/<id>.nii`` and ``labels.csv``."""
    from cardioradiomics.io.nifti import save_volume
    from cardioradiomics.io.tables import write_csv
    out_dir = str(out_dir)
    for sub in ("images", "labelmaps"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rows = []
    for index in range(spec.n_subjects):
        sid = spec.subject_id(index)
        image, labels = synthesize_subject(spec, index)
        save_volume(image, os.path.join(out_dir, "images", sid + ".nii"))
        save_volume(labels, os.path.join(out_dir, "labelmaps", sid + ".nii"))
        rows.append({"subject_id": sid, "label": int(spec.is_diseased(index))})
    frame = pd.DataFrame(rows, columns=["subject_id", "label"])
    write_csv(frame, os.path.join(out_dir, "labels.csv"))
    log.info("wrote %d healthy and %d diseased subjects to %s", spec.n_healthy, spec.n_diseased, out_dir)
    return frame


def test_every_structure_present():
    spec = SyntheticCohortSpec(n_healthy=1, n_diseased=1)
    for index in range(2):
        image, labels = synthesize_subject(spec, index)
        assert set(np.unique(labels.data)) == set(range(8))
        assert labels.spacing == (2.0, 2.0, 2.0) and image.dims == (32, 32, 32)


def test_zero_effects_make_classes_identical():
    spec = SyntheticCohortSpec(n_healthy=1, n_diseased=1, dilation_mm=0.0, texture_noise_hu=0.0,
                               calcifications=0)
    hi, hl = synthesize_subject(spec, 1, diseased=False)
    di, dl = synthesize_subject(spec, 1, diseased=True)
    assert np.array_equal(hi.data, di.data) and np.array_equal(hl.data, dl.data)


def test_disease_dilates_the_left_ventricle():
    spec = SyntheticCohortSpec(n_healthy=1, n_diseased=1)
    _, healthy = synthesize_subject(spec, 0, diseased=False)
    image, diseased = synthesize_subject(spec, 0, diseased=True)
    assert np.count_nonzero(diseased.data == 1) > np.count_nonzero(healthy.data == 1)
    assert image.data.max() > 600


def test_cohort_files_are_deterministic(tmp_path):
    spec = SyntheticCohortSpec(n_healthy=2, n_diseased=2, dims=(12, 12, 12),
                               anatomy=OrderedDict([(1, ((6.0, 6.0, 6.0), (3.0, 3.0, 3.0))),
                                                    (6, ((6.0, 6.0, 10.0), (1.5, 1.5, 1.5)))]))
    frame = generate_synthetic_cohort(spec, tmp_path/"a")
    generate_synthetic_cohort(spec, tmp_path/"b")
    assert list(frame.label) == [0, 0, 1, 1]
    assert len(list((tmp_path/"a"/"images").iterdir())) == 4
    assert len(list((tmp_path/"a"/"labelmaps").iterdir())) == 4
    for sub in ("images", "labelmaps"):
        for path in (tmp_path/"a"/sub).iterdir():
            assert path.read_bytes() == (tmp_path/"b"/sub/path.name).read_bytes()
    assert (tmp_path/"a"/"labels.csv").read_text().splitlines()[:2] == ["subject_id,label", "sub-000,0"]


def test_invalid_spec():
    import pytest
    with pytest.raises(ConfigError):
        SyntheticCohortSpec(n_healthy=0)
    with pytest.raises(ConfigError):
        SyntheticCohortSpec(dilation_mm=-1.0)
