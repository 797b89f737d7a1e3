"""Deformable labelmap registration and population atlas construction.

Labelmaps are relaxed into 8-channel soft label images and registered with a
demons-style scheme: the SSD force is smoothed (fluid), scaled to a fixed
maximum step, added to the field and the field is smoothed again (diffusion).
Steps that would raise the energy are halved, and rejected after
``max_halvings`` tries. Three pyramid levels are used, coarse to fine.

Fields are dense displacements in mm on the subject lattice and are applied
by backward sampling: ``warp(img, u)(y) = img(y - u(y))``.
"""
import logging
import os
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd
from scipy import ndimage

from cardioradiomics.errors import ConfigError, EmptyCohort, GeometryMismatch, NonConvergence, NonFiniteData
from cardioradiomics.util import N_LABELS
from cardioradiomics.volume import LabelMap, VolumeGrid, _Grid, same_geometry
from cardioradiomics.workers import map_ordered

log = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 8


@dataclass
class RegistrationParams:
    label_sigma_mm: float = 1.0
    sigma_fluid: float = 1.0       # voxels of the current level
    sigma_diffusion: float = 1.5   # voxels of the current level
    levels: int = 3
    iterations: int = 100          # per level
    step: float = 0.5              # voxels
    max_halvings: int = 6
    tol: float = 1e-6
    reg_weight: float = 0.01

    def __post_init__(self):
        for name in ("label_sigma_mm", "sigma_fluid", "sigma_diffusion", "tol", "reg_weight"):
            if getattr(self, name) < 0:
                raise ConfigError("{} must be >= 0, got {}".format(name, getattr(self, name)))
        if self.levels < 1 or self.iterations < 0 or self.max_halvings < 0 or not self.step > 0:
            raise ConfigError("invalid registration schedule {}".format(self))


@dataclass
class RegistrationReport:
    initial_energy: float
    final_energy: float
    levels: list = field(default_factory=list)   # (level, dims, start, end, iterations, converged)
    converged: bool = True


@dataclass(frozen=True, eq=False)
class SoftLabelImage(_Grid):
    data: np.ndarray   # (x, y, z, 8) probabilities
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 4 or data.shape[3] != N_LABELS:
            raise GeometryMismatch("soft labels need shape (x, y, z, {}), got {}".format(N_LABELS, data.shape))
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def hard(self) -> LabelMap:
        """Per-voxel argmax; ties go to the lowest code."""
        return LabelMap(np.argmax(self.data, axis=-1), self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class DisplacementField(_Grid):
    data: np.ndarray   # (x, y, z, 3) mm, world axes, subject -> atlas
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    report: RegistrationReport = None

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 4 or data.shape[3] != 3:
            raise GeometryMismatch("displacement field needs shape (x, y, z, 3), got {}".format(data.shape))
        if not np.all(np.isfinite(data)):
            raise NonFiniteData("displacement field has non-finite components")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, like):
        return cls(np.zeros(tuple(like.dims) + (3,)), like.spacing, like.origin)

    def magnitude_voxels(self):
        return np.sqrt(np.sum((self.data/np.asarray(self.spacing))**2, axis=-1))


@dataclass(frozen=True, eq=False)
class Atlas:
    soft: SoftLabelImage
    labels: LabelMap
    iterations: int
    cohort_size: int


def to_soft_labels(l: LabelMap, smoothing_sigma=1.0) -> SoftLabelImage:
    """One-hot encoding, Gaussian smoothing per channel (sigma in mm), renormalised."""
    if smoothing_sigma < 0:
        raise ConfigError("smoothing sigma must be >= 0, got {}".format(smoothing_sigma))
    onehot = np.eye(N_LABELS)[l.data]
    if smoothing_sigma > 0:
        sigma = [smoothing_sigma/s for s in l.spacing] + [0.0]
        onehot = ndimage.gaussian_filter(onehot, sigma, mode="nearest")
        onehot = _normalise(onehot)
    return SoftLabelImage(onehot, l.spacing, l.origin)


def _normalise(channels):
    channels = np.clip(channels, 0.0, None)
    total = channels.sum(axis=-1, keepdims=True)
    total[total == 0] = 1.0
    return channels/total


def _sample_coords(u, spacing):
    idx = np.indices(u.shape[:3], dtype=np.float64)
    return [idx[a] - u[..., a]/spacing[a] for a in range(3)]


def _warp_channels(channels, u, spacing, order=1):
    coords = _sample_coords(u, spacing)
    out = np.empty(channels.shape)
    for c in range(channels.shape[3]):
        out[..., c] = ndimage.map_coordinates(channels[..., c], coords, order=order, mode="nearest")
    return out


def warp(image, f: DisplacementField):
    """Backward warp of a LabelMap (nearest), SoftLabelImage or VolumeGrid (trilinear)."""
    if not same_geometry(image, f):
        raise GeometryMismatch("image {} and field {} differ in geometry".format(image.geometry, f.geometry))
    if isinstance(image, LabelMap):
        coords = _sample_coords(f.data, f.spacing)
        out = ndimage.map_coordinates(image.data, coords, order=0, mode="nearest")
        return LabelMap(out, image.spacing, image.origin)
    if isinstance(image, SoftLabelImage):
        out = _normalise(_warp_channels(image.data, f.data, f.spacing))
        return SoftLabelImage(out, image.spacing, image.origin)
    if isinstance(image, VolumeGrid):
        coords = _sample_coords(f.data, f.spacing)
        out = ndimage.map_coordinates(image.data, coords, order=1, mode="nearest")
        return VolumeGrid(out, image.spacing, image.origin)
    raise TypeError("cannot warp {}".format(type(image).__name__))


def _gradient(a, spacing):
    """Per-axis central differences in mm; zero along axes of length 1."""
    out = []
    for axis in range(3):
        if a.shape[axis] < 2:
            out.append(np.zeros(a.shape))
        else:
            out.append(np.gradient(a, spacing[axis], axis=axis))
    return out


def _energy(warped, fixed, u, spacing, reg_weight):
    data = np.mean(np.sum((warped - fixed)**2, axis=-1))
    if reg_weight == 0:
        return data
    reg = sum(np.mean(g**2) for i in range(3) for g in _gradient(u[..., i], spacing))
    return data + reg_weight*reg


def _force(warped, fixed, spacing, sigma):
    diff = warped - fixed
    force = np.zeros(warped.shape[:3] + (3,))
    for c in range(warped.shape[3]):
        if not np.any(diff[..., c]):
            continue
        for axis, g in enumerate(_gradient(warped[..., c], spacing)):
            force[..., axis] += 2*diff[..., c]*g
    if sigma > 0:
        force = ndimage.gaussian_filter(force, (sigma, sigma, sigma, 0), mode="nearest")
    return force


def _smooth_field(u, sigma):
    if sigma <= 0:
        return u
    return ndimage.gaussian_filter(u, (sigma, sigma, sigma, 0), mode="nearest")


def _descend(moving, fixed, spacing, u, params):
    spacing = np.asarray(spacing, dtype=np.float64)

    def energy(v):
        return _energy(_warp_channels(moving, v, spacing), fixed, v, spacing, params.reg_weight)

    e = start = energy(u)
    converged = params.iterations == 0
    iterations = 0
    for iterations in range(1, params.iterations + 1):
        d = _force(_warp_channels(moving, u, spacing), fixed, spacing, params.sigma_fluid)
        norm = np.sqrt(np.sum((d/spacing)**2, axis=-1)).max()
        if not norm > 0:
            converged = True
            break
        d *= params.step/norm
        s, trial, e_trial = 1.0, None, None
        for _ in range(params.max_halvings + 1):
            candidate = _smooth_field(u + s*d, params.sigma_diffusion)
            e_candidate = energy(candidate)
            if e_candidate <= e:
                trial, e_trial = candidate, e_candidate
                break
            s *= 0.5
        if trial is None:
            converged = True
            break
        decrease = (e - e_trial)/e if e > 0 else 0.0
        u, e = trial, e_trial
        if decrease < params.tol:
            converged = True
            break
    return u, start, e, iterations, converged


def _pyramid(channels, spacing, levels):
    """Finest first; level k keeps every 2**k-th voxel after Gaussian smoothing."""
    out = [(channels, tuple(spacing))]
    for k in range(1, levels):
        f = 2**k
        smoothed = ndimage.gaussian_filter(channels, (f/2.0, f/2.0, f/2.0, 0), mode="nearest")
        coarse = smoothed[::f, ::f, ::f]
        if min(coarse.shape[:3]) < MIN_LEVEL_SIZE:
            break
        out.append((coarse, tuple(s*f for s in spacing)))
    return out


def _upsample(u, dims):
    coords = np.indices(dims, dtype=np.float64)/2.0
    out = np.empty(tuple(dims) + (3,))
    for a in range(3):
        out[..., a] = ndimage.map_coordinates(u[..., a], coords, order=1, mode="nearest")
    return out


def register(moving: SoftLabelImage, fixed: SoftLabelImage, params=None) -> DisplacementField:
    """Field u with warp(moving, u) close to fixed.

    The RegistrationReport is attached as ``field.report``. Its final energy
    never exceeds the initial (zero field) energy at full resolution.
    """
    params = params or RegistrationParams()
    if not same_geometry(moving, fixed):
        raise GeometryMismatch("moving {} and fixed {} differ in geometry".format(moving.geometry, fixed.geometry))
    mov = _pyramid(moving.data, moving.spacing, params.levels)
    fix = _pyramid(fixed.data, fixed.spacing, params.levels)

    report = RegistrationReport(initial_energy=_energy(moving.data, fixed.data,
                                                       np.zeros(tuple(moving.dims) + (3,)),
                                                       moving.spacing, params.reg_weight),
                                final_energy=None)
    u = None
    for level in reversed(range(len(mov))):
        (m, spacing), (fx, _) = mov[level], fix[level]
        zero = np.zeros(m.shape[:3] + (3,))
        if u is None:
            u = zero
        else:
            u = _upsample(u, m.shape[:3])
            e_up = _energy(_warp_channels(m, u, spacing), fx, u, spacing, params.reg_weight)
            if e_up > _energy(m, fx, zero, spacing, params.reg_weight):
                u = zero
        u, start, end, iterations, converged = _descend(m, fx, spacing, u, params)
        log.debug("level %d %s: energy %.6g -> %.6g in %d iterations", level, m.shape[:3],
                  start, end, iterations)
        report.levels.append((level, m.shape[:3], start, end, iterations, converged))
        report.converged = report.converged and converged
        report.final_energy = end

    if not report.converged:
        warnings.warn("registration hit the iteration cap while still improving", NonConvergence)
    return DisplacementField(u, moving.spacing, moving.origin, report)


def jacobian_determinant(f: DisplacementField) -> VolumeGrid:
    """det(I + grad u) per voxel by central differences."""
    jac = np.zeros(tuple(f.dims) + (3, 3))
    for i in range(3):
        for j, g in enumerate(_gradient(f.data[..., i], f.spacing)):
            jac[..., i, j] = g
        jac[..., i, i] += 1.0
    return VolumeGrid(np.linalg.det(jac), f.spacing, f.origin)


def _register_job(fixed, params, moving):
    return register(moving, fixed, params)


def build_atlas(cohort, iterations=3, params=None):
    """Unbiased template estimation from a cohort of labelmaps.

    Starts from the voxel-wise mean of the soft labels. Each iteration
    registers every subject to the current atlas, removes the cohort-mean
    displacement from all fields and averages the warped soft labels.
    Returns ``(Atlas, fields)`` with one subject -> atlas field per subject.
    """
    params = params or RegistrationParams()
    cohort = list(cohort)
    if not cohort:
        raise EmptyCohort("atlas construction needs at least one labelmap")
    for l in cohort[1:]:
        if not same_geometry(l, cohort[0]):
            raise GeometryMismatch("cohort labelmaps differ in geometry: {} vs {}".format(
                l.geometry, cohort[0].geometry))
    ref = cohort[0]
    soft = [to_soft_labels(l, params.label_sigma_mm) for l in cohort]
    atlas = SoftLabelImage(np.mean(np.stack([s.data for s in soft]), axis=0), ref.spacing, ref.origin)
    fields = [DisplacementField.zeros(ref) for _ in cohort]

    for it in range(iterations):
        registered = map_ordered(partial(_register_job, atlas, params), soft)
        mean = np.mean(np.stack([f.data for f in registered]), axis=0)
        fields = [DisplacementField(f.data - mean, f.spacing, f.origin, f.report) for f in registered]
        warped = [warp(s, f) for s, f in zip(soft, fields)]
        atlas = SoftLabelImage(np.mean(np.stack([w.data for w in warped]), axis=0), ref.spacing, ref.origin)
        log.info("atlas iteration %d/%d: mean |u| %.3f voxels, removed drift %.3f voxels",
                 it + 1, iterations,
                 np.mean([f.magnitude_voxels().mean() for f in fields]),
                 np.sqrt(np.sum((mean/np.asarray(ref.spacing))**2, axis=-1)).mean())

    return Atlas(atlas, atlas.hard(), iterations, len(cohort)), fields


def registration_qc(subject_ids, fields) -> pd.DataFrame:
    """Per-subject final energy, mean |u| in mm and percentage of folded voxels."""
    rows = []
    for sid, f in zip(subject_ids, fields):
        det = jacobian_determinant(f).data
        rows.append({
            "subject_id": sid,
            "final_energy": f.report.final_energy if f.report is not None else np.nan,
            "converged": f.report.converged if f.report is not None else np.nan,
            "mean_displacement_mm": float(np.mean(np.sqrt(np.sum(f.data**2, axis=-1)))),
            "folding_percent": 100.0*float(np.mean(det <= 0)),
        })
    return pd.DataFrame(rows, columns=["subject_id", "final_energy", "converged",
                                       "mean_displacement_mm", "folding_percent"])


def save_field(f: DisplacementField, path):
    from cardioradiomics.io.nifti import save_vectors
    save_vectors(f.data, f.spacing, f.origin, path)


def load_field(path) -> DisplacementField:
    from cardioradiomics.io.nifti import load_vectors
    vectors, spacing, origin = load_vectors(path)
    return DisplacementField(vectors, spacing, origin)


def save_atlas(atlas: Atlas, directory):
    from cardioradiomics.io.nifti import save_vectors, save_volume
    os.makedirs(str(directory), exist_ok=True)
    save_volume(atlas.labels, os.path.join(str(directory), "atlas_labels.nii.gz"))
    save_vectors(atlas.soft.data, atlas.soft.spacing, atlas.soft.origin,
                 os.path.join(str(directory), "atlas_soft.nii.gz"))


def load_atlas(directory) -> Atlas:
    from cardioradiomics.io.nifti import load_labelmap, load_vectors
    labels = load_labelmap(os.path.join(str(directory), "atlas_labels.nii.gz"))
    channels, spacing, origin = load_vectors(os.path.join(str(directory), "atlas_soft.nii.gz"))
    return Atlas(SoftLabelImage(_normalise(channels), spacing, origin), labels, iterations=-1, cohort_size=-1)


def _ball_labels(dims, center, radius, code=1):
    from cardioradiomics.util import make_ball
    data = np.zeros(dims, dtype=np.uint8)
    data[make_ball(dims, center, radius)] = code
    return LabelMap(data)


def _centroid(l, code=1):
    return np.argwhere(l.data == code).mean(axis=0)


def test_soft_labels():
    l = _ball_labels((12, 12, 12), (6, 6, 6), 3)
    exact = to_soft_labels(l, 0)
    assert np.array_equal(exact.data, np.eye(N_LABELS)[l.data])
    uniform = to_soft_labels(LabelMap(np.ones((5, 5, 5))), 1.0)
    np.testing.assert_allclose(uniform.data[..., 1], 1.0)
    smooth = to_soft_labels(l, 1.0)
    np.testing.assert_allclose(smooth.data.sum(axis=-1), 1.0, atol=1e-6)
    assert smooth.data.min() >= 0 and smooth.data.max() <= 1


def test_warp_zero_and_constant_field():
    l = _ball_labels((24, 24, 24), (11, 12, 12), 5)
    zero = DisplacementField.zeros(l)
    assert np.array_equal(warp(l, zero).data, l.data)
    shift = np.zeros((24, 24, 24, 3))
    shift[..., 0] = 1.0
    moved = warp(l, DisplacementField(shift))
    np.testing.assert_allclose(_centroid(moved) - _centroid(l), [1, 0, 0], atol=0.2)
    assert set(np.unique(moved.data)) <= set(range(N_LABELS))
    soft = warp(to_soft_labels(l, 1.0), DisplacementField(shift))
    np.testing.assert_allclose(soft.data.sum(axis=-1), 1.0, atol=1e-6)


def test_warp_geometry_mismatch():
    import pytest
    l = _ball_labels((8, 8, 8), (4, 4, 4), 2)
    with pytest.raises(GeometryMismatch):
        warp(l, DisplacementField(np.zeros((8, 8, 9, 3))))
    with pytest.raises(GeometryMismatch):
        warp(l, DisplacementField(np.zeros((8, 8, 8, 3)), spacing=(2, 1, 1)))


def test_identity_registration():
    s = to_soft_labels(_ball_labels((24, 24, 24), (12, 12, 12), 6))
    f = register(s, s)
    assert f.magnitude_voxels().max() <= 0.1
    assert f.report.final_energy <= f.report.initial_energy
    assert f.report.converged


def test_translation_is_recovered():
    moving = _ball_labels((32, 32, 32), (14, 16, 16), 7)
    fixed = _ball_labels((32, 32, 32), (16, 16, 16), 7)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        f = register(to_soft_labels(moving), to_soft_labels(fixed))
    inside = fixed.data == 1
    np.testing.assert_allclose(f.data[inside].mean(axis=0), [2, 0, 0], atol=0.5)
    assert f.report.final_energy <= f.report.initial_energy
    for level, dims, start, end, iterations, converged in f.report.levels:
        assert end <= start


def test_energy_non_increasing_on_unrelated_shapes():
    rng = np.random.default_rng(5)
    a = LabelMap(rng.integers(0, 3, size=(16, 16, 16)))
    b = LabelMap(rng.integers(0, 3, size=(16, 16, 16)))
    params = RegistrationParams(iterations=15)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        f = register(to_soft_labels(a), to_soft_labels(b), params)
    assert f.report.final_energy <= f.report.initial_energy
    for level, dims, start, end, iterations, converged in f.report.levels:
        assert end <= start


def test_translation_equivariance():
    params = RegistrationParams(levels=1, iterations=20)
    dims = (40, 40, 40)
    results = []
    for offset in (0, 4):
        moving = _ball_labels(dims, (14 + offset, 14, 14), 4)
        fixed = _ball_labels(dims, (15 + offset, 14, 14), 4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergence)
            results.append(register(to_soft_labels(moving), to_soft_labels(fixed), params).data)
    a = results[0][8:22, 8:20, 8:20]
    b = results[1][12:26, 8:20, 8:20]
    assert np.abs(a - b).max() <= 0.1


def test_jacobian_determinant():
    l = LabelMap(np.zeros((10, 10, 10)))
    assert np.allclose(jacobian_determinant(DisplacementField.zeros(l)).data, 1.0)
    translation = np.zeros((10, 10, 10, 3))
    translation[..., 1] = 2.5
    assert np.allclose(jacobian_determinant(DisplacementField(translation)).data, 1.0)
    scaling = 0.1*np.indices((10, 10, 10)).transpose(1, 2, 3, 0).astype(float)
    det = jacobian_determinant(DisplacementField(scaling)).data
    np.testing.assert_allclose(det[1:-1, 1:-1, 1:-1], 1.1**3, rtol=1e-12)


def test_atlas_of_identical_cohort():
    l = _ball_labels((20, 20, 20), (10, 10, 10), 5)
    params = RegistrationParams(label_sigma_mm=0.0)
    atlas, fields = build_atlas([l, l, l], iterations=2, params=params)
    assert np.array_equal(atlas.labels.data, l.data)
    assert max(f.magnitude_voxels().max() for f in fields) <= 0.1
    assert atlas.cohort_size == 3 and atlas.iterations == 2


def test_atlas_iterations_zero_is_mean():
    a = _ball_labels((16, 16, 16), (7, 8, 8), 4)
    b = _ball_labels((16, 16, 16), (9, 8, 8), 4)
    atlas, fields = build_atlas([a, b], iterations=0)
    expected = (to_soft_labels(a).data + to_soft_labels(b).data)/2
    np.testing.assert_allclose(atlas.soft.data, expected, rtol=1e-12)
    assert all(not f.data.any() for f in fields)


def test_atlas_of_shifted_balls_is_centred():
    a = _ball_labels((32, 32, 32), (14, 16, 16), 6)
    b = _ball_labels((32, 32, 32), (18, 16, 16), 6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        atlas, fields = build_atlas([a, b], iterations=2)
    np.testing.assert_allclose(_centroid(atlas.labels), [16, 16, 16], atol=0.5)
    mean = np.mean([f.data for f in fields], axis=0)
    assert np.sqrt(np.sum(mean**2, axis=-1)).mean() <= 0.2


def test_empty_cohort():
    import pytest
    with pytest.raises(EmptyCohort):
        build_atlas([], iterations=1)


def test_field_and_atlas_persistence(tmp_path):
    l = _ball_labels((10, 10, 10), (5, 5, 5), 3)
    rng = np.random.default_rng(0)
    f = DisplacementField(rng.normal(size=(10, 10, 10, 3)), (1.5, 1.5, 2.0), (3.0, -2.0, 1.0))
    # the fields directory does not exist yet
    save_field(f, tmp_path/"out"/"fields"/"sub-000.nii.gz")
    g = load_field(tmp_path/"out"/"fields"/"sub-000.nii.gz")
    np.testing.assert_allclose(g.data, f.data, rtol=1e-6, atol=1e-6)
    assert same_geometry(f, g)
    atlas, _ = build_atlas([l], iterations=0)
    save_atlas(atlas, tmp_path/"atlas")
    back = load_atlas(tmp_path/"atlas")
    assert np.array_equal(back.labels.data, atlas.labels.data)
    qc = registration_qc(["s1"], [f])
    assert list(qc.columns)[0] == "subject_id" and len(qc) == 1
