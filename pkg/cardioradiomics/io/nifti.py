"""NIfTI-1 reading and writing on top of nibabel.

Only axis-aligned affines are accepted: the rotation/zoom block must be
diagonal. Spacing comes from the header zooms, the origin from the affine
translation column. Vector images (displacement fields, soft labels) are
stored as 5D ``(x, y, z, 1, C)`` arrays with the NIfTI vector intent.
"""
import os

import nibabel as nib
import numpy as np

from cardioradiomics.errors import IoError, MalformedHeader, UnsupportedDatatype
from cardioradiomics.volume import LabelMap, VolumeGrid

SCALAR_DTYPES = (np.uint8, np.int16, np.int32, np.float32, np.float64)
VECTOR_INTENT = "vector"


def _affine(spacing, origin):
    affine = np.diag([float(s) for s in spacing] + [1.0])
    affine[:3, 3] = origin
    return affine


def _open(path):
    if not os.path.exists(str(path)):
        raise IoError("no such file: {}".format(path))
    try:
        img = nib.load(str(path))
    except OSError as exc:
        raise IoError("cannot read {}: {}".format(path, exc)) from exc
    except Exception as exc:
        # nibabel signals bad magic, sizeof_hdr and friends with several types
        raise MalformedHeader("cannot parse {}: {}".format(path, exc)) from exc
    if type(img) is not nib.Nifti1Image:
        raise MalformedHeader("{} is not a NIfTI-1 image".format(path))
    return img


def _geometry(img, path):
    hdr = img.header
    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim < 3 or ndim > 7 or any(int(d) <= 0 for d in dim[1:ndim + 1]):
        raise MalformedHeader("{} has invalid dims {}".format(path, list(dim)))
    affine = img.affine
    if affine is None or not np.all(np.isfinite(affine)):
        raise MalformedHeader("{} has no usable affine".format(path))
    block = affine[:3, :3]
    if np.max(np.abs(block - np.diag(np.diag(block)))) > 1e-6*np.max(np.abs(block)):
        raise MalformedHeader("{} has a non axis-aligned affine".format(path))
    spacing = tuple(float(z) for z in hdr.get_zooms()[:3])
    if any(not s > 0 for s in spacing):
        raise MalformedHeader("{} has non-positive spacing {}".format(path, spacing))
    origin = tuple(float(o) for o in affine[:3, 3])
    return spacing, origin


def _read(img, path):
    try:
        # applies scl_slope / scl_inter for integer storage
        return img.get_fdata(dtype=np.float64)
    except OSError as exc:
        raise IoError("cannot read data of {}: {}".format(path, exc)) from exc
    except Exception as exc:
        raise MalformedHeader("cannot decode data of {}: {}".format(path, exc)) from exc


def load_volume(path) -> VolumeGrid:
    img = _open(path)
    dtype = img.header.get_data_dtype()
    if dtype.fields is not None or dtype.type not in SCALAR_DTYPES:
        raise UnsupportedDatatype("{} has unsupported datatype {}".format(path, dtype))
    spacing, origin = _geometry(img, path)
    shape = img.shape
    if len(shape) > 3 and any(s != 1 for s in shape[3:]):
        raise UnsupportedDatatype("{} is not a scalar volume, shape {}".format(path, shape))
    data = _read(img, path).reshape(shape[:3])
    return VolumeGrid(data, spacing, origin)


def load_labelmap(path) -> LabelMap:
    v = load_volume(path)
    return LabelMap(np.rint(v.data), v.spacing, v.origin)


def _write(img, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(str(path))), exist_ok=True)
        nib.save(img, str(path))
    except OSError as exc:
        raise IoError("cannot write {}: {}".format(path, exc)) from exc


def save_volume(v, path, dtype=None):
    """Writes a VolumeGrid (float32 by default) or LabelMap (uint8)."""
    if dtype is None:
        dtype = np.uint8 if isinstance(v, LabelMap) else np.float32
    data = np.asarray(v.data).astype(dtype)
    img = nib.Nifti1Image(data, _affine(v.spacing, v.origin))
    img.header.set_data_dtype(dtype)
    img.header.set_xyzt_units("mm")
    _write(img, path)


def save_vectors(vectors, spacing, origin, path):
    """Writes a per-voxel vector image of shape (x, y, z, C) as float32."""
    vectors = np.asarray(vectors, dtype=np.float32)
    data = vectors.reshape(vectors.shape[:3] + (1, vectors.shape[3]))
    img = nib.Nifti1Image(data, _affine(spacing, origin))
    img.header.set_data_dtype(np.float32)
    img.header.set_intent(VECTOR_INTENT)
    img.header.set_xyzt_units("mm")
    _write(img, path)


def load_vectors(path):
    """Returns ``(vectors, spacing, origin)`` with vectors shaped (x, y, z, C)."""
    img = _open(path)
    spacing, origin = _geometry(img, path)
    shape = img.shape
    if len(shape) != 5 or shape[3] != 1:
        raise UnsupportedDatatype("{} is not a vector image, shape {}".format(path, shape))
    data = _read(img, path).reshape(shape[:3] + (shape[4],))
    return data, spacing, origin


def _raw_int16(path, raw, slope, inter):
    """Writes an int16 single-file NIfTI-1 by hand with explicit scaling."""
    hdr = nib.Nifti1Header()
    hdr.set_data_shape(raw.shape)
    hdr.set_data_dtype(np.int16)
    hdr.set_qform(np.eye(4), code=1)
    hdr.set_sform(np.eye(4), code=1)
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["vox_offset"] = 352
    with open(str(path), "wb") as f:
        hdr.write_to(f)
        f.write(b"\x00"*(352 - f.tell()))
        f.write(np.asarray(raw, dtype="<i2").tobytes(order="F"))


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4, 4, 4)).astype(np.float32).astype(np.float64)
    v = VolumeGrid(data, spacing=(0.5, 0.75, 2.0), origin=(-10.0, 3.5, 7.0))
    for name in ["v.nii", "v.nii.gz"]:
        save_volume(v, tmp_path / name)
        back = load_volume(tmp_path / name)
        assert back.geometry == v.geometry
        assert np.array_equal(back.data, v.data)


def test_labelmap_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    l = LabelMap(rng.integers(0, 8, size=(5, 4, 3)), spacing=(1, 2, 3))
    save_volume(l, tmp_path / "l.nii")
    assert nib.load(str(tmp_path / "l.nii")).get_data_dtype() == np.uint8
    back = load_labelmap(tmp_path / "l.nii")
    assert np.array_equal(back.data, l.data)
    assert back.spacing == (1.0, 2.0, 3.0)


def test_slope_and_intercept_applied(tmp_path):
    _raw_int16(tmp_path / "ct.nii", np.full((2, 2, 2), 600), slope=2.0, inter=-1000.0)
    v = load_volume(tmp_path / "ct.nii")
    assert np.all(v.data == 200.0)


def test_zero_dim_is_malformed(tmp_path):
    import pytest
    save_volume(VolumeGrid(np.zeros((4, 4, 4))), tmp_path / "z.nii")
    with open(str(tmp_path / "z.nii"), "r+b") as f:
        f.seek(42)  # dim[1]
        f.write(np.array([0], dtype="<i2").tobytes())
    with pytest.raises(MalformedHeader):
        load_volume(tmp_path / "z.nii")


def test_bad_magic_is_malformed(tmp_path):
    import pytest
    save_volume(VolumeGrid(np.zeros((4, 4, 4))), tmp_path / "m.nii")
    with open(str(tmp_path / "m.nii"), "r+b") as f:
        f.seek(344)
        f.write(b"xx1\x00")
    with pytest.raises(MalformedHeader):
        load_volume(tmp_path / "m.nii")


def test_vector_image_is_not_a_volume(tmp_path):
    import pytest
    save_vectors(np.zeros((3, 3, 3, 3)), (1, 1, 1), (0, 0, 0), tmp_path / "f.nii")
    with pytest.raises(UnsupportedDatatype):
        load_volume(tmp_path / "f.nii")
    vectors, spacing, origin = load_vectors(tmp_path / "f.nii")
    assert vectors.shape == (3, 3, 3, 3)


def test_unwritable_path(tmp_path):
    import pytest
    blocker = tmp_path / "afile"
    blocker.write_text("not a directory")
    with pytest.raises(IoError):
        save_volume(VolumeGrid(np.zeros((2, 2, 2))), blocker / "v.nii")
    with pytest.raises(IoError):
        load_volume(tmp_path / "missing.nii")


def test_writers_create_parent_directories(tmp_path):
    save_volume(VolumeGrid(np.ones((2, 2, 2))), tmp_path / "a" / "b" / "v.nii.gz")
    save_vectors(np.zeros((2, 2, 2, 3)), (1, 1, 1), (0, 0, 0), tmp_path / "c" / "f.nii.gz")
    assert load_volume(tmp_path / "a" / "b" / "v.nii.gz").dims == (2, 2, 2)
    assert load_vectors(tmp_path / "c" / "f.nii.gz")[0].shape == (2, 2, 2, 3)
