"""Overlap and surface distance metrics between predicted and reference labelmaps."""
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import ndimage

from cardioradiomics.errors import EmptySurface
from cardioradiomics.util import STRUCTURES
from cardioradiomics.volume import LabelMap, StructureMask, extract_structure_mask, require_same_geometry

BOTH_EMPTY = "both_empty"
PRED_EMPTY = "pred_empty"
GT_EMPTY = "gt_empty"

COLUMNS = ["structure", "dsc", "hd", "hd95", "asd", "flags"]


@dataclass
class StructureMetrics:
    dsc: float
    hd: float
    hd95: float
    asd: float
    flags: str = ""


@dataclass
class SegMetricsReport:
    structures: OrderedDict = field(default_factory=OrderedDict)   # abbrev -> StructureMetrics
    global_metrics: StructureMetrics = None

    def to_frame(self) -> pd.DataFrame:
        rows = [dict(structure=name, **vars(m)) for name, m in self.structures.items()]
        rows.append(dict(structure="global", **vars(self.global_metrics)))
        return pd.DataFrame(rows, columns=COLUMNS)


def dice(a: StructureMask, b: StructureMask) -> float:
    require_same_geometry(a, b, "masks")
    total = a.count + b.count
    if total == 0:
        return 1.0
    return 2.0*np.count_nonzero(a.data & b.data)/total


def surface(mask):
    """Mask voxels with at least one 6-neighbour outside the mask or the grid."""
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def _directed(src, dst, spacing):
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def surface_distances(a: StructureMask, b: StructureMask):
    """Symmetric (hd, hd95, asd) in mm between the 6-connected surfaces."""
    require_same_geometry(a, b, "masks")
    if a.empty or b.empty:
        raise EmptySurface("surface distances need two nonempty masks")
    sa, sb = surface(a.data), surface(b.data)
    pooled = np.concatenate([_directed(sa, sb, a.spacing), _directed(sb, sa, a.spacing)])
    return float(pooled.max()), float(np.percentile(pooled, 95)), float(pooled.mean())


def _structure_metrics(p, g):
    if p.empty and g.empty:
        return StructureMetrics(1.0, 0.0, 0.0, 0.0, BOTH_EMPTY)
    if p.empty or g.empty:
        return StructureMetrics(0.0, np.nan, np.nan, np.nan, PRED_EMPTY if p.empty else GT_EMPTY)
    hd, hd95, asd = surface_distances(p, g)
    return StructureMetrics(dice(p, g), hd, hd95, asd)


def evaluate_segmentation(pred: LabelMap, gt: LabelMap) -> SegMetricsReport:
    """Per-structure DSC, HD, HD95 and ASD plus unweighted global means.

    Structures absent from both maps are flagged and left out of the global
    means; structures absent from exactly one score DSC 0 and have undefined
    distances, which are left out of the global distance means.
    """
    require_same_geometry(pred, gt, "prediction and ground truth")
    report = SegMetricsReport()
    for code, name in STRUCTURES.items():
        report.structures[name] = _structure_metrics(extract_structure_mask(pred, code),
                                                     extract_structure_mask(gt, code))
    scored = [m for m in report.structures.values() if m.flags != BOTH_EMPTY]
    if not scored:
        report.global_metrics = StructureMetrics(1.0, 0.0, 0.0, 0.0, BOTH_EMPTY)
        return report
    measured = [m for m in scored if not m.flags]

    def mean(attr):
        return float(np.mean([getattr(m, attr) for m in measured])) if measured else np.nan

    flags = sorted({m.flags for m in scored if m.flags})
    report.global_metrics = StructureMetrics(float(np.mean([m.dsc for m in scored])),
                                             mean("hd"), mean("hd95"), mean("asd"), ";".join(flags))
    return report


def write_segmetrics(report: SegMetricsReport, path):
    from cardioradiomics.io.tables import write_csv
    write_csv(report.to_frame(), path)


def py_surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """All-pairs distances between surface voxel centres."""
    from scipy.spatial.distance import cdist
    pa = np.argwhere(surface(a))*np.asarray(spacing, dtype=float)
    pb = np.argwhere(surface(b))*np.asarray(spacing, dtype=float)
    d = cdist(pa, pb)
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return pooled.max(), np.percentile(pooled, 95), pooled.mean()


def _mask(data, spacing=(1.0, 1.0, 1.0)):
    return StructureMask(np.asarray(data, dtype=bool), 1, spacing)


def test_dice():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    assert dice(_mask(a), _mask(b)) == 1.0
    a[0, 0, 0:2] = True
    assert dice(_mask(a), _mask(b)) == 0.0
    assert dice(_mask(a), _mask(a)) == 1.0
    b[0, 0, 1:3] = True
    assert dice(_mask(a), _mask(b)) == 0.5 == dice(_mask(b), _mask(a))
    b[...] = False
    b[3, 3, 3] = True
    assert dice(_mask(a), _mask(b)) == 0.0


def test_single_voxel_distances():
    a = np.zeros((8, 3, 3), dtype=bool)
    b = np.zeros((8, 3, 3), dtype=bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert surface_distances(_mask(a), _mask(b)) == (3.0, 3.0, 3.0)
    hd, hd95, asd = surface_distances(_mask(a, (2.0, 1.0, 1.0)), _mask(b, (2.0, 1.0, 1.0)))
    assert hd == 6.0 and asd == 6.0
    assert surface_distances(_mask(a), _mask(a)) == (0.0, 0.0, 0.0)


def test_cube_versus_dilated_cube_matches_oracle():
    a = np.zeros((14, 14, 14), dtype=bool)
    a[2:12, 2:12, 2:12] = True
    b = ndimage.binary_dilation(a)
    for spacing in [(1.0, 1.0, 1.0), (0.7, 1.0, 1.6)]:
        ours = surface_distances(_mask(a, spacing), _mask(b, spacing))
        ref = py_surface_distances(a, b, spacing)
        np.testing.assert_allclose(ours[0], ref[0], rtol=1e-12)
        np.testing.assert_allclose(ours[1], ref[1], rtol=1e-9)
        np.testing.assert_allclose(ours[2], ref[2], rtol=1e-9)
        assert ours[1] <= ours[0] and ours[2] <= ours[0]


def test_random_masks_match_oracle_and_are_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = ndimage.binary_opening(rng.random((10, 10, 10)) < 0.6)
        b = ndimage.binary_opening(rng.random((10, 10, 10)) < 0.6)
        a[5, 5, 5] = b[4, 4, 4] = True
        ours = surface_distances(_mask(a), _mask(b))
        np.testing.assert_allclose(ours, py_surface_distances(a, b), rtol=1e-9)
        np.testing.assert_allclose(surface_distances(_mask(b), _mask(a)), ours, rtol=1e-12)


def test_translation_invariance():
    a = np.zeros((16, 16, 16), dtype=bool)
    b = np.zeros((16, 16, 16), dtype=bool)
    a[3:8, 4:9, 4:7] = True
    b[4:9, 4:8, 3:7] = True
    base = surface_distances(_mask(a), _mask(b)) + (dice(_mask(a), _mask(b)),)
    sa, sb = np.roll(a, 3, axis=0), np.roll(b, 3, axis=0)
    moved = surface_distances(_mask(sa), _mask(sb)) + (dice(_mask(sa), _mask(sb)),)
    np.testing.assert_allclose(moved, base, rtol=1e-12)


def test_empty_surface():
    import pytest
    a = np.zeros((3, 3, 3), dtype=bool)
    b = a.copy()
    b[1, 1, 1] = True
    with pytest.raises(EmptySurface):
        surface_distances(_mask(a), _mask(b))


def _two_structures():
    gt = np.zeros((20, 20, 20), dtype=np.uint8)
    gt[2:8, 2:8, 2:8] = 1
    gt[10:18, 10:18, 10:18] = 3
    return gt


def test_evaluate_segmentation():
    gt = _two_structures()
    same = evaluate_segmentation(LabelMap(gt), LabelMap(gt))
    for name in ["LV", "RV"]:
        m = same.structures[name]
        assert (m.dsc, m.hd, m.hd95, m.asd, m.flags) == (1.0, 0.0, 0.0, 0.0, "")
    assert same.structures["MYO"].flags == BOTH_EMPTY
    assert same.global_metrics.dsc == 1.0 and same.global_metrics.hd == 0.0

    pred = gt.copy()
    pred[2:5, 2:8, 2:8] = 0
    r = evaluate_segmentation(LabelMap(pred), LabelMap(gt))
    assert r.global_metrics.dsc == np.mean([r.structures["LV"].dsc, r.structures["RV"].dsc])
    assert r.structures["LV"].dsc == 2.0*108/(108 + 216)

    empty = evaluate_segmentation(LabelMap(np.zeros_like(gt)), LabelMap(gt))
    assert empty.structures["LV"].dsc == 0.0 and empty.structures["LV"].flags == PRED_EMPTY
    assert np.isnan(empty.structures["RV"].hd)
    assert empty.global_metrics.dsc == 0.0 and np.isnan(empty.global_metrics.asd)


def test_report_csv(tmp_path):
    gt = _two_structures()
    write_segmetrics(evaluate_segmentation(LabelMap(gt), LabelMap(gt)), tmp_path/"seg.csv")
    frame = pd.read_csv(tmp_path/"seg.csv")
    assert list(frame.columns) == COLUMNS
    assert list(frame["structure"]) == list(STRUCTURES.values()) + ["global"]
