import numpy as np

from cardioradiomics.errors import EmptyMask
from cardioradiomics.features import FeatureVector
from cardioradiomics.volume import StructureMask, VolumeGrid

NAMES = ["Mean", "Variance", "Skewness", "Kurtosis", "Entropy", "Minimum",
         "Maximum", "Median", "Energy", "RootMeanSquared", "Range",
         "MeanAbsoluteDeviation", "Uniformity", "10Percentile", "90Percentile",
         "InterquartileRange"]


def first_order_features(v: VolumeGrid, m: StructureMask, d) -> FeatureVector:
    """Intensity statistics over the raw HU values inside the mask.

    Variance is the population variance and Kurtosis is excess kurtosis; both
    higher moments are 0 for constant regions. Entropy and Uniformity use the
    discretised histogram, entropy in bits.
    """
    if m.empty:
        raise EmptyMask("structure {} has no voxels".format(m.structure_code))
    x = v.data[m.data]
    mean = x.mean()
    dev = x - mean
    m2 = np.mean(dev**2)
    if m2 > 0:
        skewness = np.mean(dev**3)/m2**1.5
        kurtosis = np.mean(dev**4)/m2**2 - 3.0
    else:
        skewness = kurtosis = 0.0

    counts = np.bincount(d.levels)[1:]
    p = counts[counts > 0]/float(d.count)
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])

    return FeatureVector([
        ("Mean", mean),
        ("Variance", m2),
        ("Skewness", skewness),
        ("Kurtosis", kurtosis),
        ("Entropy", -np.sum(p*np.log2(p)) + 0.0),
        ("Minimum", x.min()),
        ("Maximum", x.max()),
        ("Median", p50),
        ("Energy", np.sum(x**2)),
        ("RootMeanSquared", np.sqrt(np.mean(x**2))),
        ("Range", x.max() - x.min()),
        ("MeanAbsoluteDeviation", np.mean(np.abs(dev))),
        ("Uniformity", np.sum(p**2)),
        ("10Percentile", p10),
        ("90Percentile", p90),
        ("InterquartileRange", p75 - p25),
    ])


def py_first_order(values, levels):
    """Reference implementation by direct summation."""
    from scipy import stats
    values = [float(x) for x in values]
    n = len(values)
    mean = sum(values)/n
    var = sum((x - mean)**2 for x in values)/n
    hist = {}
    for l in levels:
        hist[int(l)] = hist.get(int(l), 0) + 1
    entropy = -sum((c/n)*np.log2(c/n) for c in hist.values())
    srt = sorted(values)
    return {
        "Mean": mean,
        "Variance": var,
        "Skewness": stats.skew(values, bias=True) if var > 0 else 0.0,
        "Kurtosis": stats.kurtosis(values, fisher=True, bias=True) if var > 0 else 0.0,
        "Entropy": entropy,
        "Minimum": srt[0],
        "Maximum": srt[-1],
        "Median": (srt[(n - 1)//2] + srt[n//2])/2.0,
        "Energy": sum(x*x for x in values),
        "RootMeanSquared": (sum(x*x for x in values)/n)**0.5,
        "Range": srt[-1] - srt[0],
        "MeanAbsoluteDeviation": sum(abs(x - mean) for x in values)/n,
        "Uniformity": sum((c/n)**2 for c in hist.values()),
        "10Percentile": stats.scoreatpercentile(values, 10),
        "90Percentile": stats.scoreatpercentile(values, 90),
        "InterquartileRange": stats.iqr(values),
    }


def _region(data, mask, bin_width):
    from cardioradiomics.radiomics.discretize import discretize
    v = VolumeGrid(data)
    m = StructureMask(mask, 1)
    return v, m, discretize(v, m, bin_width)


def test_constant_region():
    v, m, d = _region(np.full((3, 3, 3), 120.0), np.ones((3, 3, 3)), 25.0)
    f = first_order_features(v, m, d)
    assert f["Mean"] == 120.0
    assert f["Variance"] == 0.0
    assert f["Entropy"] == 0.0
    assert f["Skewness"] == 0.0 and f["Kurtosis"] == 0.0
    assert list(f) == NAMES


def test_two_voxel_region():
    data = np.zeros((2, 1, 1))
    data[1, 0, 0] = 2.0
    v, m, d = _region(data, np.ones((2, 1, 1)), 1.0)
    f = first_order_features(v, m, d)
    assert f["Mean"] == 1.0
    assert f["Variance"] == 1.0
    assert f["Entropy"] == 1.0


def test_matches_reference_on_random_regions():
    rng = np.random.default_rng(7)
    for trial in range(50):
        shape = tuple(rng.integers(2, 9, size=3))
        data = rng.normal(40, 60, size=shape)
        mask = rng.random(shape) < 0.7
        mask.flat[0] = True
        v, m, d = _region(data, mask, 10.0)
        ours = first_order_features(v, m, d)
        ref = py_first_order(data[mask], d.levels)
        for name in NAMES:
            np.testing.assert_allclose(ours[name], ref[name], rtol=1e-9, atol=1e-9, err_msg=name)


def test_shift_moves_mean_only():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(6, 6, 6))*50
    mask = rng.random((6, 6, 6)) < 0.5
    a = first_order_features(*_region(data, mask, 25.0))
    b = first_order_features(*_region(data + 1000.0, mask, 25.0))
    np.testing.assert_allclose(b["Mean"], a["Mean"] + 1000.0, rtol=1e-12)
    for name in ["Variance", "Skewness", "Kurtosis", "Entropy", "Uniformity", "Range"]:
        np.testing.assert_allclose(b[name], a[name], rtol=1e-9, atol=1e-9)
