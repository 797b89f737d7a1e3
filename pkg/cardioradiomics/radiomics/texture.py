"""Texture matrices over a discretised region.

All families work on distance 1 with 26-connectivity. Directional families
(GLCM, GLRLM) use the 13 unique 3D directions and average the per-direction
feature values in the fixed order of ``DIRECTIONS``.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from cardioradiomics.features import FeatureVector

DIRECTIONS = [d for d in itertools.product((-1, 0, 1), repeat=3)
              if next((c for c in d if c != 0), 0) > 0]
NEIGHBOURS = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]

COARSENESS_CAP = 1e6

GLCM_NAMES = ["Contrast", "Correlation", "Homogeneity", "Energy", "Entropy",
              "ClusterShade", "ClusterProminence", "JointAverage", "Autocorrelation"]
GLRLM_NAMES = ["ShortRunEmphasis", "LongRunEmphasis", "GrayLevelNonUniformity",
               "RunLengthNonUniformity", "RunPercentage", "RunEntropy"]
GLSZM_NAMES = ["SmallAreaEmphasis", "LargeAreaEmphasis", "ZoneEntropy",
               "GrayLevelNonUniformity", "SizeZoneNonUniformity", "ZonePercentage"]
NGTDM_NAMES = ["Coarseness", "Contrast", "Busyness", "Complexity", "Strength"]
GLDM_NAMES = ["SmallDependenceEmphasis", "LargeDependenceEmphasis", "DependenceEntropy",
              "GrayLevelNonUniformity", "DependenceNonUniformity"]


@dataclass(frozen=True, eq=False)
class TextureMatrix:
    family: str
    matrix: np.ndarray
    metadata: dict = field(default_factory=dict)


def _entropy(p):
    p = p[p > 0]
    return -np.sum(p*np.log2(p)) + 0.0


def _pair_slices(shape, d):
    a, b = [], []
    for n, o in zip(shape, d):
        if o >= 0:
            a.append(slice(0, n - o))
            b.append(slice(o, n))
        else:
            a.append(slice(-o, n))
            b.append(slice(0, n + o))
    return tuple(a), tuple(b)


def _average(per_direction, names):
    return FeatureVector((n, float(np.mean([f[n] for f in per_direction]))) for n in names)


# GLCM

def glcm_matrices(d):
    """Normalised symmetric co-occurrence matrix per direction with at least one pair."""
    g = d.grid()
    ng = d.n_levels
    out = []
    for direction in DIRECTIONS:
        sa, sb = _pair_slices(g.shape, direction)
        a, b = g[sa].ravel(), g[sb].ravel()
        valid = (a > 0) & (b > 0)
        counts = np.bincount((a[valid] - 1)*ng + (b[valid] - 1), minlength=ng*ng)
        counts = counts.reshape(ng, ng).astype(np.float64)
        counts = counts + counts.T
        total = counts.sum()
        if total > 0:
            out.append(TextureMatrix("GLCM", counts/total, {"direction": direction, "distance": 1}))
    return out


def _glcm_direction(p):
    ng = p.shape[0]
    i = np.arange(1, ng + 1, dtype=np.float64)[:, None]
    j = i.T
    mu = np.sum(i*p)
    var = np.sum((i - mu)**2*p)
    return {
        "Contrast": np.sum((i - j)**2*p),
        "Correlation": np.sum((i - mu)*(j - mu)*p)/var if var > 0 else 1.0,
        "Homogeneity": np.sum(p/(1.0 + (i - j)**2)),
        "Energy": np.sum(p**2),
        "Entropy": _entropy(p),
        "ClusterShade": np.sum((i + j - 2*mu)**3*p),
        "ClusterProminence": np.sum((i + j - 2*mu)**4*p),
        "JointAverage": mu,
        "Autocorrelation": np.sum(i*j*p),
    }


def glcm_features(d) -> FeatureVector:
    """Co-occurrence features; Homogeneity is the inverse difference moment.

    A region without any adjacent voxel pair is treated as if every voxel
    co-occurred with itself (a diagonal matrix from the level histogram).
    """
    mats = glcm_matrices(d)
    if not mats:
        hist = np.bincount(d.levels, minlength=d.n_levels + 1)[1:].astype(np.float64)
        return _average([_glcm_direction(np.diag(hist/hist.sum()))], GLCM_NAMES)
    return _average([_glcm_direction(m.matrix) for m in mats], GLCM_NAMES)


# GLRLM

def _run_lengths(g, direction):
    """Length of the equal-level run that starts at each voxel and follows direction."""
    axis = next(a for a in range(3) if direction[a] != 0)
    other = tuple(-direction[a] for a in range(3) if a != axis)
    gm = np.moveaxis(g, axis, 0)
    lengths = np.zeros_like(gm)
    for k in range(gm.shape[0] - 2, -1, -1):
        cur = gm[k]
        nxt = np.roll(gm[k + 1], other, axis=(0, 1))
        nlen = np.roll(lengths[k + 1], other, axis=(0, 1))
        lengths[k] = np.where(cur > 0, 1 + np.where(nxt == cur, nlen, 0), 0)
    return np.moveaxis(lengths, 0, axis)


def glrlm_matrices(d):
    g = d.grid()
    ng = d.n_levels
    out = []
    for direction in DIRECTIONS:
        lengths = _run_lengths(g, direction)
        previous = np.roll(g, direction, axis=(0, 1, 2))
        starts = (g > 0) & (previous != g)
        lv = g[starts] - 1
        ln = lengths[starts] - 1
        width = int(ln.max()) + 1
        counts = np.bincount(lv*width + ln, minlength=ng*width).reshape(ng, width)
        out.append(TextureMatrix("GLRLM", counts.astype(np.float64), {"direction": direction}))
    return out


def _glrlm_direction(r, n_voxels):
    nr = r.sum()
    j = np.arange(1, r.shape[1] + 1, dtype=np.float64)[None, :]
    return {
        "ShortRunEmphasis": np.sum(r/j**2)/nr,
        "LongRunEmphasis": np.sum(r*j**2)/nr,
        "GrayLevelNonUniformity": np.sum(r.sum(axis=1)**2)/nr,
        "RunLengthNonUniformity": np.sum(r.sum(axis=0)**2)/nr,
        "RunPercentage": nr/n_voxels,
        "RunEntropy": _entropy(r/nr),
    }


def glrlm_features(d) -> FeatureVector:
    return _average([_glrlm_direction(m.matrix, d.count) for m in glrlm_matrices(d)],
                    GLRLM_NAMES)


# GLSZM

def glszm_matrix(d):
    g = d.grid()
    structure = np.ones((3, 3, 3), dtype=bool)
    levels, sizes = [], []
    for level in range(1, d.n_levels + 1):
        labels, n = ndimage.label(g == level, structure=structure)
        if n:
            zone_sizes = np.bincount(labels.ravel())[1:]
            levels.append(np.full(n, level - 1))
            sizes.append(zone_sizes - 1)
    levels = np.concatenate(levels)
    sizes = np.concatenate(sizes)
    width = int(sizes.max()) + 1
    counts = np.bincount(levels*width + sizes, minlength=d.n_levels*width)
    return TextureMatrix("GLSZM", counts.reshape(d.n_levels, width).astype(np.float64),
                         {"connectivity": 26})


def glszm_features(d) -> FeatureVector:
    s = glszm_matrix(d).matrix
    nz = s.sum()
    j = np.arange(1, s.shape[1] + 1, dtype=np.float64)[None, :]
    return FeatureVector([
        ("SmallAreaEmphasis", np.sum(s/j**2)/nz),
        ("LargeAreaEmphasis", np.sum(s*j**2)/nz),
        ("ZoneEntropy", _entropy(s/nz)),
        ("GrayLevelNonUniformity", np.sum(s.sum(axis=1)**2)/nz),
        ("SizeZoneNonUniformity", np.sum(s.sum(axis=0)**2)/nz),
        ("ZonePercentage", nz/d.count),
    ])


# NGTDM

def ngtdm_matrix(d):
    """Columns: n_i (voxels with at least one neighbour), p_i, s_i per level."""
    g = d.grid()
    mask = g > 0
    kernel = np.ones((3, 3, 3))
    kernel[1, 1, 1] = 0
    nsum = ndimage.convolve(g.astype(np.float64), kernel, mode="constant", cval=0.0)
    ncount = ndimage.convolve(mask.astype(np.float64), kernel, mode="constant", cval=0.0)
    valid = mask & (ncount > 0)
    lv = g[valid]
    diff = np.abs(lv - nsum[valid]/ncount[valid])
    n = np.bincount(lv, minlength=d.n_levels + 1)[1:].astype(np.float64)
    s = np.bincount(lv, weights=diff, minlength=d.n_levels + 1)[1:]
    p = n/n.sum() if n.sum() > 0 else n
    return TextureMatrix("NGTDM", np.stack([n, p, s], axis=1), {"connectivity": 26})


def _ngtdm_from(n, p, s):
    nvp = n.sum()
    ps = np.sum(p*s)
    coarseness = COARSENESS_CAP if ps == 0 else min(1.0/ps, COARSENESS_CAP)
    present = p > 0
    if nvp == 0 or not present.any():
        return [coarseness, 0.0, 0.0, 0.0, 0.0]
    lv = np.arange(1, len(p) + 1, dtype=np.float64)[present]
    pi, si = p[present], s[present]
    ngp = len(pi)
    d = lv[:, None] - lv[None, :]
    pp = pi[:, None] + pi[None, :]
    contrast = 0.0
    if ngp > 1:
        contrast = np.sum(pi[:, None]*pi[None, :]*d**2)/(ngp*(ngp - 1))*s.sum()/nvp
    ip = lv*pi
    denom = np.sum(np.abs(ip[:, None] - ip[None, :]))
    busyness = ps/denom if denom > 0 else 0.0
    complexity = np.sum(np.abs(d)*(pi*si)[:, None]/pp + np.abs(d)*(pi*si)[None, :]/pp)/nvp
    strength = np.sum(pp*d**2)/s.sum() if s.sum() > 0 else 0.0
    return [coarseness, contrast, busyness, complexity, strength]


def ngtdm_features(d) -> FeatureVector:
    """Neighbourhood grey tone difference features.

    Coarseness is capped at 1e6 (also when every s_i is 0); Busyness and
    Strength are 0 when their denominators vanish.
    """
    m = ngtdm_matrix(d).matrix
    return FeatureVector(zip(NGTDM_NAMES, _ngtdm_from(m[:, 0], m[:, 1], m[:, 2])))


# GLDM

def gldm_matrix(d, alpha=0):
    g = d.grid()
    inside = g > 0
    dependence = np.zeros(g.shape, dtype=np.int64)
    for o in NEIGHBOURS:
        nb = np.roll(g, tuple(-c for c in o), axis=(0, 1, 2))
        dependence += (nb > 0) & (np.abs(nb - g) <= alpha)
    lv = g[inside] - 1
    dep = dependence[inside]
    width = len(NEIGHBOURS) + 1
    counts = np.bincount(lv*width + dep, minlength=d.n_levels*width)
    return TextureMatrix("GLDM", counts.reshape(d.n_levels, width).astype(np.float64),
                         {"connectivity": 26, "alpha": alpha})


def gldm_features(d, alpha=0) -> FeatureVector:
    m = gldm_matrix(d, alpha).matrix
    nz = m.sum()
    j = np.arange(1, m.shape[1] + 1, dtype=np.float64)[None, :]
    return FeatureVector([
        ("SmallDependenceEmphasis", np.sum(m/j**2)/nz),
        ("LargeDependenceEmphasis", np.sum(m*j**2)/nz),
        ("DependenceEntropy", _entropy(m/nz)),
        ("GrayLevelNonUniformity", np.sum(m.sum(axis=1)**2)/nz),
        ("DependenceNonUniformity", np.sum(m.sum(axis=0)**2)/nz),
    ])


# Reference implementations: direct enumeration over voxel dictionaries.

def _voxels(d):
    return {tuple(int(c) for c in x): int(l) for x, l in zip(d.coords, d.levels)}


def _add(x, o, k=1):
    return (x[0] + k*o[0], x[1] + k*o[1], x[2] + k*o[2])


def _py_entropy(counts, total):
    return -sum((c/total)*np.log2(c/total) for c in counts.values() if c > 0)


def py_glcm(d):
    vox = _voxels(d)
    per_direction = []
    for o in DIRECTIONS:
        pairs = {}
        for x, lx in vox.items():
            y = _add(x, o)
            if y in vox:
                ly = vox[y]
                pairs[(lx, ly)] = pairs.get((lx, ly), 0) + 1
                pairs[(ly, lx)] = pairs.get((ly, lx), 0) + 1
        if pairs:
            per_direction.append(pairs)
    if not per_direction:
        hist = {}
        for l in vox.values():
            hist[(l, l)] = hist.get((l, l), 0) + 1
        per_direction = [hist]
    feats = []
    for pairs in per_direction:
        total = float(sum(pairs.values()))
        p = {k: v/total for k, v in pairs.items()}
        mu = sum(i*v for (i, j), v in p.items())
        var = sum((i - mu)**2*v for (i, j), v in p.items())
        cov = sum((i - mu)*(j - mu)*v for (i, j), v in p.items())
        feats.append({
            "Contrast": sum((i - j)**2*v for (i, j), v in p.items()),
            "Correlation": cov/var if var > 0 else 1.0,
            "Homogeneity": sum(v/(1.0 + (i - j)**2) for (i, j), v in p.items()),
            "Energy": sum(v*v for v in p.values()),
            "Entropy": -sum(v*np.log2(v) for v in p.values()),
            "ClusterShade": sum((i + j - 2*mu)**3*v for (i, j), v in p.items()),
            "ClusterProminence": sum((i + j - 2*mu)**4*v for (i, j), v in p.items()),
            "JointAverage": mu,
            "Autocorrelation": sum(i*j*v for (i, j), v in p.items()),
        })
    return {n: sum(f[n] for f in feats)/len(feats) for n in GLCM_NAMES}


def py_glrlm_runs(d, o):
    vox = _voxels(d)
    runs = {}
    for x, l in vox.items():
        back = _add(x, o, -1)
        if vox.get(back) == l:
            continue
        n = 1
        while vox.get(_add(x, o, n)) == l:
            n += 1
        runs[(l, n)] = runs.get((l, n), 0) + 1
    return runs


def py_glrlm(d):
    feats = []
    for o in DIRECTIONS:
        runs = py_glrlm_runs(d, o)
        nr = float(sum(runs.values()))
        by_level, by_length = {}, {}
        for (l, n), c in runs.items():
            by_level[l] = by_level.get(l, 0) + c
            by_length[n] = by_length.get(n, 0) + c
        feats.append({
            "ShortRunEmphasis": sum(c/n**2 for (l, n), c in runs.items())/nr,
            "LongRunEmphasis": sum(c*n**2 for (l, n), c in runs.items())/nr,
            "GrayLevelNonUniformity": sum(c**2 for c in by_level.values())/nr,
            "RunLengthNonUniformity": sum(c**2 for c in by_length.values())/nr,
            "RunPercentage": nr/d.count,
            "RunEntropy": _py_entropy(runs, nr),
        })
    return {n: sum(f[n] for f in feats)/len(feats) for n in GLRLM_NAMES}


def py_glszm_zones(d):
    vox = _voxels(d)
    seen = set()
    zones = {}
    for start, l in vox.items():
        if start in seen:
            continue
        seen.add(start)
        stack, size = [start], 0
        while stack:
            x = stack.pop()
            size += 1
            for o in NEIGHBOURS:
                y = _add(x, o)
                if y not in seen and vox.get(y) == l:
                    seen.add(y)
                    stack.append(y)
        zones[(l, size)] = zones.get((l, size), 0) + 1
    return zones


def py_glszm(d):
    zones = py_glszm_zones(d)
    nz = float(sum(zones.values()))
    by_level, by_size = {}, {}
    for (l, n), c in zones.items():
        by_level[l] = by_level.get(l, 0) + c
        by_size[n] = by_size.get(n, 0) + c
    return {
        "SmallAreaEmphasis": sum(c/n**2 for (l, n), c in zones.items())/nz,
        "LargeAreaEmphasis": sum(c*n**2 for (l, n), c in zones.items())/nz,
        "ZoneEntropy": _py_entropy(zones, nz),
        "GrayLevelNonUniformity": sum(c**2 for c in by_level.values())/nz,
        "SizeZoneNonUniformity": sum(c**2 for c in by_size.values())/nz,
        "ZonePercentage": nz/d.count,
    }


def py_ngtdm_sums(d):
    vox = _voxels(d)
    n, s = {}, {}
    for x, l in vox.items():
        nb = [vox[_add(x, o)] for o in NEIGHBOURS if _add(x, o) in vox]
        if not nb:
            continue
        n[l] = n.get(l, 0) + 1
        s[l] = s.get(l, 0.0) + abs(l - sum(nb)/float(len(nb)))
    return n, s


def py_ngtdm(d):
    n, s = py_ngtdm_sums(d)
    nvp = float(sum(n.values()))
    if nvp == 0:
        return dict(zip(NGTDM_NAMES, [COARSENESS_CAP, 0.0, 0.0, 0.0, 0.0]))
    p = {l: c/nvp for l, c in n.items()}
    ps = sum(p[l]*s[l] for l in p)
    stot = sum(s.values())
    ngp = len(p)
    coarseness = COARSENESS_CAP if ps == 0 else min(1.0/ps, COARSENESS_CAP)
    contrast = 0.0
    if ngp > 1:
        contrast = sum(p[i]*p[j]*(i - j)**2 for i in p for j in p)/(ngp*(ngp - 1))*stot/nvp
    denom = sum(abs(i*p[i] - j*p[j]) for i in p for j in p)
    return {
        "Coarseness": coarseness,
        "Contrast": contrast,
        "Busyness": ps/denom if denom > 0 else 0.0,
        "Complexity": sum(abs(i - j)*(p[i]*s[i] + p[j]*s[j])/(p[i] + p[j])
                          for i in p for j in p)/nvp,
        "Strength": sum((p[i] + p[j])*(i - j)**2 for i in p for j in p)/stot if stot > 0 else 0.0,
    }


def py_gldm_entries(d, alpha=0):
    vox = _voxels(d)
    entries = {}
    for x, l in vox.items():
        dep = sum(1 for o in NEIGHBOURS if _add(x, o) in vox and abs(vox[_add(x, o)] - l) <= alpha)
        entries[(l, dep + 1)] = entries.get((l, dep + 1), 0) + 1
    return entries


def py_gldm(d, alpha=0):
    entries = py_gldm_entries(d, alpha)
    nz = float(sum(entries.values()))
    by_level, by_dep = {}, {}
    for (l, j), c in entries.items():
        by_level[l] = by_level.get(l, 0) + c
        by_dep[j] = by_dep.get(j, 0) + c
    return {
        "SmallDependenceEmphasis": sum(c/j**2 for (l, j), c in entries.items())/nz,
        "LargeDependenceEmphasis": sum(c*j**2 for (l, j), c in entries.items())/nz,
        "DependenceEntropy": _py_entropy(entries, nz),
        "GrayLevelNonUniformity": sum(c**2 for c in by_level.values())/nz,
        "DependenceNonUniformity": sum(c**2 for c in by_dep.values())/nz,
    }


def _levels(shape, values=None):
    from cardioradiomics.radiomics.discretize import region_from_levels
    g = np.zeros(shape, dtype=int)
    if values is None:
        g[...] = 1
    else:
        g[...] = values
    return region_from_levels(g)


def _random_regions(count, seed):
    from cardioradiomics.radiomics.discretize import region_from_levels
    rng = np.random.default_rng(seed)
    for _ in range(count):
        shape = tuple(rng.integers(1, 9, size=3))
        ng = int(rng.integers(1, 9))
        g = rng.integers(1, ng + 1, size=shape)
        g[rng.random(shape) < 0.3] = 0
        g.flat[int(rng.integers(0, g.size))] = int(rng.integers(1, ng + 1))
        yield region_from_levels(g)


def _assert_matches(ours, ref, names):
    for name in names:
        np.testing.assert_allclose(ours[name], ref[name], rtol=1e-9, atol=1e-12, err_msg=name)


def test_directions():
    assert len(DIRECTIONS) == 13
    assert len(NEIGHBOURS) == 26
    assert set(DIRECTIONS) | {tuple(-c for c in d) for d in DIRECTIONS} == set(NEIGHBOURS)


def test_all_families_match_reference():
    for d in _random_regions(50, seed=11):
        _assert_matches(glcm_features(d), py_glcm(d), GLCM_NAMES)
        _assert_matches(glrlm_features(d), py_glrlm(d), GLRLM_NAMES)
        _assert_matches(glszm_features(d), py_glszm(d), GLSZM_NAMES)
        _assert_matches(ngtdm_features(d), py_ngtdm(d), NGTDM_NAMES)
        _assert_matches(gldm_features(d), py_gldm(d), GLDM_NAMES)
        _assert_matches(gldm_features(d, alpha=1), py_gldm(d, alpha=1), GLDM_NAMES)


def test_glcm_constant_and_symmetry():
    f = glcm_features(_levels((3, 3, 3)))
    assert f["Contrast"] == 0.0 and f["Energy"] == 1.0 and f["Correlation"] == 1.0

    two = _levels((2, 2, 1), np.array([[[1], [2]], [[1], [2]]]))
    _assert_matches(glcm_features(two), py_glcm(two), GLCM_NAMES)

    for d in _random_regions(10, seed=12):
        for m in glcm_matrices(d):
            assert np.array_equal(m.matrix, m.matrix.T)
            assert abs(m.matrix.sum() - 1.0) < 1e-12


def test_glrlm_runs_along_x():
    row = np.array([1, 1, 1, 2, 2]).reshape(5, 1, 1)
    mats = glrlm_matrices(_levels((5, 1, 1), row))
    x = [m for m in mats if m.metadata["direction"] == (1, 0, 0)][0].matrix
    assert x[0, 2] == 1 and x[1, 1] == 1 and x.sum() == 2

    for n in [1, 4, 7]:
        line = glrlm_matrices(_levels((n, 1, 1)))
        r = [m for m in line if m.metadata["direction"] == (1, 0, 0)][0].matrix
        assert _glrlm_direction(r, n)["LongRunEmphasis"] == n**2


def test_glszm_zones():
    d = _levels((6, 6, 6))
    s = glszm_matrix(d).matrix
    assert s[0, 215] == 1 and s.sum() == 1

    g = np.zeros((9, 3, 3), dtype=int)
    g[0:3, 0, 0] = 4
    g[4:9, 1, 1] = 4
    g[0, 2, 2] = 1
    from cardioradiomics.radiomics.discretize import region_from_levels
    s = glszm_matrix(region_from_levels(g)).matrix
    assert s[3, 2] == 1 and s[3, 4] == 1 and s[0, 0] == 1 and s.sum() == 3


def test_ngtdm_hand_cases():
    f = ngtdm_features(_levels((3, 3, 3)))
    assert f["Coarseness"] == COARSENESS_CAP
    assert ngtdm_matrix(_levels((3, 3, 3))).matrix[:, 2].sum() == 0

    g = np.ones((3, 3, 3), dtype=int)
    g[1, 1, 1] = 2
    m = ngtdm_matrix(_levels((3, 3, 3), g)).matrix
    np.testing.assert_allclose(m[1, 2], 1.0, rtol=1e-12)
    np.testing.assert_allclose(m[0, 2], 8/7.0 + 12/11.0 + 6/17.0, rtol=1e-12)
    np.testing.assert_allclose(m[:, 0], [26, 1])


def test_gldm_hand_cases():
    m = gldm_matrix(_levels((3, 3, 3))).matrix
    assert m[0, 26] == 1
    one = _levels((1, 1, 1))
    m = gldm_matrix(one).matrix
    assert m[0, 0] == 1 and m.sum() == 1
