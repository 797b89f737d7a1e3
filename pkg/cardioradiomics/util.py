from collections import OrderedDict

import numpy as np

# Fixed labelmap code table. Order matters: feature vectors are always
# concatenated in code order.
STRUCTURES = OrderedDict([
    (1, "LV"),   # left ventricle
    (2, "MYO"),  # left-ventricular myocardium
    (3, "RV"),   # right ventricle
    (4, "LA"),   # left atrium
    (5, "RA"),   # right atrium
    (6, "AO"),   # aorta
    (7, "PT"),   # pulmonary trunk
])

N_LABELS = len(STRUCTURES) + 1


def lattice(dims, spacing=(1, 1, 1), origin=(0, 0, 0)):
    """Physical (mm) coordinates of every voxel centre, shape dims + (3,)."""
    axes = [origin[a] + spacing[a]*np.arange(dims[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def make_ellipsoid(dims, center, radii):
    """Boolean ellipsoid with centre and radii in voxel units."""
    pts = lattice(dims) - np.asarray(center, dtype=float)
    radii = np.asarray(radii, dtype=float)
    return np.sum((pts/radii)**2, axis=-1) <= 1.0


def make_ball(dims, center, radius):
    return make_ellipsoid(dims, center, (radius, radius, radius))


def seeded_rng(*seed):
    return np.random.default_rng(np.random.SeedSequence(list(seed)))


def test_structure_table():
    assert list(STRUCTURES) == list(range(1, 8))
    assert STRUCTURES[6] == "AO"
    assert N_LABELS == 8


def test_make_ball_is_symmetric():
    ball = make_ball((21, 21, 21), (10, 10, 10), 6)
    assert ball[10, 10, 10]
    assert not ball[0, 0, 0]
    assert np.array_equal(ball, ball[::-1, :, :])
    assert np.array_equal(ball, np.transpose(ball, (1, 2, 0)))


def test_seeded_rng_is_deterministic():
    a = seeded_rng(3, 1).random(5)
    b = seeded_rng(3, 1).random(5)
    c = seeded_rng(3, 2).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
