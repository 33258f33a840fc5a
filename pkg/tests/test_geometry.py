import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rinkkp.geometry import (
    Homography,
    PointAtInfinity,
    RinkSpec,
    apply_homography,
    homography_from_points,
    pixel_distance,
    rsle,
    to_rink,
)

coord = st.floats(-2000, 2000)


def random_homography(rng):
    m = np.eye(3) + rng.normal(0, 0.2, size=(3, 3))
    m[2, :2] = rng.normal(0, 1e-4, size=2)
    m[:2, 2] = rng.normal(0, 50, size=2)
    return Homography(m)


def test_identity_and_translation():
    assert apply_homography(Homography.identity(), 640, 360) == (640, 360)
    t = Homography([[1, 0, 5], [0, 1, -3], [0, 0, 1]])
    assert apply_homography(t, 0, 0) == (5, -3)


def test_point_at_infinity():
    h = Homography([[1, 0, 0], [0, 1, 0], [1, 0, 0.5]])
    with pytest.raises(PointAtInfinity):
        apply_homography(h, -0.5, 3)


def test_singular_rejected():
    with pytest.raises(ValueError):
        Homography(np.ones((3, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    np.testing.assert_allclose(h.inverse().h @ h.h, np.eye(3), atol=1e-12)
    x, y = rng.uniform(0, 1280), rng.uniform(0, 720)
    back = apply_homography(h.inverse(), *apply_homography(h, x, y))
    assert abs(back[0] - x) < 1e-9 and abs(back[1] - y) < 1e-9


def test_dlt_maps_corners():
    src = [(0, 0), (64, 0), (64, 64), (0, 64)]
    dst = [(100, 50), (900, 80), (1000, 600), (60, 650)]
    h = homography_from_points(src, dst)
    for s, d in zip(src, dst):
        np.testing.assert_allclose(apply_homography(h, *s), d, atol=1e-9)


def test_to_rink_examples():
    assert to_rink((1280, 720)) == (61.0, 25.9)
    assert to_rink((640, 360)) == (30.5, 12.95)
    assert to_rink((0, 0)) == (0, 0)
    assert to_rink(apply_homography(Homography.identity(), 1280, 720), RinkSpec()) == (61.0, 25.9)


def test_distances():
    assert rsle((33.5, 12.95), (30.5, 12.95)) == 3.0
    assert rsle((1.0, 1.0), (4.0, 5.0)) == 5.0
    assert rsle((2.0, 2.0), (2.0, 2.0)) == 0.0
    assert pixel_distance((0, 0), (3, 4)) == 5.0
    assert pixel_distance((7, 7), (7, 7)) == 0.0


@settings(max_examples=100, deadline=None)
@given(coord, coord, coord, coord)
def test_pixel_distance_equals_rsle_formula(a, b, c, d):
    assert pixel_distance((a, b), (c, d)) == rsle((a, b), (c, d))


@settings(max_examples=100, deadline=None)
@given(coord, coord)
def test_identity_is_identity(x, y):
    assert apply_homography(Homography.identity(), x, y) == (x, y)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1280), st.floats(0, 720),
       st.floats(0.01, 100).flatmap(lambda k: st.sampled_from([k, -k])))
def test_projective_scale_invariance(seed, x, y, k):
    h = random_homography(np.random.default_rng(seed))
    p = apply_homography(h, x, y)
    q = apply_homography(Homography(k * h.h), x, y)
    assert abs(p[0] - q[0]) <= 1e-12 * max(1.0, abs(p[0]))
    assert abs(p[1] - q[1]) <= 1e-12 * max(1.0, abs(p[1]))


@settings(max_examples=100, deadline=None)
@given(coord, coord, st.floats(-10, 10))
def test_to_rink_linear(x, y, a):
    sx, sy = to_rink((a * x, a * y))
    rx, ry = to_rink((x, y))
    assert abs(sx - a * rx) <= 1e-12 * max(1.0, abs(sx))
    assert abs(sy - a * ry) <= 1e-12 * max(1.0, abs(sy))


@settings(max_examples=100, deadline=None)
@given(*[coord] * 6)
def test_metric_axioms(ax, ay, bx, by, cx, cy):
    a, b, c = (ax, ay), (bx, by), (cx, cy)
    for dist in (rsle, pixel_distance):
        assert dist(a, b) == dist(b, a)
        assert dist(a, c) <= dist(a, b) + dist(b, c) + 1e-9
