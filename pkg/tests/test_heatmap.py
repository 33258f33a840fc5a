import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fd import numerical_grad, rel_error
from rinkkp.heatmap import (
    HeatmapLabel,
    bbox_center,
    gaussian_label,
    kl_loss,
    normalize_label,
    peak_extract,
    softmax_backward,
    spatial_softmax,
)

ONE_SIGMA = math.exp(-0.5)

# brute-force double-loop KL of the normalized sigma=2 Gaussian at (8, 8) on
# 16x16 against the uniform map, computed with plain floats before the build
KL_GAUSS2_VS_UNIFORM = 1.3225256067141236


def test_gaussian_peak_and_one_sigma():
    g = gaussian_label(10, 10, 5, 32, 32).grid[0, 0]
    assert g[10, 10] == 1.0
    assert abs(g[10, 15] - ONE_SIGMA) < 1e-12
    assert abs(g[14, 13] - ONE_SIGMA) < 1e-12
    assert g[14, 13] == g[10, 15]
    assert g.max() == g[10, 10]


def test_gaussian_fractional_center_not_rounded():
    g = gaussian_label(3.5, 2.0, 1.0, 5, 8).grid[0, 0]
    assert g[2, 3] == g[2, 4]
    assert g[2, 3] < 1.0


def test_gaussian_rejects_bad_args():
    with pytest.raises(ValueError):
        gaussian_label(32, 0, 5, 32, 32)
    with pytest.raises(ValueError):
        gaussian_label(-0.5, 0, 5, 32, 32)
    with pytest.raises(ValueError):
        gaussian_label(1, 1, 0, 32, 32)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20), st.floats(0.5, 10))
def test_gaussian_radial_symmetry(mx, my, sigma):
    g = gaussian_label(mx, my, sigma, 21, 21).grid[0, 0]
    by_d2 = {}
    for y in range(21):
        for x in range(21):
            by_d2.setdefault((x - mx) ** 2 + (y - my) ** 2, set()).add(g[y, x])
    assert all(len(v) == 1 for v in by_d2.values())


def test_normalize_label_examples():
    flat = normalize_label(HeatmapLabel(np.ones((1, 1, 3, 4)), 0, 0, 1))
    np.testing.assert_allclose(flat.grid, 1 / 12)
    two = normalize_label(HeatmapLabel(np.array([[[[1.0, 3.0]]]]), 1, 0, 1))
    np.testing.assert_array_equal(two.grid.ravel(), [0.25, 0.75])
    g = normalize_label(gaussian_label(32, 32, 5, 64, 64))
    assert abs(g.grid.sum() - 1.0) < 1e-12
    assert peak_extract(g.grid) == [(32, 32)]


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(spatial_softmax(np.zeros((1, 1, 4, 4))), 1 / 16)
    logits = np.zeros((1, 1, 4, 4))
    logits[0, 0, 2, 1] = 1000.0
    p = spatial_softmax(logits)
    assert np.all(np.isfinite(p))
    assert abs(p[0, 0, 2, 1] - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 1, 5, 6), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_shift_invariant(logits, c):
    p = spatial_softmax(logits)
    np.testing.assert_allclose(p.reshape(2, -1).sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(spatial_softmax(logits + c), p, atol=1e-12, rtol=0)


def test_softmax_backward_gradcheck():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 1, 4, 5))
    w = rng.normal(size=z.shape)
    p = spatial_softmax(z)
    analytic = softmax_backward(p, w)
    assert rel_error(analytic, numerical_grad(lambda: float(np.sum(spatial_softmax(z) * w)), z)) < 1e-6


def test_kl_identical_is_zero():
    p = spatial_softmax(np.random.default_rng(1).normal(size=(3, 1, 6, 6)))
    loss, _ = kl_loss(p, p)
    assert abs(loss) < 1e-12


def test_kl_one_hot_vs_uniform():
    target = np.zeros((1, 1, 16, 16))
    target[0, 0, 3, 9] = 1.0
    loss, _ = kl_loss(target, np.full((1, 1, 16, 16), 1 / 256))
    assert abs(loss - math.log(256)) < 1e-9
    assert abs(loss - 5.545177444479562) < 1e-9


def _brute_kl(target, probs):
    total = 0.0
    for b in range(target.shape[0]):
        for y in range(target.shape[2]):
            for x in range(target.shape[3]):
                t = float(target[b, 0, y, x])
                if t > 0:
                    total += t * math.log(t / float(probs[b, 0, y, x]))
    return total / target.shape[0]


def test_kl_gaussian_vs_uniform_frozen():
    label = normalize_label(gaussian_label(8, 8, 2, 16, 16))
    uniform = np.full((1, 1, 16, 16), 1 / 256)
    loss, _ = kl_loss(label, uniform)
    assert abs(loss - KL_GAUSS2_VS_UNIFORM) < 1e-12
    assert abs(loss - _brute_kl(label.grid, uniform)) < 1e-12


def test_kl_rejects_zero_prediction_under_mass():
    target = np.full((1, 1, 2, 2), 0.25)
    probs = np.array([[[[0.5, 0.5], [0.0, 0.0]]]])
    with pytest.raises(ValueError):
        kl_loss(target, probs)


@pytest.mark.parametrize("seed", range(5))
def test_kl_through_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    b = 3
    z = rng.normal(size=(b, 1, 6, 7))
    labels = np.concatenate([
        normalize_label(gaussian_label(rng.uniform(0, 7), rng.uniform(0, 6), 1.5, 6, 7)).grid for _ in range(b)
    ])
    _, analytic = kl_loss(labels, spatial_softmax(z))
    np.testing.assert_allclose(analytic, (spatial_softmax(z) - labels) / b)
    numeric = numerical_grad(lambda: kl_loss(labels, spatial_softmax(z))[0], z)
    assert rel_error(analytic, numeric) < 1e-6


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (1, 1, 4, 4), elements=st.floats(-5, 5)),
       arrays(np.float64, (1, 1, 4, 4), elements=st.floats(-5, 5)))
def test_kl_nonnegative(za, zb):
    loss, _ = kl_loss(spatial_softmax(za), spatial_softmax(zb))
    assert loss >= -1e-12


def test_peak_examples():
    h = np.zeros((1, 1, 8, 8))
    h[0, 0, 3, 7] = 1.0
    assert peak_extract(h) == [(7, 3)]
    tie = np.zeros((1, 1, 6, 6))
    tie[0, 0, 0, 5] = 1.0  # (x=5, y=0)
    tie[0, 0, 1, 3] = 1.0  # (x=3, y=1)
    assert peak_extract(tie) == [(5, 0)]
    z = gaussian_label(20, 11, 5, 32, 32).grid
    assert peak_extract(spatial_softmax(z)) == [(20, 11)]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 1, 5, 5), elements=st.integers(-10, 10).map(float)))
def test_peak_invariant_under_monotone_map(h):
    # integer-valued maps so the transforms stay strictly monotone in floating point
    assert peak_extract(h) == peak_extract(np.exp(h)) == peak_extract(3 * h + 7)


def test_bbox_center():
    assert bbox_center(10, 20, 30, 40) == (20, 30)
    assert bbox_center(5, 5, 5, 5) == (5, 5)
    assert bbox_center(0, 0, 1279, 719) == (639.5, 359.5)
    with pytest.raises(ValueError):
        bbox_center(10, 0, 5, 4)
