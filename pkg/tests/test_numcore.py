import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flowlab.numcore import Rng, norm_pq, sample_half_normal, sample_normal, sample_uniform

finite = st.floats(-1e3, 1e3, allow_nan=False)
mats = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=finite)


def test_norm_identity_21():
    assert norm_pq(np.eye(2), 2, 1) == 2.0


def test_norm_max_row():
    assert norm_pq(np.array([[3.0, 4.0], [0.0, 1.0]]), 2, math.inf) == 5.0


def test_norm_frobenius_ones():
    assert norm_pq(np.ones((2, 2)), 2, 2) == 2.0


def test_norm_other_combinations():
    m = np.array([[1.0, -2.0], [3.0, 0.5]])
    assert norm_pq(m, 1, 2) == pytest.approx(math.hypot(3.0, 3.5))
    assert norm_pq(m, math.inf, math.inf) == 3.0


def test_norm_empty_raises():
    with pytest.raises(ValueError, match="empty matrix"):
        norm_pq(np.zeros((0, 3)), 2, 1)


@given(mats)
def test_norm_21_dominates_2inf(m):
    assert norm_pq(m, 2, 1) >= norm_pq(m, 2, math.inf) * (1 - 1e-12)


@given(mats, st.floats(0, 100))
def test_norm_homogeneous(m, c):
    for p, q in [(2, 1), (2, 2), (2, math.inf), (1, 2), (math.inf, math.inf)]:
        assert norm_pq(c * m, p, q) == pytest.approx(c * norm_pq(m, p, q), rel=1e-12, abs=1e-300)


def test_norm_matches_numpy_frobenius():
    m = np.random.default_rng(1).normal(size=(7, 4))
    assert norm_pq(m, 2, 2) == pytest.approx(np.linalg.norm(m))


def test_normal_degenerate():
    assert np.array_equal(sample_normal(Rng(3), 0.0, 0.0, 3), np.zeros(3))
    assert np.array_equal(sample_normal(Rng(3), 5.0, 0.0, 1), np.array([5.0]))


def test_normal_empty():
    assert sample_normal(Rng(0), 0.0, 1.0, 0).shape == (0,)


def test_normal_mean_lln():
    x = sample_normal(Rng(11), 0.0, 1.0, 10**6)
    assert abs(x.mean()) < 4e-3


def test_half_normal_zero_and_sign():
    assert np.array_equal(sample_half_normal(Rng(0), 0.0, 5), np.zeros(5))
    assert np.all(sample_half_normal(Rng(1), 2.0, 1000) >= 0)


def test_half_normal_mean():
    x = sample_half_normal(Rng(12), 1.0, 10**6)
    assert abs(x.mean() - math.sqrt(2 / math.pi)) < 4e-3


def test_uniform_range():
    x = sample_uniform(Rng(2), -1.0, 1.0, 1000)
    assert x.min() >= -1.0 and x.max() < 1.0


def test_rng_determinism():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(0, 1, 10**4), b.normal(0, 1, 10**4))


def test_spawned_streams_independent_of_order():
    r = Rng(5)
    x1 = r.spawn(1).normal(0, 1, 4)
    r2 = Rng(5)
    r2.spawn(2).normal(0, 1, 100)
    assert np.array_equal(r2.spawn(1).normal(0, 1, 4), x1)


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        sample_normal(Rng(0), 0.0, -1.0, 2)
