import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cloth.errors import DimensionError, DomainError
from cloth.numerics import (SeededStream, as_vector, clamp_mask, clamped_log, cross_entropy, entropy, one_hot,
                            softmax)

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = softmax(x)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(softmax(x), softmax(x + c), atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    p = softmax(np.array([1e300, 0.0, -1e300]))
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        softmax(np.zeros(0))


def test_clamped_log_is_finite_at_zero():
    assert clamped_log(0.0) == pytest.approx(math.log(1e-12))
    assert clamp_mask(np.array([0.0, 0.5]))[0] == 0.0


@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(0, 1)))
def test_entropy_bounds(w):
    if w.sum() == 0:
        w = np.ones_like(w)
    p = w / w.sum()
    h = entropy(p)
    assert -1e-12 <= h <= math.log(len(p)) + 1e-12


def test_entropy_zero_log_zero_convention():
    assert entropy(np.array([1.0, 0.0])) == 0.0
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(math.log(2))


def test_entropy_rejects_negative():
    with pytest.raises(DomainError):
        entropy(np.array([1.5, -0.5]))


def test_cross_entropy_one_hot():
    t = one_hot([1], 3)
    assert cross_entropy(t, np.array([[0.2, 0.5, 0.3]]))[0] == pytest.approx(-math.log(0.5))
    with pytest.raises(DimensionError):
        cross_entropy(np.ones(3), np.ones(2))


def test_as_vector_rejects_matrix():
    with pytest.raises(DimensionError):
        as_vector(np.ones((2, 2)))


def test_seeded_streams_reproducible_and_independent():
    a = SeededStream(7).child("data", "batches").uniform(5)
    b = SeededStream(7).child("data", "batches").uniform(5)
    c = SeededStream(7).child("nn", "init").uniform(5)
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_child_stream_unaffected_by_sibling_consumption():
    root = SeededStream(3)
    first = root.child("x").uniform(4)
    root.child("y").uniform(1000)
    np.testing.assert_array_equal(first, SeededStream(3).child("x").uniform(4))
