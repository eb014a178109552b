import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import triple_loop_matmul
from tselab.errors import ShapeError, ValidationError
from tselab.matcore import (
    RngStream,
    as_matrix,
    frobenius_sq,
    matmul,
    project_complement,
    project_mean,
    sample_gaussian,
    sample_uniform_scaled,
    sample_xavier_uniform,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
shapes = st.tuples(st.integers(1, 12), st.integers(1, 12))
matrices = shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def test_matmul_identity_and_scalar():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(matmul(np.eye(3), a), a)
    assert matmul([[2.0]], [[3.0]])[0, 0] == 6.0


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 2))
    assert np.allclose(matmul(a, b), triple_loop_matmul(a, b), rtol=0, atol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_bad_input():
    with pytest.raises(ShapeError):
        as_matrix(np.ones(3))
    with pytest.raises(ValidationError):
        as_matrix([[1.0, np.nan]])


def test_projector_examples():
    v = np.array([1.0, -2.0, 0.5])
    x = np.outer(np.ones(4), v)
    assert np.allclose(project_mean(x), x)
    assert np.allclose(project_complement(x), 0.0)
    assert np.allclose(project_mean([[1.0], [3.0]]), [[2.0], [2.0]])
    c = x - x.mean(axis=0) + np.array([[1.0, 2, 3], [-1, -2, -3], [0, 0, 0], [0, 0, 0]])
    assert np.allclose(project_mean(c), 0.0)
    assert np.allclose(project_complement(c), c)


def test_frobenius_examples():
    assert frobenius_sq(np.zeros((2, 2))) == 0.0
    assert frobenius_sq(np.eye(3)) == 3.0
    assert frobenius_sq([[3.0, 4.0]]) == 25.0


@given(matrices)
def test_pythagoras_and_decomposition(x):
    m, c = project_mean(x), project_complement(x)
    assert np.allclose(m + c, x, rtol=0, atol=1e-12 * (1 + np.abs(x).max()))
    total = frobenius_sq(x)
    assert abs(frobenius_sq(m) + frobenius_sq(c) - total) <= 1e-12 * total + 1e-300


@given(matrices)
def test_projectors_idempotent(x):
    m = project_mean(x)
    c = project_complement(x)
    scale = 1 + np.abs(x).max()
    assert np.max(np.abs(project_mean(m) - m)) <= 1e-14 * scale
    assert np.max(np.abs(project_complement(c) - c)) <= 1e-14 * scale
    assert np.max(np.abs(project_mean(c))) <= 1e-13 * scale


def test_gaussian_moments():
    z = sample_gaussian(RngStream(1), 1000, 1000, 1.0)
    assert abs(z.mean()) < 4.0 / 1000.0
    assert abs(z.var() - 1.0) < 0.01


def test_uniform_support_and_variance():
    s = 0.3
    u = sample_uniform_scaled(RngStream(2), 1000, 1000, s)
    assert np.all(np.abs(u) < s)
    assert abs(u.var() / (s * s / 3.0) - 1.0) < 0.02


def test_xavier_bound():
    w = sample_xavier_uniform(RngStream(3), 20, 40)
    assert np.all(np.abs(w) < np.sqrt(6.0 / 60.0))


def test_sampling_rejects_nonpositive_scale():
    with pytest.raises(ValidationError):
        sample_gaussian(RngStream(0), 2, 2, 0.0)
    with pytest.raises(ValidationError):
        sample_uniform_scaled(RngStream(0), 2, 2, -1.0)


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_stream_determinism(seed, sid):
    s = RngStream(seed, sid)
    assert np.array_equal(sample_gaussian(s, 3, 4, 1.0), sample_gaussian(RngStream(seed, sid), 3, 4, 1.0))


def test_streams_are_distinct_and_order_free():
    base = RngStream(7)
    a = sample_gaussian(base.child(1), 4, 4, 1.0)
    b = sample_gaussian(base.child(2), 4, 4, 1.0)
    assert not np.array_equal(a, b)
    # drawing child 2 first changes nothing about child 1
    b2 = sample_gaussian(base.child(2), 4, 4, 1.0)
    a2 = sample_gaussian(base.child(1), 4, 4, 1.0)
    assert np.array_equal(a, a2) and np.array_equal(b, b2)
    assert not np.array_equal(sample_gaussian(RngStream(7, 1), 4, 4, 1.0), sample_gaussian(RngStream(7, 2), 4, 4, 1.0))
    assert base.child("w") == base.child("w")


def test_stream_key_range():
    with pytest.raises(ValidationError):
        RngStream(-1)
    with pytest.raises(ValidationError):
        RngStream(0, 2**64)
