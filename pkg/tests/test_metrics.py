import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import random_attention
from tselab.errors import BoundaryError, UndefinedMeasureError
from tselab.metrics import (
    DiagnosticsRecord,
    cosine_similarity,
    delta,
    escalation_rate,
    eta_sample,
    mu_pair,
    omega,
    token_diversity,
    token_similarity,
    xi_pair,
)
from tselab.transformer import deescalate


_CENTRED = np.array([[1.0, 2.0, 0.0], [-1.0, -2.0, 0.0], [3.0, 0.0, 1.0], [-3.0, 0.0, -1.0]])


def _pair(seed, n=6, d=4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d)) + rng.uniform(0, 3) * rng.standard_normal(d)
    y = rng.standard_normal((n, d)) + rng.uniform(0, 3) * rng.standard_normal(d)
    return x, y


def test_similarity_examples():
    v = np.array([1.0, 2.0, -1.0])
    assert token_similarity(np.outer(np.ones(4), v)) == pytest.approx(1.0)
    assert token_diversity(np.outer(np.ones(4), v)) == pytest.approx(0.0, abs=1e-15)
    c = np.array([[1.0, 2.0], [-1.0, -2.0]])
    assert token_similarity(c) == 0.0 and token_diversity(c) == 1.0
    assert token_similarity(np.eye(2)) == pytest.approx(0.5)
    assert token_diversity(np.eye(2)) == pytest.approx(0.5)
    with pytest.raises(UndefinedMeasureError):
        token_similarity(np.zeros((3, 3)))
    with pytest.raises(UndefinedMeasureError):
        token_diversity(np.zeros((3, 3)))


def test_diversity_keeps_precision_near_saturation():
    x = np.outer(np.ones(8), np.ones(5))
    x[0, 0] += 1e-9
    assert 0 < token_diversity(x) < 1e-18


def test_cosine_examples():
    v = np.array([1.0, 2.0])
    assert cosine_similarity(np.vstack([v, v, v])) == pytest.approx(1.0)
    assert cosine_similarity(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(0.0)
    assert cosine_similarity(np.vstack([v, -v])) == pytest.approx(-1.0)
    with pytest.raises(UndefinedMeasureError, match="row 1"):
        cosine_similarity(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(UndefinedMeasureError):
        cosine_similarity(np.array([[1.0, 0.0]]))


def test_cosine_matches_pairwise_loop(rng):
    x = rng.standard_normal((7, 5))
    tot = 0.0
    for i in range(7):
        for j in range(i + 1, 7):
            tot += x[i] @ x[j] / np.linalg.norm(x[i]) / np.linalg.norm(x[j])
    assert cosine_similarity(x) == pytest.approx(2 * tot / 42, abs=1e-14)


def test_xi_examples(rng):
    x = rng.standard_normal((5, 3)) + 1.0
    assert xi_pair(x, x) == pytest.approx((1.0, 1.0))
    assert xi_pair(x, 2 * x) == pytest.approx((4.0, 4.0))
    xi1, xi2 = xi_pair(x, deescalate(x, 1.0))
    assert xi1 == pytest.approx(0.0, abs=1e-28) and xi2 == pytest.approx(1.0)
    with pytest.raises(BoundaryError) as info:
        xi_pair(deescalate(x, 1.0) * 0 + np.ones((5, 3)), x)
    assert info.value.projector == "Pi_2"


def test_rate_examples_and_boundary(rng):
    x = rng.standard_normal((5, 3)) + 1.0
    assert escalation_rate(x, x) == pytest.approx(1.0)
    with pytest.raises(BoundaryError):
        escalation_rate(x, np.ones((5, 3)))
    with pytest.raises(BoundaryError):
        escalation_rate(_CENTRED, _CENTRED + 1.0)


def test_mu_and_omega_examples(rng):
    x = rng.standard_normal((6, 4)) + 1.0
    assert mu_pair(x, np.eye(6)) == pytest.approx((1.0, 1.0))
    # doubly stochastic: a convex mix of permutations
    p = 0.5 * np.eye(6) + 0.5 * np.eye(6)[rng.permutation(6)]
    assert mu_pair(x, p)[0] == pytest.approx(1.0)
    assert omega(x, p) == pytest.approx(0.0, abs=1e-15)
    v = rng.standard_normal(4)
    assert omega(np.outer(np.ones(6), v), random_attention(rng, 6, 3)) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(BoundaryError):
        omega(np.vstack([_CENTRED, _CENTRED[:2]]), p)


def test_eta_examples(rng):
    x = rng.standard_normal((5, 3)) + 1.0
    assert eta_sample(x, x, 1.0, 1.0) == 0.0
    y = x + 0.3 * rng.standard_normal((5, 3))
    xi1, xi2 = xi_pair(x, y)
    assert eta_sample(x, y, 2 * xi1, 2 * xi2) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(BoundaryError):
        eta_sample(x, y, 1.0, 0.0)


def test_eta_mean_small_at_large_width():
    rng = np.random.default_rng(4)
    n, d = 20, 400
    x = np.outer(np.ones(n), rng.standard_normal(d)) + rng.standard_normal((n, d))
    p = random_attention(rng, n, 8)
    from tselab.theory import expected_xi, multihead_mu_bar

    e1, e2 = expected_xi(1.0, 1.0, *multihead_mu_bar(x, [p]))
    etas = [eta_sample(x, x + p @ x @ (rng.standard_normal((d, d)) / np.sqrt(d)), e1, e2) for _ in range(40)]
    assert abs(np.mean(etas)) < 0.05


@given(st.integers(0, 10**6), st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3))
def test_sum_to_one_and_scale_invariance(seed, c):
    x, _ = _pair(seed)
    assert abs(token_similarity(x) + token_diversity(x) - 1.0) <= 1e-12
    assert abs(token_similarity(c * x) - token_similarity(x)) <= 1e-12


@given(st.integers(0, 10**6))
def test_rate_identity_and_sign_coupling(seed):
    x, y = _pair(seed)
    r = escalation_rate(x, y)
    xi1, xi2 = xi_pair(x, y)
    t = token_similarity(x)
    assert abs(r - (1 + (xi1 / xi2 - 1) * t)) <= 1e-10 * abs(r)
    assume(abs(xi1 - xi2) > 1e-9)
    assert np.sign(r - 1) == np.sign(xi1 - xi2)


@given(st.integers(0, 10**6), st.integers(2, 24), st.floats(0.05, 5.0))
def test_mu_bounds(seed, n, sharp):
    rng = np.random.default_rng(seed)
    p = random_attention(rng, n, 5, sharp)
    x = rng.standard_normal((n, 4)) + rng.uniform(0, 3) * rng.standard_normal(4)
    mu1, mu2 = mu_pair(x, p)
    om, de = omega(x, p), delta(p)
    assert mu1**2 >= (1 - om) ** 2 - 1e-10
    assert mu2**2 <= de**2 + 1e-10


def test_record_invariants(rng):
    x = rng.standard_normal((6, 4)) + 1.0
    y = x + rng.standard_normal((6, 4))
    rec = DiagnosticsRecord.measure(3, 1, x, y, cosine=True)
    assert abs(rec.t_sim + rec.t_div - 1) <= 1e-12
    assert rec.xi_ratio == rec.xi1 / rec.xi2
    assert rec.as_dict()["block_index"] == 3
    # saturated input: the ratios stay NaN rather than raising
    rec = DiagnosticsRecord.measure(1, 2, np.ones((3, 2)), np.ones((3, 2)))
    assert np.isnan(rec.r_rate) and rec.t_sim == pytest.approx(1.0)
