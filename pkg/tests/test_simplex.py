import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldmole import oracles, simplex

U = [2.0, 1.0, 0.0]


def scores(min_size=1, max_size=8):
    return st.integers(min_size, max_size).flatmap(
        lambda n: arrays(np.float64, n, elements=st.floats(-5, 5, allow_nan=False)))


lambdas = st.floats(-10, 0.99, allow_nan=False)


# --- support_and_threshold -------------------------------------------------

@pytest.mark.parametrize("lam,k,tau", [(0.0, 1, 1.0), (-2.0, 2, 0.0)])
def test_support_threshold_examples(lam, k, tau):
    st_ = simplex.support_and_threshold(U, lam)
    assert st_.k == k
    assert st_.tau == pytest.approx(tau, abs=1e-12)


@pytest.mark.parametrize("c", [-3.0, 0.0, 0.7])
@pytest.mark.parametrize("lam", [-5.0, 0.0, 0.9])
def test_constant_scores_use_full_support(c, lam):
    E = 5
    st_ = simplex.support_and_threshold(np.full(E, c), lam)
    assert st_.k == E
    assert st_.tau == pytest.approx(c - (1 - lam) / E)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        simplex.sparsegen_project([1.0, np.nan], 0.0)
    with pytest.raises(ValueError):
        simplex.sparsegen_project([1.0, 2.0], 1.0)
    with pytest.raises(ValueError):
        simplex.sparsegen_project([], 0.0)


# --- sparsegen_project / sparsemax ----------------------------------------

@pytest.mark.parametrize("u,lam,expected", [
    ([0.5, 0.3, 0.2], 0.0, [0.5, 0.3, 0.2]),
    (U, 0.0, [1, 0, 0]),
    (U, -2.0, [2 / 3, 1 / 3, 0]),
    ([0.5, 0.3, 0.2], 0.5, [2 / 3, 4 / 15, 1 / 15]),
])
def test_projection_examples(u, lam, expected):
    p = simplex.sparsegen_project(u, lam).probs
    np.testing.assert_allclose(p, expected, atol=1e-12)
    np.testing.assert_allclose(oracles.qp_oracle(u, lam), expected, atol=1e-12)


@pytest.mark.parametrize("u,expected", [
    (U, [1, 0, 0]), ([0, 0], [0.5, 0.5]), ([0.5, 0.3, 0.2], [0.5, 0.3, 0.2])])
def test_sparsemax_examples(u, expected):
    np.testing.assert_allclose(simplex.sparsemax(u).probs, expected, atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(scores(), lambdas)
def test_projection_is_a_simplex_point_with_support(u, lam):
    p = simplex.sparsegen_project(u, lam).probs
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.count_nonzero(p) >= 1


@settings(max_examples=300, deadline=None)
@given(scores(max_size=7), lambdas)
def test_projection_matches_enumeration_oracle(u, lam):
    np.testing.assert_allclose(simplex.sparsegen_project(u, lam).probs,
                               oracles.qp_oracle(u, lam), atol=1e-8)


@settings(max_examples=200, deadline=None)
@given(scores(min_size=2), lambdas, st.floats(-3, 3))
def test_shift_invariance_and_order(u, lam, c):
    p = simplex.sparsegen_project(u, lam).probs
    np.testing.assert_allclose(simplex.sparsegen_project(u + c, lam).probs, p, atol=1e-9)
    # larger score never gets a smaller weight
    order = np.argsort(-u, kind="stable")
    assert np.all(np.diff(p[order]) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(scores(min_size=2), st.floats(-10, 0.9), st.floats(0.001, 0.09))
def test_support_shrinks_as_lambda_grows(u, lam, step):
    k1 = simplex.sparsegen_project(u, lam).k_active
    k2 = simplex.sparsegen_project(u, lam + step).k_active
    assert k2 <= k1


def test_limits():
    rng = np.random.default_rng(3)
    for _ in range(200):
        u = rng.standard_normal(rng.integers(2, 9))
        assert np.max(np.abs(simplex.sparsegen_project(u, 0.0).probs
                             - oracles.qp_oracle(u, 0.0))) <= 1e-10
        p = simplex.sparsegen_project(u, -1e6).probs
        assert np.max(np.abs(p - 1 / u.size)) <= 1e-5


def test_ties_keep_lower_index_first():
    st_ = simplex.support_and_threshold([5.0, 5.0, 0.0], 0.9)
    assert list(st_.order[:2]) == [0, 1]


# --- jacobian -------------------------------------------------------------

def test_jacobian_saturated_is_zero():
    jac = simplex.jacobian(U, 0.0)
    assert np.all(jac.d_p_d_u == 0) and np.all(jac.d_p_d_lambda == 0)
    # u[1] equals the threshold here, so differences are taken just off the tie
    with pytest.raises(oracles.TrialRejected):
        oracles.fd_derivatives(U, 0.0)
    fd = oracles.fd_derivatives([2.0, 0.999, 0.0], 0.0)
    np.testing.assert_allclose(fd.d_p_d_u, 0, atol=1e-8)
    np.testing.assert_allclose(fd.d_p_d_lambda, 0, atol=1e-8)


def test_jacobian_two_active():
    jac = simplex.jacobian(U, -2.0)
    np.testing.assert_allclose(jac.d_p_d_u[:2, :2], [[1 / 6, -1 / 6], [-1 / 6, 1 / 6]])
    np.testing.assert_allclose(jac.d_p_d_u[2], 0)
    np.testing.assert_allclose(jac.d_p_d_u[:, 2], 0)
    np.testing.assert_allclose(jac.d_p_d_lambda, [1 / 18, -1 / 18, 0])


def test_jacobian_example_sits_on_a_kink():
    # at u=[2,1,0], lambda=-2 the third score equals the threshold, so central
    # differences straddle two supports; nudge it off the tie to compare
    with pytest.raises(oracles.TrialRejected):
        oracles.fd_derivatives(U, -2.0)
    u = [2.0, 1.0, -1e-3]
    fd = oracles.fd_derivatives(u, -2.0)
    jac = simplex.jacobian(u, -2.0)
    assert oracles.rel_error(jac.d_p_d_u, fd.d_p_d_u) <= 1e-4
    np.testing.assert_allclose(fd.d_p_d_lambda, [1 / 18, -1 / 18, 0], atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(scores(min_size=2), lambdas)
def test_jacobian_preserves_sum(u, lam):
    jac = simplex.jacobian(u, lam)
    np.testing.assert_allclose(jac.d_p_d_u.sum(axis=0), 0, atol=1e-9)
    assert abs(jac.d_p_d_lambda.sum()) <= 1e-9


# --- lambda_interval / lambda_lower --------------------------------------

@pytest.mark.parametrize("k,lower,upper,probe", [
    (1, 0.0, 1.0, 0.5), (2, -2.0, 0.0, -1.0), (3, -np.inf, -2.0, -3.0)])
def test_interval_examples(k, lower, upper, probe):
    iv = simplex.lambda_interval(U, k)
    assert (iv.lower, iv.upper) == (lower, upper)
    assert iv.contains(probe)
    assert simplex.sparsegen_project(U, probe).k_active == k
    assert simplex.sparsegen_project(U, iv.midpoint()).k_active == k


@pytest.mark.parametrize("k,expected", [(2, -2.0), (1, 0.0)])
def test_lambda_lower_examples(k, expected):
    assert simplex.lambda_lower(U, k) == expected
    assert simplex.lambda_lower(U, k) == simplex.lambda_interval(U, k).lower


def test_lambda_lower_constant_and_full():
    assert simplex.lambda_lower(np.full(4, 0.3), 3) == 1.0
    assert simplex.lambda_interval(np.full(4, 0.3), 3).empty
    assert simplex.lambda_lower(U, 3) == -np.inf
    with pytest.raises(ValueError):
        simplex.lambda_interval(U, 0)
    with pytest.raises(ValueError):
        simplex.lambda_interval(U, 4)


@settings(max_examples=200, deadline=None)
@given(scores(min_size=2, max_size=8))
def test_interval_soundness(u):
    if np.min(np.diff(np.sort(u))) < 1e-6:
        return
    for k in range(1, u.size + 1):
        iv = simplex.lambda_interval(u, k)
        assert simplex.sparsegen_project(u, iv.midpoint()).k_active == k
        if k < u.size:
            assert simplex.sparsegen_project(u, iv.lower - 1e-6).k_active >= k + 1


# --- batched kernels ------------------------------------------------------

def test_batch_matches_single_vector_path():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((64, 6))
    lam = rng.uniform(-10, 0.99, 64)
    probs, tau, k, order = simplex.sparsegen_batch(u, lam)
    for i in range(64):
        one = simplex.support_and_threshold(u[i], lam[i])
        np.testing.assert_allclose(probs[i], simplex.sparsegen_project(u[i], lam[i]).probs,
                                   atol=1e-14)
        assert k[i] == one.k and tau[i] == pytest.approx(one.tau)
    g = rng.standard_normal((64, 6))
    mask = simplex.support_mask(order, k)
    gu, gl = simplex.sparsegen_batch_backward(probs, lam, k, mask, g)
    for i in range(64):
        jac = simplex.jacobian(u[i], lam[i])
        np.testing.assert_allclose(gu[i], jac.d_p_d_u.T @ g[i], atol=1e-10)
        assert gl[i] == pytest.approx(jac.d_p_d_lambda @ g[i], abs=1e-10)
