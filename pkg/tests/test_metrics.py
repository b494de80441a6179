import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infodrop.errors import QueryError
from infodrop.layers import HALF_LOG_2PI_E, PriorSpec, kl_softplus_unit
from infodrop.metrics import (
    CovarianceSummary,
    DiscreteJoint,
    LogNormal,
    LogUniform,
    binary_entropy,
    discrete_ib_search,
    discrete_info,
    expected_kl_to_product,
    factorized_prior_objective,
    gaussian_entropy,
    gaussian_total_correlation,
    joint_from_channel,
    log_activation_histogram,
    mc_kl_estimate,
)
from infodrop.tensor import Rng

LN2 = math.log(2)


# ---------------------------------------------------------------- Monte-Carlo KL


def test_mc_kl_identical():
    est, se = mc_kl_estimate(LogNormal(0.3, 0.6), LogNormal(0.3, 0.6), 10**5, Rng(0))
    assert abs(est) <= 3 * se + 1e-15


def test_mc_kl_matches_softplus_closed_form():
    est, se = mc_kl_estimate(LogNormal(0.0, 0.3), LogNormal(0.5, 1.0), 10**6, Rng(1))
    closed = kl_softplus_unit(0.3, 1.0, PriorSpec("log_normal", mu=0.5, sigma=1.0))
    assert closed == pytest.approx(0.873972, abs=1e-6)
    assert abs(est - closed) <= 3 * se


def test_mc_kl_log_uniform():
    est, se = mc_kl_estimate(LogNormal(0.0, 0.5), LogUniform(0.0), 10**6, Rng(2))
    assert abs(est - (-math.log(0.5) - HALF_LOG_2PI_E)) <= 3 * se


def test_mc_kl_too_few_samples():
    with pytest.raises(ValueError):
        mc_kl_estimate(LogNormal(0, 1), LogNormal(0, 1), 10, Rng(0))


# ---------------------------------------------------------------- Gaussian TC


def test_tc_identity_is_zero():
    assert gaussian_total_correlation(CovarianceSummary(np.eye(4))) == 0.0


def test_tc_bivariate_closed_form():
    cov = CovarianceSummary(np.array([[1.0, 0.8], [0.8, 1.0]]))
    assert gaussian_total_correlation(cov) == pytest.approx(-0.5 * math.log(1 - 0.64), abs=1e-12)
    assert gaussian_total_correlation(cov) == pytest.approx(0.510826, abs=1e-6)
    assert gaussian_total_correlation(cov, unscaled=True) == pytest.approx(-math.log(0.36), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_tc_equals_entropy_difference(seed):
    a = np.random.default_rng(seed).normal(size=(4, 4))
    sigma = a @ a.T + 0.1 * np.eye(4)
    marginals = sum(gaussian_entropy(np.array([[sigma[i, i]]])) for i in range(4))
    tc = gaussian_total_correlation(CovarianceSummary(sigma))
    assert tc == pytest.approx(marginals - gaussian_entropy(sigma), abs=1e-9)
    assert tc >= 0


def test_tc_invariant_to_scaling():
    a = np.random.default_rng(3).normal(size=(3, 3))
    sigma = a @ a.T + np.eye(3)
    d = np.diag([0.1, 5.0, 2.0])
    assert gaussian_total_correlation(CovarianceSummary(d @ sigma @ d)) == pytest.approx(
        gaussian_total_correlation(CovarianceSummary(sigma)), abs=1e-10)


def test_tc_from_samples():
    x = np.random.default_rng(0).normal(size=(20000, 3))
    assert gaussian_total_correlation(CovarianceSummary.from_samples(x)) < 1e-3


def test_covariance_must_be_square():
    with pytest.raises(ValueError):
        CovarianceSummary(np.ones((2, 3)))


# ---------------------------------------------------------------- discrete tables


def test_independent_bits():
    j = DiscreteJoint(["a", "b"], np.full((2, 2), 0.25))
    assert discrete_info(j, "total_correlation", ["a", "b"]) == pytest.approx(0.0, abs=1e-15)
    assert discrete_info(j, "entropy", ["a", "b"]) == pytest.approx(2 * LN2)


def test_copied_bit():
    j = DiscreteJoint(["z1", "z2"], np.array([[0.5, 0.0], [0.0, 0.5]]))
    assert discrete_info(j, "total_correlation", ["z1", "z2"]) == pytest.approx(LN2)


def test_deterministic_copy_information():
    px = np.array([0.2, 0.5, 0.3])
    j = DiscreteJoint(["x", "z"], np.diag(px))
    assert discrete_info(j, "mutual_information", ["x"], ["z"]) == pytest.approx(j.entropy(["x"]))


def test_query_errors():
    j = DiscreteJoint(["a"], np.array([0.5, 0.5]))
    with pytest.raises(QueryError):
        discrete_info(j, "entropy", ["b"])
    with pytest.raises(QueryError):
        discrete_info(j, "mutual_information", ["a"])
    with pytest.raises(QueryError):
        discrete_info(j, "variance", ["a"])


def test_pmf_must_normalize():
    with pytest.raises(ValueError):
        DiscreteJoint(["a"], np.array([0.5, 0.6]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_information_inequalities(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(12)).reshape(2, 3, 2)
    j = DiscreteJoint(["x", "y", "z"], p)
    assert j.mutual_information(["x"], ["y"]) >= -1e-12
    assert j.total_correlation(["x", "y", "z"]) >= -1e-12
    assert j.conditional_entropy(["x"], ["y", "z"]) <= j.entropy(["x"]) + 1e-12


# ---------------------------------------------------------------- factorized prior


def test_factorized_already_optimal():
    q1, q2 = np.array([0.2, 0.8]), np.array([0.1, 0.3, 0.6])
    cond = np.stack([np.outer(q1, q2)] * 3)
    value, q = factorized_prior_objective(cond, np.array([0.3, 0.3, 0.4]), method="iterative", rng=Rng(0))
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(q[0], q1, atol=1e-12)
    np.testing.assert_allclose(q[1], q2, atol=1e-12)


def test_factorized_copy_example():
    cond = np.zeros((2, 2, 2))
    cond[0, 0, 0] = cond[1, 1, 1] = 1.0
    value, _ = factorized_prior_objective(cond, np.array([0.5, 0.5]))
    assert value == pytest.approx(2 * LN2, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_factorized_identity_random(seed):
    rng = Rng(100, (seed,))
    px = rng.gen.dirichlet(np.ones(4))
    cond = rng.gen.dirichlet(np.ones(9), size=4).reshape(4, 3, 3)
    value, q = factorized_prior_objective(cond, px, method="iterative", rng=rng.child(0))
    j = joint_from_channel(cond, px)
    assert value == pytest.approx(j.mutual_information(["x"], ["z1", "z2"]) + j.total_correlation(["z1", "z2"]),
                                  abs=1e-9)
    np.testing.assert_allclose(q[0], j.marginal(["z1"]), atol=1e-9)
    # any other factorized prior does worse
    other = [np.array([0.3, 0.3, 0.4]), np.array([0.5, 0.25, 0.25])]
    assert expected_kl_to_product(cond, px, other) >= value - 1e-12


# ---------------------------------------------------------------- noisy bit


def test_deterministic_closed_forms():
    res = discrete_ib_search(0.2, 0.4)
    hb = binary_entropy(0.2)
    assert hb == pytest.approx(0.500402, abs=1e-6)
    assert abs(res["deterministic"]["identity"] - (hb + 0.4 * LN2)) <= 1e-12
    assert abs(res["deterministic"]["const0"] - LN2) <= 1e-12


def test_stochastic_beats_deterministic_near_crossover():
    res = discrete_ib_search(0.2, 0.28, 0.005)
    det = res["deterministic"]
    best = res["best_stochastic"][1]
    assert best < det["identity"] and best < det["const0"]
    assert min(det.values()) - best > 1e-3


def test_search_argument_checks():
    with pytest.raises(ValueError):
        discrete_ib_search(0.7, 0.3)
    with pytest.raises(ValueError):
        discrete_ib_search(0.2, 0.3, grid_step=0.1)


# ---------------------------------------------------------------- histograms


def test_histogram_self_consistency():
    prior = PriorSpec("log_normal", mu=0.2, sigma=0.7)
    devs = []
    for n in (10**4, 10**6):
        z = np.exp(0.2 + 0.7 * Rng(5).normal((n,)))
        h = log_activation_histogram(z, 30, prior)
        devs.append(np.abs(h["empirical_density"] - h["prior_density"]).max())
    assert devs[1] < devs[0]


def test_histogram_point_mass():
    h = log_activation_histogram(np.ones(100), 20, PriorSpec("log_normal"))
    occupied = np.flatnonzero(h["empirical_density"])
    assert len(occupied) == 1
    assert h["bin_center"][occupied[0]] == pytest.approx(0.0, abs=1e-12)


def test_histogram_atom_mass():
    r = np.random.default_rng(0)
    z = np.where(r.uniform(size=10**5) < 0.3, 0.0, r.lognormal(size=10**5))
    h = log_activation_histogram(z, 20, PriorSpec("log_uniform"))
    assert abs(h["atom_mass"] - 0.3) <= 3 * h["atom_mass_se"]
