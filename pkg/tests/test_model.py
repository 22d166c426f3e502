import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frozen_values import GAMMA_LOGPDF_AT_1, LOGISTIC_MINUS_1_2, SINGLE_EVENT_LOGLIK, WEIBULL_SURV_A2_LOG3_HALF
from mixcure.exceptions import ContractError, DataError, DomainError
from mixcure.model import (
    CompleteDataPosterior,
    Dataset,
    LatencyFamily,
    ParameterPoint,
    PriorSpec,
    aft_log_time_params,
    complete_loglik,
    incidence_prob,
    latency_hazard,
    latency_survival,
    log_prior,
    log_susceptible_prob,
    loglik_grad_hess,
    population_survival,
)

from conftest import intercept_only

FAMILIES = list(LatencyFamily)


def point(b1=(0.0,), b2=(0.0,), alpha=1.0):
    return ParameterPoint(np.array(b1, float), np.array(b2, float), math.log(alpha))


class TestIncidence:
    def test_symmetry(self):
        assert incidence_prob([0.0], [1.0]) == 0.5

    def test_frozen_value(self):
        assert incidence_prob([-1.2], [1.0]) == pytest.approx(LOGISTIC_MINUS_1_2, rel=1e-14)

    def test_saturation(self):
        eta = incidence_prob([50.0], [1.0])
        assert np.isfinite(eta) and eta <= 1.0
        # 1 - 2e-22 rounds to 1 in double precision; the log complement keeps it
        assert log_susceptible_prob([50.0], [1.0]) == pytest.approx(-50.0, abs=1e-12)
        assert incidence_prob([-800.0], [1.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            incidence_prob([1.0, 2.0], [1.0])


class TestLatency:
    @pytest.mark.parametrize("fam", FAMILIES)
    def test_origin(self, fam):
        assert latency_survival(1e-300, point(alpha=1.3), [1.0], fam) == pytest.approx(1.0)

    def test_unit_exponential(self):
        assert latency_survival(1.0, point(), [1.0]) == pytest.approx(math.exp(-1))

    def test_frozen_weibull(self):
        p = point(b2=(math.log(3),), alpha=2.0)
        assert latency_survival(0.5, p, [1.0]) == pytest.approx(WEIBULL_SURV_A2_LOG3_HALF, rel=1e-13)

    def test_hazard(self):
        t = np.array([0.1, 1.0, 7.0])
        assert np.allclose(latency_hazard(t, point(), [1.0]), 1.0)
        assert latency_hazard(3.0, point(alpha=2.0), [1.0]) == pytest.approx(6.0)

    def test_hazard_is_derivative_of_cumulative_hazard(self):
        p, t, h = point(b2=(0.3,), alpha=1.5), 2.0, 1e-5
        H = lambda s: -np.log(latency_survival(s, p, [1.0]))
        fd = (H(t + h) - H(t - h)) / (2 * h)
        assert latency_hazard(t, p, [1.0]) == pytest.approx(fd, rel=1e-6)

    def test_nonpositive_time(self):
        with pytest.raises(DomainError):
            latency_survival(0.0, point(), [1.0])

    def test_aft_reading(self):
        # log T = mu + sigma * G with G standard minimum-Gumbel gives the same survival
        p = point(b2=(0.4,), alpha=1.7)
        mu, sigma = aft_log_time_params(p, [1.0])
        t = 1.3
        gumbel_surv = math.exp(-math.exp((math.log(t) - mu) / sigma))
        assert latency_survival(t, p, [1.0], "weibull-aft") == pytest.approx(gumbel_surv)


class TestPopulationSurvival:
    def test_plateau(self):
        eta = 0.3
        p = point(b1=(math.log(eta / (1 - eta)),), alpha=1.2)
        assert population_survival(1e6, p, [1.0], [1.0]) == pytest.approx(0.3, abs=1e-12)

    def test_arithmetic(self):
        eta, su = 0.25, 0.4
        p = point(b1=(math.log(eta / (1 - eta)),), b2=(math.log(-math.log(su)),))
        assert population_survival(1.0, p, [1.0], [1.0]) == pytest.approx(0.55)

    @given(st.floats(-5, 5), st.floats(-3, 3), st.floats(0.2, 4), st.floats(1e-3, 50))
    def test_bounds(self, b1, b2, alpha, t):
        s = population_survival(t, point((b1,), (b2,), alpha), [1.0], [1.0])
        assert 0.0 <= s <= 1.0


class TestCompleteLikelihood:
    def test_single_event(self):
        d = intercept_only([1.0], [1])
        assert complete_loglik(point(), d, [0]) == pytest.approx(SINGLE_EVENT_LOGLIK, rel=1e-14)

    @pytest.mark.parametrize("t", [0.01, 1.0, 100.0])
    def test_cured_subject(self, t):
        d = intercept_only([t], [0])
        assert complete_loglik(point(b2=(2.0,), alpha=3.0), d, [1]) == pytest.approx(math.log(0.5))

    def test_additive_over_subjects(self, covariate_data):
        d = covariate_data
        rng = np.random.default_rng(0)
        z = np.where(d.events == 1, 0, rng.integers(0, 2, d.n))
        p = ParameterPoint(rng.normal(size=d.p1), rng.normal(size=d.p2) * 0.3, 0.1)
        total = complete_loglik(p, d, z)
        parts = sum(complete_loglik(p, d.take([i]), z[[i]]) for i in range(d.n))
        assert total == pytest.approx(parts, rel=1e-12)

    def test_event_must_be_susceptible(self):
        d = intercept_only([1.0, 2.0], [1, 0])
        with pytest.raises(ContractError):
            CompleteDataPosterior(d, [1, 0])


def _fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("fam", FAMILIES)
def test_gradient_hessian_match_finite_differences(covariate_data, fam):
    d = covariate_data
    rng = np.random.default_rng(5)
    z = np.where(d.events == 1, 0, rng.integers(0, 2, d.n))
    post = CompleteDataPosterior(d, z, PriorSpec(), fam)
    for _ in range(5):
        x = np.concatenate([rng.normal(0, 0.7, d.p1 + d.p2), [rng.normal(0.1, 0.3)]])
        _, g, H = post.value_grad_hess(x)
        assert np.allclose(g, _fd(post.logpdf, x), rtol=1e-6, atol=1e-6 * max(1.0, abs(post.logpdf(x))) * 1e-3)
        Hfd = np.array([_fd(lambda y: post.value_grad_hess(y)[1][j], x) for j in range(x.size)])
        assert np.allclose(H, Hfd, rtol=1e-6, atol=1e-5)
        assert np.allclose(H, H.T, atol=1e-10)


def test_prior_only_latency_gradient_zero():
    # a single cured subject leaves the latency block with no data
    d = intercept_only([1.0], [0])
    g, _ = loglik_grad_hess(point(), d, [1], PriorSpec())
    assert g[1] == pytest.approx(0.0, abs=1e-15)


class TestPrior:
    def test_coefficient_contribution(self):
        spec = PriorSpec()
        lp = log_prior(point(), spec)
        shape = GAMMA_LOGPDF_AT_1
        assert lp - shape == pytest.approx(-math.log(2 * math.pi * 1000), rel=1e-14)

    def test_gamma_at_one(self):
        p1 = log_prior(point(), PriorSpec())
        coef = -math.log(2 * math.pi * 1000)
        assert p1 - coef == pytest.approx(GAMMA_LOGPDF_AT_1, rel=1e-13)

    def test_doubling_variance(self):
        a = log_prior(point(), PriorSpec(variance=5.0))
        b = log_prior(point(), PriorSpec(variance=10.0))
        assert a - b == pytest.approx(2 * 0.5 * math.log(2))

    def test_per_coefficient(self):
        spec = PriorSpec(means=[1.0, -1.0], variances=[2.0, 3.0])
        assert np.allclose(spec.coef_means(2), [1, -1])
        with pytest.raises(ContractError):
            spec.coef_variances(3)
        with pytest.raises(ContractError):
            PriorSpec(variance=-1.0)


class TestDataset:
    def test_validation(self):
        with pytest.raises(DataError):
            intercept_only([1.0, 0.0], [1, 0])
        with pytest.raises(DataError):
            intercept_only([1.0, 2.0], [1, 2])
        with pytest.raises(DataError):
            intercept_only([1.0, np.inf], [1, 0])

    def test_counts(self, covariate_data):
        d = covariate_data
        assert d.n_cen + d.n_unc == d.n
        assert d.dim == d.p1 + d.p2 + 1
        assert d.parameter_names[-1] == "log_alpha"
        assert len(d.parameter_names) == d.dim

    def test_constant_covariate_warns(self):
        with pytest.warns(UserWarning, match="constant"):
            Dataset([1.0, 2.0], [1, 0], np.column_stack([np.ones(2), [3.0, 3.0]]), np.ones((2, 1)),
                    ("(Intercept)", "c"), ("(Intercept)",))


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(12))))
def test_loglik_permutation_invariant(perm):
    from frozen_values import EVENTS, TIMES

    d = intercept_only(TIMES, EVENTS)
    z = np.array([0] * 8 + [1, 0, 1, 0])
    p = point((-0.5,), (0.2,), 1.3)
    a = complete_loglik(p, d, z)
    b = complete_loglik(p, d.take(list(perm)), z[list(perm)])
    assert a == pytest.approx(b, rel=1e-13)
