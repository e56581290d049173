"""Marginal likelihood and posterior trajectory machinery.

Oracles: dense multivariate-normal density, dense predictive formulas
with explicit solves, and central finite differences of the posterior
mean for the derivative.
"""

import math

import numpy as np
import pytest

from gpjoint.data import SubjectRecord
from gpjoint.errors import DomainError
from gpjoint.kernel import build_cache, sq_exp_kernel
from gpjoint.longitudinal import (
    LongitudinalParams,
    LongitudinalPriors,
    deriv_auc,
    long_loglik,
    posterior_deriv_at,
    posterior_mean_at,
    posterior_var_at,
    practical_range,
)


def make_subject(rng, l=None, sid="s1"):
    l = l or int(rng.integers(3, 13))
    times = np.sort(rng.uniform(0.0, 11.0, size=l))
    values = 5.0 + rng.normal(scale=0.8, size=l)
    return SubjectRecord(subject_id=sid, times=times, values=values, y=1.0, delta=1)


def random_params(rng):
    return LongitudinalParams(
        beta0=float(rng.normal(5.0, 1.0)),
        kappa2=float(rng.uniform(0.05, 2.0)),
        sigma2=float(rng.uniform(0.05, 1.0)),
        rho2=0.1,
    )


def dense_mvn_loglik(values, beta0, cov):
    r = values - beta0
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    quad = r @ np.linalg.solve(cov, r)
    return -0.5 * (len(r) * math.log(2 * math.pi) + logdet + quad)


class TestPracticalRange:
    def test_values(self):
        np.testing.assert_allclose(practical_range(3.0), 1.0, rtol=1e-12)
        np.testing.assert_allclose(practical_range(0.1), 5.4772, atol=1e-4)
        np.testing.assert_allclose(practical_range(0.3), 3.1623, atol=1e-4)

    def test_domain(self):
        with pytest.raises(DomainError):
            practical_range(0.0)
        with pytest.raises(DomainError):
            practical_range(-1.0)


class TestLongLoglik:
    def test_single_obs_standard_normal(self):
        """l=1, X=[5], beta0=5, kappa2=0, sigma2=1 is a standard normal at 0."""
        s = SubjectRecord("a", np.array([0.0]), np.array([5.0]), y=1.0, delta=1)
        p = LongitudinalParams(beta0=5.0, kappa2=0.0, sigma2=1.0, rho2=0.1)
        cache = build_cache(s.times, p.rho2)
        np.testing.assert_allclose(
            long_loglik(s, p, cache), -0.918939, atol=1e-6
        )

    def test_kappa2_zero_is_iid_normal(self):
        rng = np.random.default_rng(42)
        s = make_subject(rng, l=7)
        p = LongitudinalParams(beta0=4.5, kappa2=0.0, sigma2=0.64, rho2=0.1)
        cache = build_cache(s.times, p.rho2)
        iid = np.sum(
            -0.5 * math.log(2 * math.pi * 0.64)
            - 0.5 * (s.values - 4.5) ** 2 / 0.64
        )
        np.testing.assert_allclose(long_loglik(s, p, cache), iid, rtol=1e-12)

    def test_matches_dense_mvn(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            s = make_subject(rng)
            p = random_params(rng)
            cache = build_cache(s.times, p.rho2)
            cov = sq_exp_kernel(s.times, p.rho2, p.kappa2) + p.sigma2 * np.eye(s.n_obs)
            np.testing.assert_allclose(
                long_loglik(s, p, cache),
                dense_mvn_loglik(s.values, p.beta0, cov),
                rtol=1e-8,
                atol=1e-8,
            )

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        s = make_subject(rng, l=9)
        p = random_params(rng)
        cache = build_cache(s.times, p.rho2)
        base = long_loglik(s, p, cache)
        perm = rng.permutation(9)
        s2 = SubjectRecord("a", s.times[perm], s.values[perm], y=1.0, delta=1)
        cache2 = build_cache(s2.times, p.rho2)
        np.testing.assert_allclose(long_loglik(s2, p, cache2), base, rtol=1e-10)


class TestPosteriorMean:
    def test_exact_interpolation_limit(self):
        """As sigma2 -> 0 the posterior mean passes through the data."""
        rng = np.random.default_rng(42)
        s = make_subject(rng, l=6)
        p = LongitudinalParams(beta0=5.0, kappa2=0.8, sigma2=1e-10, rho2=0.1)
        cache = build_cache(s.times, p.rho2)
        for j in range(s.n_obs):
            got = posterior_mean_at(s, p, cache, float(s.times[j]))
            np.testing.assert_allclose(got, s.values[j], atol=1e-4)

    def test_reverts_to_intercept_far_away(self):
        rng = np.random.default_rng(1)
        s = make_subject(rng, l=5)
        p = random_params(rng)
        cache = build_cache(s.times, p.rho2)
        np.testing.assert_allclose(
            posterior_mean_at(s, p, cache, 1e4), p.beta0, atol=1e-12
        )

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            s = make_subject(rng)
            p = random_params(rng)
            cache = build_cache(s.times, p.rho2)
            cov = sq_exp_kernel(s.times, p.rho2, p.kappa2) + p.sigma2 * np.eye(s.n_obs)
            t_star = rng.uniform(-2.0, 13.0, size=5)
            dt = t_star[:, None] - s.times[None, :]
            k_star = p.kappa2 * np.exp(-p.rho2 * dt * dt)
            expected = p.beta0 + k_star @ np.linalg.solve(cov, s.values - p.beta0)
            got = posterior_mean_at(s, p, cache, t_star)
            np.testing.assert_allclose(got, expected, rtol=1e-8, atol=1e-8)


class TestPosteriorVar:
    def test_far_from_data_equals_kappa2(self):
        rng = np.random.default_rng(2)
        s = make_subject(rng, l=4)
        p = random_params(rng)
        cache = build_cache(s.times, p.rho2)
        np.testing.assert_allclose(
            posterior_var_at(s, p, cache, 1e4), p.kappa2, rtol=1e-10
        )

    def test_zero_at_observation_when_noiseless(self):
        s = SubjectRecord("a", np.array([2.0]), np.array([4.0]), y=1.0, delta=1)
        p = LongitudinalParams(beta0=5.0, kappa2=0.5, sigma2=1e-12, rho2=0.1)
        cache = build_cache(s.times, p.rho2)
        assert posterior_var_at(s, p, cache, 2.0) == 0.0

    def test_bounds_and_dense_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            s = make_subject(rng)
            p = random_params(rng)
            cache = build_cache(s.times, p.rho2)
            cov = sq_exp_kernel(s.times, p.rho2, p.kappa2) + p.sigma2 * np.eye(s.n_obs)
            t_star = rng.uniform(-2.0, 13.0, size=6)
            dt = t_star[:, None] - s.times[None, :]
            k_star = p.kappa2 * np.exp(-p.rho2 * dt * dt)
            expected = p.kappa2 - np.sum(
                k_star * np.linalg.solve(cov, k_star.T).T, axis=1
            )
            got = posterior_var_at(s, p, cache, t_star)
            np.testing.assert_allclose(got, expected, rtol=1e-8, atol=1e-8)
            assert np.all(got >= 0.0)
            assert np.all(got <= p.kappa2 + 1e-12)


class TestPosteriorDeriv:
    def test_zero_at_single_observation(self):
        s = SubjectRecord("a", np.array([2.0]), np.array([4.0]), y=1.0, delta=1)
        p = LongitudinalParams(beta0=5.0, kappa2=0.5, sigma2=0.1, rho2=0.1)
        cache = build_cache(s.times, p.rho2)
        assert posterior_deriv_at(s, p, cache, 2.0) == 0.0

    def test_zero_for_constant_data(self):
        times = np.linspace(0.0, 10.0, 8)
        s = SubjectRecord("a", times, np.full(8, 3.3), y=1.0, delta=1)
        p = LongitudinalParams(beta0=3.3, kappa2=0.5, sigma2=0.1, rho2=0.1)
        cache = build_cache(times, p.rho2)
        t_star = np.linspace(-1.0, 12.0, 9)
        np.testing.assert_allclose(
            posterior_deriv_at(s, p, cache, t_star), 0.0, atol=1e-14
        )

    def test_matches_finite_difference_of_mean(self):
        rng = np.random.default_rng(17)
        h = 1e-4
        for _ in range(5):
            s = make_subject(rng)
            p = random_params(rng)
            cache = build_cache(s.times, p.rho2)
            for t in rng.uniform(0.0, 11.0, size=20):
                fd = (
                    posterior_mean_at(s, p, cache, t + h)
                    - posterior_mean_at(s, p, cache, t - h)
                ) / (2 * h)
                an = posterior_deriv_at(s, p, cache, float(t))
                np.testing.assert_allclose(an, fd, rtol=1e-4, atol=1e-7)


class TestDerivAuc:
    def test_pointwise_is_derivative_at_tau1(self):
        rng = np.random.default_rng(23)
        s = make_subject(rng)
        p = random_params(rng)
        cache = build_cache(s.times, p.rho2)
        np.testing.assert_allclose(
            deriv_auc(s, p, cache, 0.0, 4.2, scheme="pointwise"),
            posterior_deriv_at(s, p, cache, 4.2),
            rtol=1e-14,
        )

    def test_uniform_matches_secant_of_mean(self):
        """Averaged derivative equals the mean-curve secant slope (FTC)."""
        rng = np.random.default_rng(29)
        for _ in range(5):
            s = make_subject(rng)
            p = random_params(rng)
            cache = build_cache(s.times, p.rho2)
            tau0, tau1 = 1.0, 8.5
            auc = deriv_auc(s, p, cache, tau0, tau1, scheme="uniform", n_quad=2000)
            secant = (
                posterior_mean_at(s, p, cache, tau1)
                - posterior_mean_at(s, p, cache, tau0)
            ) / (tau1 - tau0)
            np.testing.assert_allclose(auc, secant, atol=1e-4)

    def test_constant_data_zero_both_schemes(self):
        times = np.linspace(0.0, 10.0, 6)
        s = SubjectRecord("a", times, np.full(6, 2.0), y=1.0, delta=1)
        p = LongitudinalParams(beta0=2.0, kappa2=0.4, sigma2=0.2, rho2=0.1)
        cache = build_cache(times, p.rho2)
        assert deriv_auc(s, p, cache, 0.0, 5.0, "uniform") == 0.0
        assert deriv_auc(s, p, cache, 0.0, 5.0, "pointwise") == 0.0

    def test_bad_window(self):
        rng = np.random.default_rng(31)
        s = make_subject(rng)
        p = random_params(rng)
        cache = build_cache(s.times, p.rho2)
        with pytest.raises(DomainError):
            deriv_auc(s, p, cache, 5.0, 5.0, "uniform")
        with pytest.raises(DomainError):
            deriv_auc(s, p, cache, 0.0, 5.0, "simpson")


class TestPriors:
    def test_defaults_are_positive(self):
        pr = LongitudinalPriors()
        assert pr.var_beta0 > 0 and pr.var_logkappa2 > 0 and pr.var_logsigma2 > 0

    def test_invalid_variance_rejected(self):
        with pytest.raises(DomainError):
            LongitudinalPriors(var_beta0=0.0)
