"""Tests for the Hamiltonian Monte Carlo building blocks.

Oracles: leapfrog reversibility and energy-error scaling are exact
properties of the integrator; the 2-d standard normal sampling check
compares long-run moments against the known distribution; gradient
checks use analytically differentiable test functions.
"""

import math

import numpy as np
import pytest

from gpjoint.errors import ContractError, DomainError
from gpjoint.hmc import (
    DualAveraging,
    HmcConfig,
    find_initial_step,
    grad_check,
    hmc_step,
    leapfrog,
)


def std_normal_logpost(q):
    return -0.5 * float(q @ q)


def std_normal_grad(q):
    return -q


def correlated_logpost(q):
    # Precision [[2, -1], [-1, 2]].
    return -float(q[0] ** 2 - q[0] * q[1] + q[1] ** 2)


def correlated_grad(q):
    return np.array([-2.0 * q[0] + q[1], q[0] - 2.0 * q[1]])


class TestLeapfrog:
    def test_zero_steps_identity(self):
        """n_steps=0 returns the inputs unchanged."""
        rng = np.random.default_rng(0)
        q = rng.normal(size=3)
        p = rng.normal(size=3)
        q1, p1, diverged = leapfrog(q, p, std_normal_grad, 0.3, 0)
        assert not diverged
        np.testing.assert_allclose(q1, q, rtol=0, atol=0)
        np.testing.assert_allclose(p1, p, rtol=0, atol=0)

    def test_does_not_mutate_inputs(self):
        """The integrator works on copies of q and p."""
        rng = np.random.default_rng(1)
        q = rng.normal(size=4)
        p = rng.normal(size=4)
        q_orig, p_orig = q.copy(), p.copy()
        leapfrog(q, p, std_normal_grad, 0.2, 8)
        np.testing.assert_array_equal(q, q_orig)
        np.testing.assert_array_equal(p, p_orig)

    def test_reversibility(self):
        """Integrating forward then backward (negated momentum) returns
        to the start within 1e-10."""
        rng = np.random.default_rng(2)
        for _ in range(5):
            q0 = rng.normal(size=5)
            p0 = rng.normal(size=5)
            q1, p1, div1 = leapfrog(q0, p0, correlated_grad_5d, 0.05, 30)
            assert not div1
            q2, p2, div2 = leapfrog(q1, -p1, correlated_grad_5d, 0.05, 30)
            assert not div2
            np.testing.assert_allclose(q2, q0, atol=1e-10)
            np.testing.assert_allclose(-p2, p0, atol=1e-10)

    def test_energy_error_second_order(self):
        """Hamiltonian drift over a fixed time span scales like eps^2:
        halving eps shrinks |dH| by about 4."""
        rng = np.random.default_rng(3)
        q0 = rng.normal(size=2)
        p0 = rng.normal(size=2)

        def energy(q, p):
            return correlated_logpost(q) - 0.5 * float(p @ p)

        h0 = energy(q0, p0)
        errors = []
        for eps, n in [(0.2, 10), (0.1, 20), (0.05, 40)]:
            q1, p1, diverged = leapfrog(q0, p0, correlated_grad, eps, n)
            assert not diverged
            errors.append(abs(energy(q1, p1) - h0))
        ratio1 = errors[0] / errors[1]
        ratio2 = errors[1] / errors[2]
        assert 3.0 < ratio1 < 5.0
        assert 3.0 < ratio2 < 5.0

    def test_divergence_flag_on_nonfinite(self):
        """A gradient that blows up flags divergence instead of
        propagating NaN."""

        def bad_grad(q):
            return np.full_like(q, np.nan)

        q = np.ones(2)
        p = np.ones(2)
        _, _, diverged = leapfrog(q, p, bad_grad, 0.1, 5)
        assert diverged


def correlated_grad_5d(q):
    a = np.eye(5) * 2.0
    a[0, 1] = a[1, 0] = -0.5
    return -a @ q


class TestHmcStep:
    def test_tiny_step_accepts(self):
        """As eps -> 0 the energy is conserved, so the proposal is
        accepted with probability close to 1."""
        rng = np.random.default_rng(4)
        q = np.array([0.3, -0.2])
        n_accept = 0
        for _ in range(50):
            q, accepted, _, prob = hmc_step(
                q, std_normal_logpost, std_normal_grad, 1e-4, 1, rng
            )
            n_accept += accepted
            assert prob > 0.999
        assert n_accept == 50

    def test_divergent_proposal_rejected(self):
        """A huge step size on a steep target diverges and the state is
        kept unchanged."""

        def steep_logpost(q):
            with np.errstate(over="ignore"):
                return float(-(q @ q) ** 4)

        def steep_grad(q):
            with np.errstate(over="ignore", invalid="ignore"):
                return -8.0 * (q @ q) ** 3 * q

        rng = np.random.default_rng(5)
        q0 = np.array([3.0, 3.0])
        q1, accepted, lp, prob = hmc_step(
            q0, steep_logpost, steep_grad, 50.0, 10, rng
        )
        assert not accepted
        np.testing.assert_array_equal(q1, q0)
        assert prob == 0.0

    def test_standard_normal_moments(self):
        """20k iterations on a 2-d standard normal recover mean within
        0.05 and variance within 0.1 per coordinate."""
        rng = np.random.default_rng(6)
        q = np.zeros(2)
        lp = std_normal_logpost(q)
        draws = np.empty((20_000, 2))
        for i in range(20_000):
            q, _, lp, _ = hmc_step(
                q, std_normal_logpost, std_normal_grad, 0.5, 8, rng, current_logpost=lp
            )
            draws[i] = q
        mean = draws.mean(axis=0)
        var = draws.var(axis=0, ddof=1)
        np.testing.assert_allclose(mean, 0.0, atol=0.05)
        np.testing.assert_allclose(var, 1.0, atol=0.1)

    def test_correlated_target_covariance(self):
        """Long chain on precision [[2,-1],[-1,2]] recovers the implied
        covariance [[2/3,1/3],[1/3,2/3]]."""
        rng = np.random.default_rng(7)
        q = np.zeros(2)
        lp = correlated_logpost(q)
        draws = np.empty((30_000, 2))
        for i in range(30_000):
            q, _, lp, _ = hmc_step(
                q, correlated_logpost, correlated_grad, 0.4, 10, rng, current_logpost=lp
            )
            draws[i] = q
        cov = np.cov(draws.T)
        expected = np.array([[2.0, 1.0], [1.0, 2.0]]) / 3.0
        np.testing.assert_allclose(cov, expected, atol=0.06)

    def test_nonfinite_current_logpost_rejected(self):
        """Starting from an invalid state raises instead of sampling."""
        rng = np.random.default_rng(8)
        with pytest.raises(ContractError):
            hmc_step(
                np.zeros(2),
                lambda q: float("nan"),
                std_normal_grad,
                0.1,
                5,
                rng,
            )


class TestDualAveraging:
    def test_low_acceptance_shrinks_step(self):
        """Feeding acceptance probabilities of 0 drives the step size
        down; feeding 1 drives it up."""
        da = DualAveraging(0.5, target_accept=0.8)
        for _ in range(100):
            da.update(0.0)
        assert da.adapted_step_size < 0.5
        da = DualAveraging(0.5, target_accept=0.8)
        for _ in range(100):
            da.update(1.0)
        assert da.adapted_step_size > 0.5

    def test_converges_to_target_on_std_normal(self):
        """Adapting during 2000 burn-in iterations then freezing yields
        an empirical acceptance rate near the 0.8 target."""
        rng = np.random.default_rng(9)
        q = np.zeros(2)
        lp = std_normal_logpost(q)
        eps = 1.0
        da = DualAveraging(eps, target_accept=0.8)
        for _ in range(2000):
            q, _, lp, prob = hmc_step(
                q, std_normal_logpost, std_normal_grad, eps, 8, rng, current_logpost=lp
            )
            eps = da.update(prob)
        eps = da.adapted_step_size
        accepts = []
        for _ in range(4000):
            q, _, lp, prob = hmc_step(
                q, std_normal_logpost, std_normal_grad, eps, 8, rng, current_logpost=lp
            )
            accepts.append(prob)
        assert abs(np.mean(accepts) - 0.8) < 0.08

    def test_rejects_bad_eps0(self):
        with pytest.raises(DomainError):
            DualAveraging(0.0)


class TestFindInitialStep:
    def test_reasonable_range_on_std_normal(self):
        """The bracketing heuristic lands within a sane order of
        magnitude for a unit-scale target."""
        rng = np.random.default_rng(10)
        eps = find_initial_step(
            np.zeros(3), std_normal_logpost, std_normal_grad, rng
        )
        assert 0.05 < eps < 5.0

    def test_narrow_target_gets_small_step(self):
        """A tightly concentrated target (scale 0.01) produces a much
        smaller initial step than a unit-scale one."""

        def narrow_logpost(q):
            return -0.5 * float(q @ q) / 1e-4

        def narrow_grad(q):
            return -q / 1e-4

        rng = np.random.default_rng(11)
        eps = find_initial_step(np.zeros(2), narrow_logpost, narrow_grad, rng)
        assert eps < 0.05


class TestGradCheck:
    def test_quadratic_exact(self):
        """Central differences on a quadratic with matching analytic
        gradient agree to 1e-8."""
        a = np.array([[3.0, 0.5], [0.5, 2.0]])

        def lp(q):
            return -0.5 * float(q @ a @ q)

        def grad(q):
            return -a @ q

        rng = np.random.default_rng(12)
        worst, _ = grad_check(lp, grad, rng.normal(size=2), h=1e-5)
        assert worst < 1e-8

    def test_detects_wrong_gradient(self):
        """A deliberately corrupted coordinate is flagged with a large
        relative error and the right index."""

        def lp(q):
            return -0.5 * float(q @ q)

        def bad_grad(q):
            g = -q
            g[1] += 0.5
            return g

        worst, idx = grad_check(lp, bad_grad, np.array([0.3, 0.7, -0.4]), h=1e-5)
        assert worst > 0.1
        assert idx == 1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            grad_check(
                lambda q: 0.0, lambda q: np.zeros(2), np.zeros(3), h=1e-5
            )

    def test_bad_h_rejected(self):
        with pytest.raises(DomainError):
            grad_check(lambda q: 0.0, lambda q: np.zeros(2), np.zeros(2), h=0.0)


class TestHmcConfig:
    def test_defaults_valid(self):
        cfg = HmcConfig()
        assert cfg.n_leapfrog == 20
        assert cfg.target_accept == 0.8

    def test_rejects_bad_burn_in(self):
        with pytest.raises(DomainError):
            HmcConfig(total_iters=100, burn_in=100)

    def test_rejects_bad_target(self):
        with pytest.raises(DomainError):
            HmcConfig(target_accept=1.0)
