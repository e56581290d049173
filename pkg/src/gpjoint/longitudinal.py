"""Marginal GP likelihood for one biomarker series and its predictives.

The latent process is integrated out analytically, so each subject
contributes a multivariate-normal likelihood with covariance
``kappa2 * K + sigma2 * I`` evaluated through the kernel cache.  The
posterior trajectory (mean, variance, derivative, and averaged
derivative) conditions on the subject's own observations and is what
links the biomarker to the hazard in the joint models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SubjectRecord
from .errors import DomainError, NumericError
from .kernel import KernelCache, marg_logdet, marg_quadform

LOG_2PI = math.log(2.0 * math.pi)

# Predictive variances may come out a hair negative from cancellation.
VAR_CLAMP = 1e-12
VAR_FLOOR = -1e-8


@dataclass(frozen=True)
class LongitudinalParams:
    """Parameters of one subject's marginal series distribution.

    beta0 is the subject's long-run biomarker level, kappa2 the
    subject's volatility (variance of the latent process), sigma2 the
    shared measurement-error variance, rho2 the fixed correlation decay.
    """

    beta0: float
    kappa2: float
    sigma2: float
    rho2: float

    def __post_init__(self):
        if not (np.isfinite(self.kappa2) and self.kappa2 >= 0):
            raise DomainError(f"kappa2 must be >= 0, got {self.kappa2}")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise DomainError(f"sigma2 must be > 0, got {self.sigma2}")
        if not (np.isfinite(self.rho2) and self.rho2 > 0):
            raise DomainError(f"rho2 must be > 0, got {self.rho2}")


@dataclass(frozen=True)
class LongitudinalPriors:
    """Hyperparameters: Normal on the intercept, log-Normal on variances."""

    mu_beta0: float = 5.0
    var_beta0: float = 4.0
    mu_logkappa2: float = -1.0
    var_logkappa2: float = 2.0
    mu_logsigma2: float = -1.0
    var_logsigma2: float = 1.0

    def __post_init__(self):
        for name in ("var_beta0", "var_logkappa2", "var_logsigma2"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be > 0")


def practical_range(rho2: float) -> float:
    """Lag (months) at which kernel correlation drops to 0.05: sqrt(3/rho2)."""
    if not (np.isfinite(rho2) and rho2 > 0):
        raise DomainError(f"rho2 must be > 0, got {rho2}")
    return math.sqrt(3.0 / rho2)


def long_loglik(
    subject: SubjectRecord, params: LongitudinalParams, cache: KernelCache
) -> float:
    """Log marginal density of the subject's series.

    Equals -(l/2) log 2pi - 0.5 logdet - 0.5 quadform of the residual
    around the subject intercept, all through the spectral cache.
    """
    resid = subject.values - params.beta0
    l = subject.n_obs
    return (
        -0.5 * l * LOG_2PI
        - 0.5 * marg_logdet(cache, params.kappa2, params.sigma2)
        - 0.5 * marg_quadform(cache, resid, params.kappa2, params.sigma2)
    )


def _weighted_residual(
    subject: SubjectRecord, params: LongitudinalParams, cache: KernelCache
) -> np.ndarray:
    """(kappa2 K + sigma2 I)^{-1} (X - beta0 1), in the original basis."""
    resid = subject.values - params.beta0
    d = params.kappa2 * cache.eigenvalues + params.sigma2
    u = cache.eigenvectors.T @ resid
    return cache.eigenvectors @ (u / d)


def _cross_cov(
    t_star: np.ndarray, times: np.ndarray, params: LongitudinalParams
) -> np.ndarray:
    """kappa2 * exp(-rho2 (t* - t_j)^2), shape (n_star, l)."""
    dt = t_star[:, None] - times[None, :]
    return params.kappa2 * np.exp(-params.rho2 * dt * dt)


def posterior_mean_at(
    subject: SubjectRecord,
    params: LongitudinalParams,
    cache: KernelCache,
    t_star,
):
    """Posterior mean of the biomarker trajectory at t_star.

    Reverts to beta0 far from all observations; interpolates the data as
    sigma2 -> 0.  Accepts a scalar or an array of times.
    """
    t = np.atleast_1d(np.asarray(t_star, dtype=float))
    alpha = _weighted_residual(subject, params, cache)
    out = params.beta0 + _cross_cov(t, subject.times, params) @ alpha
    return float(out[0]) if np.isscalar(t_star) else out


def posterior_var_at(
    subject: SubjectRecord,
    params: LongitudinalParams,
    cache: KernelCache,
    t_star,
):
    """Posterior variance of the trajectory at t_star, clamped at zero."""
    t = np.atleast_1d(np.asarray(t_star, dtype=float))
    k_star = _cross_cov(t, subject.times, params)
    d = params.kappa2 * cache.eigenvalues + params.sigma2
    proj = k_star @ cache.eigenvectors
    var = params.kappa2 - np.sum(proj * proj / d, axis=1)
    if np.min(var) < VAR_FLOOR:
        raise NumericError(
            f"predicted variance {np.min(var):.3e} below floor {VAR_FLOOR:.0e}"
        )
    var = np.where(var < VAR_CLAMP, 0.0, var)
    return float(var[0]) if np.isscalar(t_star) else var


def posterior_deriv_at(
    subject: SubjectRecord,
    params: LongitudinalParams,
    cache: KernelCache,
    t_star,
):
    """Posterior mean of the trajectory's time derivative at t_star.

    Differentiates the cross covariance:
    -2 rho2 sum_j (t* - t_j) k(t*, t_j) [(kappa2 K + sigma2 I)^{-1} r]_j.
    """
    t = np.atleast_1d(np.asarray(t_star, dtype=float))
    alpha = _weighted_residual(subject, params, cache)
    dt = t[:, None] - subject.times[None, :]
    k_star = params.kappa2 * np.exp(-params.rho2 * dt * dt)
    out = (-2.0 * params.rho2) * ((dt * k_star) @ alpha)
    return float(out[0]) if np.isscalar(t_star) else out


def deriv_auc(
    subject: SubjectRecord,
    params: LongitudinalParams,
    cache: KernelCache,
    tau0: float,
    tau1: float,
    scheme: str = "uniform",
    n_quad: int = 200,
) -> float:
    """Weighted average of the derivative trajectory over [tau0, tau1].

    uniform: midpoint quadrature of the derivative, normalized by the
    window width (an average rate of change).  pointwise: the derivative
    at tau1 itself.
    """
    if scheme == "pointwise":
        return float(posterior_deriv_at(subject, params, cache, float(tau1)))
    if scheme != "uniform":
        raise DomainError(f"unknown AUC scheme {scheme!r}")
    if not tau0 < tau1:
        raise DomainError(f"need tau0 < tau1 for uniform scheme, got [{tau0}, {tau1}]")
    if n_quad < 1:
        raise DomainError(f"n_quad must be >= 1, got {n_quad}")
    width = tau1 - tau0
    nodes = tau0 + width * (np.arange(n_quad) + 0.5) / n_quad
    vals = posterior_deriv_at(subject, params, cache, nodes)
    return float(np.mean(vals))
