"""Batched log-posterior and gradient engines for the joint models.

Each posterior class flattens every sampled quantity into one vector so
the Hamiltonian sampler can treat it as a single continuous block:

    [beta0_long (n) | log_kappa2 (n) | beta0_surv (n) |
     log_sigma2 | log_tau | zeta_surv (p_s) | zeta_long (p_l)]

Per-subject kernel eigendecompositions are computed once at
construction and padded into rectangular tensors, so a posterior or
gradient evaluation is a handful of vectorized contractions with no
per-subject Python loop.  Positivity parameters are sampled on the log
scale; their log-Normal priors become Normal densities there, with the
Jacobian absorbed exactly.

The frailty intercepts' prior means (the Dirichlet-process cluster
means) are injected between iterations via ``set_frailty_means``; the
gradient treats the cluster structure as fixed, which is the standard
Gibbs-within-HMC factorization.
"""

from __future__ import annotations

import math

import numpy as np

from .cox import cox_fit
from .data import Dataset, validate_dataset
from .errors import ContractError
from .kernel import build_cache
from .longitudinal import LOG_2PI

_EXP_STATE = {"over": "ignore", "invalid": "ignore", "divide": "ignore"}


def _normal_logpdf_sum(x, mean, var) -> float:
    """Sum of independent Normal log densities with common variance."""
    x = np.asarray(x, dtype=float)
    dev = x - mean
    return -0.5 * float(np.sum(dev * dev)) / var - 0.5 * x.size * (
        LOG_2PI + math.log(var)
    )


class _LongitudinalPack:
    """Padded spectral tensors for all subjects' series."""

    def __init__(self, data: Dataset, rho2: float):
        n = data.n_subjects
        counts = np.array([s.n_obs for s in data.subjects])
        width = int(counts.max())
        self.counts = counts.astype(float)
        self.n_obs_total = int(counts.sum())
        self.width = width
        self.eigvals = np.zeros((n, width))
        self.eigvecs = np.zeros((n, width, width))
        self.qx = np.zeros((n, width))
        self.qone = np.zeros((n, width))
        self.mask = np.zeros((n, width))
        self.times = np.zeros((n, width))
        self.values = np.zeros((n, width))
        for i, subject in enumerate(data.subjects):
            cache = build_cache(subject.times, rho2, subject_id=subject.subject_id)
            l = subject.n_obs
            self.eigvals[i, :l] = cache.eigenvalues
            self.eigvecs[i, :l, :l] = cache.eigenvectors
            self.qx[i, :l] = cache.eigenvectors.T @ subject.values
            self.qone[i, :l] = cache.eigenvectors.T @ np.ones(l)
            self.mask[i, :l] = 1.0
            self.times[i, :l] = subject.times
            self.values[i, :l] = subject.values


class _SurvivalPack:
    """Event data plus the fixed midpoint grid for the hazard integral."""

    def __init__(self, data: Dataset, m: int):
        self.m = m
        self.y = np.array([s.y for s in data.subjects])
        self.delta = np.array([float(s.delta) for s in data.subjects])
        self.log_y = np.log(self.y)
        self.width = self.y / m
        mid_frac = (np.arange(m) + 0.5) / m
        self.t_mid = self.y[:, None] * mid_frac[None, :]
        self.log_t_mid = np.log(self.t_mid)
        # Hazard evaluation grid: the m midpoints then the event time.
        self.t_eval = np.concatenate([self.t_mid, self.y[:, None]], axis=1)


def _weibull_common_mle(y: np.ndarray, delta: np.ndarray) -> tuple[float, float]:
    """Common-intercept Weibull fit used to seed the chain.

    Profiles the intercept (exp(b0) = events / sum(y^tau)) and solves
    the one-dimensional shape score by bisection.  With no events the
    shape is left at 1 and the intercept set from total exposure.
    """
    n_events = float(np.sum(delta))
    if n_events == 0:
        return -float(np.log(np.sum(y))), 0.0
    log_y = np.log(y)
    d_log_y = float(np.sum(delta * log_y))

    def score(tau: float) -> float:
        yt = np.power(y, tau)
        return (
            n_events / tau
            + d_log_y
            - n_events * float(np.sum(yt * log_y)) / float(np.sum(yt))
        )

    lo, hi = 0.05, 20.0
    if score(lo) <= 0.0:
        tau = lo
    elif score(hi) >= 0.0:
        tau = hi
    else:
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if score(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        tau = 0.5 * (lo + hi)
    b0 = float(np.log(n_events / np.sum(np.power(y, tau))))
    return b0, float(np.log(tau))


def _weibull_intercept_modes(
    delta: np.ndarray,
    exposures: np.ndarray,
    level: float,
    within_var: float,
) -> np.ndarray:
    """Per-subject conditional modes of the survival intercepts.

    exposures[i] is the subject's cumulative hazard divided by
    exp(intercept), so the conditional log density of intercept b is
    delta*b - exp(b)*exposure plus a Gaussian prior centered at the
    common level.  That density is concave; Newton from the common
    level converges in a few steps and gives a dispersed,
    self-consistent starting pattern.
    """
    b = np.full(delta.shape, level)
    for _ in range(50):
        eb_s = np.exp(b) * exposures
        grad = delta - eb_s - (b - level) / within_var
        step = grad / (eb_s + 1.0 / within_var)
        b += step
        if float(np.max(np.abs(step))) < 1e-12:
            break
    return b


def _moment_variance_split(
    pack: _LongitudinalPack,
    rho2: float,
    kappa2_fallback: float,
    sigma2_fallback: float,
) -> tuple[np.ndarray, float]:
    """Crude per-subject signal and shared noise variance estimates.

    A subject's sample variance estimates kappa2 + sigma2 while half
    the mean squared successive difference estimates
    sigma2 + (1 - kbar) kappa2, with kbar the mean adjacent-pair
    correlation under the kernel.  Solving the two moment equations
    gives a dispersed, data-driven start for the volatility block; the
    per-subject noise estimates are pooled by median.  Subjects too
    short for the split fall back to the supplied values.
    """
    counts = pack.counts
    mask = pack.mask
    values = pack.values
    with np.errstate(invalid="ignore", divide="ignore"):
        means = values.sum(axis=1) / counts
        dev = (values - means[:, None]) * mask
        s2 = (dev * dev).sum(axis=1) / np.maximum(counts - 1.0, 1.0)
        pair = mask[:, 1:] * mask[:, :-1]
        n_pair = pair.sum(axis=1)
        dx = (values[:, 1:] - values[:, :-1]) * pair
        dt = pack.times[:, 1:] - pack.times[:, :-1]
        msd = 0.5 * (dx * dx).sum(axis=1) / np.maximum(n_pair, 1.0)
        kbar = (np.exp(-rho2 * dt * dt) * pair).sum(axis=1) / np.maximum(
            n_pair, 1.0
        )
    usable = (counts >= 3) & (n_pair >= 1.0)
    with np.errstate(invalid="ignore"):
        raw = (s2 - msd) / np.maximum(kbar, 0.1)
    kappa2 = np.where(usable & np.isfinite(raw), raw, kappa2_fallback)
    kappa2 = np.clip(kappa2, 1e-4, 100.0)
    noise = np.where(usable, msd - (1.0 - kbar) * kappa2, np.nan)
    noise = noise[np.isfinite(noise)]
    sigma2 = float(np.median(noise)) if noise.size else sigma2_fallback
    sigma2 = float(np.clip(sigma2, 1e-6, 100.0))
    return kappa2, sigma2


def _proportional_hazards_seed(
    y: np.ndarray, delta: np.ndarray, design: np.ndarray
) -> np.ndarray:
    """Partial-likelihood coefficients used to start the hazard block.

    Starting the coefficients at a cheap consistent estimate puts the
    chain on the coefficient ridge instead of at zero, which at short
    run lengths would otherwise bias windowed means toward zero.  A
    degenerate or non-converged fit falls back to zeros, and the clip
    keeps a near-separated fit from producing a wild start.
    """
    fit = cox_fit(y, delta, design)
    coef = np.where(np.isfinite(fit.coef), fit.coef, 0.0)
    if not fit.converged:
        coef = np.zeros_like(coef)
    return np.clip(coef, -3.0, 3.0)


def _baseline_matrix(data: Dataset, names) -> tuple[np.ndarray, tuple[str, ...]]:
    """Column-subset the baseline covariates by name."""
    available = list(data.covariate_names)
    if names is None:
        picked = available
    else:
        missing = [c for c in names if c not in available]
        if missing:
            raise ContractError(
                f"baseline covariates {missing} not in data columns {available}"
            )
        picked = list(names)
    cols = [available.index(c) for c in picked]
    z = np.array([[s.z_baseline[j] for j in cols] for s in data.subjects])
    z = z.reshape(data.n_subjects, len(cols))
    return z, tuple(picked)


def _value_basis(pack: _LongitudinalPack, t_eval: np.ndarray, rho2: float) -> np.ndarray:
    """Cross-correlation basis exp(-rho2 (t_eval - t_obs)^2), padded."""
    n, width = pack.mask.shape
    out = np.zeros((n, t_eval.shape[1], width))
    for i in range(n):
        l = int(pack.counts[i])
        dt = t_eval[i][:, None] - pack.times[i, :l][None, :]
        out[i, :, :l] = np.exp(-rho2 * dt * dt)
    return out


def _slope_basis(
    pack: _LongitudinalPack,
    t_eval: np.ndarray,
    rho2: float,
    scheme: str,
    offset: float | None,
    n_quad: int,
) -> np.ndarray:
    """Derivative-average basis for the rate-of-change covariate.

    uniform: per evaluation time t, the mean over n_quad midpoint nodes
    of the derivative basis -2 rho2 (s - t_j) exp(-rho2 (s - t_j)^2),
    over the window [max(0, t - offset), t] (whole history when offset
    is None).  pointwise: the derivative basis at t itself.
    """
    n, width = pack.mask.shape
    n_eval = t_eval.shape[1]
    out = np.zeros((n, n_eval, width))
    for i in range(n):
        l = int(pack.counts[i])
        obs = pack.times[i, :l]
        t = t_eval[i]
        if scheme == "pointwise":
            dt = t[:, None] - obs[None, :]
            out[i, :, :l] = -2.0 * rho2 * dt * np.exp(-rho2 * dt * dt)
            continue
        lo = np.zeros(n_eval) if offset is None else np.maximum(0.0, t - offset)
        span = t - lo
        frac = (np.arange(n_quad) + 0.5) / n_quad
        nodes = lo[:, None] + span[:, None] * frac[None, :]
        dt = nodes[:, :, None] - obs[None, None, :]
        basis = -2.0 * rho2 * dt * np.exp(-rho2 * dt * dt)
        out[i, :, :l] = basis.mean(axis=1)
    return out


class JointPosterior:
    """Joint longitudinal-survival posterior with a GP trajectory.

    Supports the three hazard links: the trajectory value at each time
    (one coefficient), value plus average rate of change (two), and the
    subject-level intercept plus volatility (two, constant hazard scale
    per subject so the cumulative hazard is closed form).
    """

    has_frailty = True

    def __init__(self, data: Dataset, spec):
        validate_dataset(data)
        self.spec = spec
        self.variant = spec.variant
        n = data.n_subjects
        self.n_subjects = n
        self.subject_ids = data.subject_ids()
        self.long = _LongitudinalPack(data, spec.rho2)
        self.surv = _SurvivalPack(data, spec.m_midpoints)
        self.z, self.baseline_names = _baseline_matrix(data, spec.baseline_covariates)
        self.long_names = spec.long_covariate_names
        self.p_surv = self.z.shape[1]
        self.p_long = len(self.long_names)
        if self.variant in ("I", "II"):
            self.value_basis = _value_basis(self.long, self.surv.t_eval, spec.rho2)
        if self.variant == "II":
            self.slope_basis = _slope_basis(
                self.long,
                self.surv.t_eval,
                spec.rho2,
                spec.auc_scheme,
                spec.auc_offset,
                spec.n_quad,
            )
        self.frailty_prior_means = np.zeros(n)
        self._const_long = -0.5 * self.long.n_obs_total * LOG_2PI
        # Hazard covariates are centered at prior-derived constants, a
        # reparametrization absorbed by the frailty intercepts that
        # removes the coefficient-intercept ridge from the posterior.
        self.center_value = spec.priors.intercept_long_mean
        self.center_volatility = float(np.exp(spec.priors.log_kappa2_mean))
        self._build_layout()

    def _build_layout(self) -> None:
        ids = self.subject_ids
        names = (
            [f"beta0_long[{s}]" for s in ids]
            + [f"log_kappa2[{s}]" for s in ids]
            + [f"beta0_surv[{s}]" for s in ids]
            + ["log_sigma2", "log_tau"]
            + [f"zeta_surv_{c}" for c in self.baseline_names]
            + [f"zeta_long_{c}" for c in self.long_names]
        )
        self.names = tuple(names)
        self.dim = len(names)
        n = self.n_subjects
        self.beta0_long_slice = slice(0, n)
        self.log_kappa2_slice = slice(n, 2 * n)
        self.beta0_surv_slice = slice(2 * n, 3 * n)
        self.idx_log_sigma2 = 3 * n
        self.idx_log_tau = 3 * n + 1
        self.zeta_surv_slice = slice(3 * n + 2, 3 * n + 2 + self.p_surv)
        self.zeta_long_slice = slice(3 * n + 2 + self.p_surv, self.dim)

    def set_frailty_means(self, means: np.ndarray) -> None:
        means = np.asarray(means, dtype=float)
        if means.shape != (self.n_subjects,):
            raise ContractError(
                f"expected {self.n_subjects} frailty means, got shape {means.shape}"
            )
        self.frailty_prior_means = means

    def _seed_design(self, means, kappa2_hat, alpha0):
        """Hazard covariates at the starting state, for the seed fit.

        Variant III uses the static centered summaries.  Variants I and
        II return a callable evaluating the smoothed trajectory (and its
        average or pointwise rate of change) at any requested time, so
        the partial-likelihood seed sees the same covariates the model
        itself would use at the starting state.
        """
        if self.variant == "III":
            return np.column_stack(
                [
                    self.z,
                    means - self.center_value,
                    kappa2_hat - self.center_volatility,
                ]
            )
        rho2 = self.spec.rho2
        times = self.long.times
        mask = self.long.mask
        scheme = self.spec.auc_scheme
        window = self.spec.auc_offset

        def value_at(t: float) -> np.ndarray:
            dt = t - times
            k = np.exp(-rho2 * dt * dt) * mask
            return means + kappa2_hat * np.sum(k * alpha0, axis=1)

        def slope_at(t: float) -> np.ndarray:
            dt = t - times
            k = np.exp(-rho2 * dt * dt) * mask
            return -2.0 * rho2 * kappa2_hat * np.sum(dt * k * alpha0, axis=1)

        def design(t: float) -> np.ndarray:
            cols = [self.z, value_at(t)]
            if self.variant == "II":
                if scheme == "pointwise":
                    cols.append(slope_at(t))
                else:
                    lo = 0.0 if window is None else max(0.0, t - window)
                    if t - lo > 1e-9:
                        cols.append((value_at(t) - value_at(lo)) / (t - lo))
                    else:
                        cols.append(slope_at(t))
            return np.column_stack(cols)

        return design

    def initial_state(self) -> np.ndarray:
        theta = np.zeros(self.dim)
        with np.errstate(invalid="ignore"):
            means = self.long.values.sum(axis=1) / self.long.counts
        theta[self.beta0_long_slice] = means
        p = self.spec.priors
        kappa2_hat, sigma2_hat = _moment_variance_split(
            self.long,
            self.spec.rho2,
            math.exp(p.log_kappa2_mean),
            math.exp(p.log_sigma2_mean),
        )
        theta[self.log_kappa2_slice] = np.log(kappa2_hat)
        theta[self.idx_log_sigma2] = math.log(sigma2_hat)
        lk2 = theta[self.log_kappa2_slice]
        ls2 = theta[self.idx_log_sigma2]
        _, _, u0, d0, _ = self._longitudinal_core(means, lk2, ls2)
        alpha0 = np.einsum("nkl,nl->nk", self.long.eigvecs, u0 / d0)
        design = self._seed_design(means, kappa2_hat, alpha0)
        coef = _proportional_hazards_seed(self.surv.y, self.surv.delta, design)
        theta[self.zeta_surv_slice] = coef[: self.p_surv]
        theta[self.zeta_long_slice] = coef[self.p_surv :]
        _, log_tau = _weibull_common_mle(self.surv.y, self.surv.delta)
        theta[self.idx_log_tau] = log_tau
        tau = math.exp(log_tau)
        with np.errstate(**_EXP_STATE):
            lam0, _, _ = self._linear_predictor_eval(
                means,
                kappa2_hat,
                np.zeros(self.n_subjects),
                theta[self.zeta_surv_slice],
                theta[self.zeta_long_slice],
                u0,
                d0,
            )
            _, cum = self._survival_loglik(lam0, tau)
        exposures = cum if self.variant == "III" else cum.sum(axis=1)
        n_events = float(np.sum(self.surv.delta))
        if n_events > 0 and np.all(np.isfinite(exposures)):
            level = float(np.log(n_events / float(np.sum(exposures))))
        else:
            level, _ = _weibull_common_mle(self.surv.y, self.surv.delta)
            exposures = np.power(self.surv.y, tau)
        theta[self.beta0_surv_slice] = _weibull_intercept_modes(
            self.surv.delta, exposures, level, p.frailty_within_var
        )
        return theta

    def _split(self, theta: np.ndarray):
        return (
            theta[self.beta0_long_slice],
            theta[self.log_kappa2_slice],
            theta[self.beta0_surv_slice],
            theta[self.idx_log_sigma2],
            theta[self.idx_log_tau],
            theta[self.zeta_surv_slice],
            theta[self.zeta_long_slice],
        )

    def _longitudinal_core(self, b0l, lk2, ls2):
        """Shared spectral quantities: u, d, and the marginal loglik."""
        kappa2 = np.exp(lk2)
        sigma2 = np.exp(np.float64(ls2))
        u = self.long.qx - b0l[:, None] * self.long.qone
        d = kappa2[:, None] * self.long.eigvals + sigma2
        loglik = (
            self._const_long
            - 0.5 * float(np.sum(self.long.mask * np.log(d)))
            - 0.5 * float(np.sum(u * u / d))
        )
        return kappa2, sigma2, u, d, loglik

    def _linear_predictor_eval(self, b0l, kappa2, b0s, zs, zl, u, d):
        """lambda at the hazard grid plus the chain-rule intermediates.

        Returns (lam_eval, alpha, v) where lam_eval is (n, m+1) for the
        time-varying links or (n,) for the subject-summary link, alpha
        is the weighted-residual vector (time-varying links only), and v
        stacks the longitudinal covariate values for coefficient
        gradients.
        """
        base = b0s + self.z @ zs
        if self.variant == "III":
            lam = (
                base
                + zl[0] * (b0l - self.center_value)
                + zl[1] * (kappa2 - self.center_volatility)
            )
            return lam, None, None
        alpha = np.einsum("nkl,nl->nk", self.long.eigvecs, u / d)
        v1 = (
            b0l[:, None]
            - self.center_value
            + kappa2[:, None] * np.einsum("njk,nk->nj", self.value_basis, alpha)
        )
        if self.variant == "I":
            lam = base[:, None] + zl[0] * v1
            return lam, alpha, (v1,)
        v2 = kappa2[:, None] * np.einsum("njk,nk->nj", self.slope_basis, alpha)
        lam = base[:, None] + zl[0] * v1 + zl[1] * v2
        return lam, alpha, (v1, v2)

    def _survival_loglik(self, lam, tau):
        """Weibull log likelihood; closed-form or midpoint cumulative hazard."""
        s = self.surv
        if self.variant == "III":
            cum = np.exp(lam + tau * s.log_y)
            event = s.delta * (np.log(tau) + (tau - 1.0) * s.log_y + lam)
            return float(np.sum(event) - np.sum(cum)), cum
        omega = s.width[:, None] * tau * np.exp(
            (tau - 1.0) * s.log_t_mid + lam[:, : s.m]
        )
        event = s.delta * (np.log(tau) + (tau - 1.0) * s.log_y + lam[:, s.m])
        return float(np.sum(event) - np.sum(omega)), omega

    def _log_prior(self, b0l, lk2, b0s, ls2, lt, zs, zl) -> float:
        p = self.spec.priors
        total = _normal_logpdf_sum(b0l, p.intercept_long_mean, p.intercept_long_var)
        total += _normal_logpdf_sum(lk2, p.log_kappa2_mean, p.log_kappa2_var)
        total += _normal_logpdf_sum(
            b0s - self.frailty_prior_means, 0.0, p.frailty_within_var
        )
        total += _normal_logpdf_sum(ls2, p.log_sigma2_mean, p.log_sigma2_var)
        total += _normal_logpdf_sum(lt, p.log_tau_mean, p.log_tau_var)
        total += _normal_logpdf_sum(zs, 0.0, p.coef_var)
        total += _normal_logpdf_sum(zl, 0.0, p.coef_var)
        return total

    def logpost_parts(self, theta: np.ndarray) -> dict[str, float]:
        b0l, lk2, b0s, ls2, lt, zs, zl = self._split(theta)
        with np.errstate(**_EXP_STATE):
            kappa2, _, u, d, long_ll = self._longitudinal_core(b0l, lk2, ls2)
            lam, _, _ = self._linear_predictor_eval(b0l, kappa2, b0s, zs, zl, u, d)
            surv_ll, _ = self._survival_loglik(lam, np.exp(np.float64(lt)))
            prior = self._log_prior(b0l, lk2, b0s, ls2, lt, zs, zl)
        return {"longitudinal": long_ll, "survival": surv_ll, "prior": prior}

    def logpost(self, theta: np.ndarray) -> float:
        parts = self.logpost_parts(theta)
        return parts["longitudinal"] + parts["survival"] + parts["prior"]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        b0l, lk2, b0s, ls2, lt, zs, zl = self._split(theta)
        p = self.spec.priors
        s = self.surv
        g = np.zeros(self.dim)
        with np.errstate(**_EXP_STATE):
            kappa2, sigma2, u, d, _ = self._longitudinal_core(b0l, lk2, ls2)
            tau = np.exp(np.float64(lt))

            # Longitudinal block: everything flows through u and d.
            ud = u / d
            g_b0l = np.sum(self.long.qone * ud, axis=1)
            g_k2 = 0.5 * np.sum(
                ud * ud * self.long.eigvals - self.long.eigvals / d, axis=1
            )
            g_s2 = 0.5 * float(np.sum(ud * ud) - np.sum(self.long.mask / d))

            lam, alpha, v = self._linear_predictor_eval(
                b0l, kappa2, b0s, zs, zl, u, d
            )
            if self.variant == "III":
                cum = np.exp(lam + tau * s.log_y)
                w = s.delta - cum
                g[self.beta0_surv_slice] = w
                g[self.zeta_surv_slice] = self.z.T @ w
                g[self.zeta_long_slice] = np.array(
                    [
                        float(w @ (b0l - self.center_value)),
                        float(w @ (kappa2 - self.center_volatility)),
                    ]
                )
                g_b0l = g_b0l + zl[0] * w
                g_k2 = g_k2 + zl[1] * w
                g_tau = float(
                    np.sum(s.delta * (1.0 / tau + s.log_y))
                    - np.sum(cum * s.log_y)
                )
            else:
                omega = s.width[:, None] * tau * np.exp(
                    (tau - 1.0) * s.log_t_mid + lam[:, : s.m]
                )
                w_eval = np.concatenate([-omega, s.delta[:, None]], axis=1)
                w_sum = w_eval.sum(axis=1)
                g[self.beta0_surv_slice] = w_sum
                g[self.zeta_surv_slice] = self.z.T @ w_sum
                g_zl = [float(np.sum(w_eval * vk)) for vk in v]
                g[self.zeta_long_slice] = np.array(g_zl)
                # Hazard-weighted basis, then one projection into the
                # eigenbasis carries all three trajectory-parameter paths.
                h = zl[0] * np.einsum("nj,njk->nk", w_eval, self.value_basis)
                if self.variant == "II":
                    h = h + zl[1] * np.einsum("nj,njk->nk", w_eval, self.slope_basis)
                qh = np.einsum("nkl,nk->nl", self.long.eigvecs, h)
                g_b0l = g_b0l + zl[0] * w_sum - kappa2 * np.sum(
                    qh * self.long.qone / d, axis=1
                )
                g_k2 = g_k2 + np.sum(qh * ud, axis=1) - kappa2 * np.sum(
                    qh * self.long.eigvals * u / (d * d), axis=1
                )
                g_s2 = g_s2 - float(
                    np.sum(kappa2[:, None] * qh * u / (d * d))
                )
                g_tau = float(
                    np.sum(s.delta * (1.0 / tau + s.log_y))
                    - np.sum(omega * (1.0 / tau + s.log_t_mid))
                )

            # Priors, then the log-scale chain rule for positives.
            g_b0l = g_b0l - (b0l - p.intercept_long_mean) / p.intercept_long_var
            g[self.beta0_long_slice] = g_b0l
            g[self.log_kappa2_slice] = g_k2 * kappa2 - (
                lk2 - p.log_kappa2_mean
            ) / p.log_kappa2_var
            g[self.beta0_surv_slice] -= (
                b0s - self.frailty_prior_means
            ) / p.frailty_within_var
            g[self.idx_log_sigma2] = g_s2 * sigma2 - (
                ls2 - p.log_sigma2_mean
            ) / p.log_sigma2_var
            g[self.idx_log_tau] = g_tau * tau - (lt - p.log_tau_mean) / p.log_tau_var
            g[self.zeta_surv_slice] -= zs / p.coef_var
            g[self.zeta_long_slice] -= zl / p.coef_var
        return g


class LongitudinalPosterior:
    """Stage-one posterior: the GP longitudinal model alone.

    Parameter vector: [beta0_long (n) | log_kappa2 (n) | log_sigma2].
    Used by the two-stage comparator to produce plug-in estimates.
    """

    has_frailty = False

    def __init__(self, data: Dataset, spec):
        validate_dataset(data)
        self.spec = spec
        self.n_subjects = data.n_subjects
        self.subject_ids = data.subject_ids()
        self.long = _LongitudinalPack(data, spec.rho2)
        self._const_long = -0.5 * self.long.n_obs_total * LOG_2PI
        ids = self.subject_ids
        self.names = tuple(
            [f"beta0_long[{s}]" for s in ids]
            + [f"log_kappa2[{s}]" for s in ids]
            + ["log_sigma2"]
        )
        self.dim = len(self.names)
        n = self.n_subjects
        self.beta0_long_slice = slice(0, n)
        self.log_kappa2_slice = slice(n, 2 * n)
        self.idx_log_sigma2 = 2 * n

    def initial_state(self) -> np.ndarray:
        theta = np.zeros(self.dim)
        theta[self.beta0_long_slice] = self.long.values.sum(axis=1) / self.long.counts
        p = self.spec.priors
        kappa2_hat, sigma2_hat = _moment_variance_split(
            self.long,
            self.spec.rho2,
            math.exp(p.log_kappa2_mean),
            math.exp(p.log_sigma2_mean),
        )
        theta[self.log_kappa2_slice] = np.log(kappa2_hat)
        theta[self.idx_log_sigma2] = math.log(sigma2_hat)
        return theta

    def logpost_parts(self, theta: np.ndarray) -> dict[str, float]:
        b0l = theta[self.beta0_long_slice]
        lk2 = theta[self.log_kappa2_slice]
        ls2 = theta[self.idx_log_sigma2]
        p = self.spec.priors
        with np.errstate(**_EXP_STATE):
            kappa2 = np.exp(lk2)
            sigma2 = np.exp(np.float64(ls2))
            u = self.long.qx - b0l[:, None] * self.long.qone
            d = kappa2[:, None] * self.long.eigvals + sigma2
            loglik = (
                self._const_long
                - 0.5 * float(np.sum(self.long.mask * np.log(d)))
                - 0.5 * float(np.sum(u * u / d))
            )
            prior = (
                _normal_logpdf_sum(b0l, p.intercept_long_mean, p.intercept_long_var)
                + _normal_logpdf_sum(lk2, p.log_kappa2_mean, p.log_kappa2_var)
                + _normal_logpdf_sum(ls2, p.log_sigma2_mean, p.log_sigma2_var)
            )
        return {"longitudinal": loglik, "survival": 0.0, "prior": prior}

    def logpost(self, theta: np.ndarray) -> float:
        parts = self.logpost_parts(theta)
        return parts["longitudinal"] + parts["prior"]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        b0l = theta[self.beta0_long_slice]
        lk2 = theta[self.log_kappa2_slice]
        ls2 = theta[self.idx_log_sigma2]
        p = self.spec.priors
        g = np.zeros(self.dim)
        with np.errstate(**_EXP_STATE):
            kappa2 = np.exp(lk2)
            sigma2 = np.exp(np.float64(ls2))
            u = self.long.qx - b0l[:, None] * self.long.qone
            d = kappa2[:, None] * self.long.eigvals + sigma2
            ud = u / d
            g[self.beta0_long_slice] = np.sum(self.long.qone * ud, axis=1) - (
                b0l - p.intercept_long_mean
            ) / p.intercept_long_var
            g_k2 = 0.5 * np.sum(
                ud * ud * self.long.eigvals - self.long.eigvals / d, axis=1
            )
            g[self.log_kappa2_slice] = g_k2 * kappa2 - (
                lk2 - p.log_kappa2_mean
            ) / p.log_kappa2_var
            g_s2 = 0.5 * float(np.sum(ud * ud) - np.sum(self.long.mask / d))
            g[self.idx_log_sigma2] = g_s2 * sigma2 - (
                ls2 - p.log_sigma2_mean
            ) / p.log_sigma2_var
        return g


class PolyJointPosterior:
    """Joint model with a quadratic trajectory instead of the GP.

    Comparator used when the data-generating curves are polynomials:
    per-subject intercept and slope, one shared curvature, the same
    Weibull survival component with the trajectory value as the
    time-varying hazard covariate.

    Parameter vector: [traj_intercept (n) | traj_slope (n) |
    beta0_surv (n) | traj_curvature | log_sigma2 | log_tau |
    zeta_surv (p_s) | zeta_long_value].
    """

    has_frailty = True

    def __init__(self, data: Dataset, spec):
        validate_dataset(data)
        self.spec = spec
        n = data.n_subjects
        self.n_subjects = n
        self.subject_ids = data.subject_ids()
        self.long = _LongitudinalPack(data, spec.rho2)
        self.surv = _SurvivalPack(data, spec.m_midpoints)
        self.z, self.baseline_names = _baseline_matrix(data, spec.baseline_covariates)
        self.p_surv = self.z.shape[1]
        self.frailty_prior_means = np.zeros(n)
        self.center_value = spec.priors.intercept_long_mean
        ids = self.subject_ids
        self.names = tuple(
            [f"traj_intercept[{s}]" for s in ids]
            + [f"traj_slope[{s}]" for s in ids]
            + [f"beta0_surv[{s}]" for s in ids]
            + ["traj_curvature", "log_sigma2", "log_tau"]
            + [f"zeta_surv_{c}" for c in self.baseline_names]
            + ["zeta_long_value"]
        )
        self.dim = len(self.names)
        self.intercept_slice = slice(0, n)
        self.slope_slice = slice(n, 2 * n)
        self.beta0_surv_slice = slice(2 * n, 3 * n)
        self.idx_curvature = 3 * n
        self.idx_log_sigma2 = 3 * n + 1
        self.idx_log_tau = 3 * n + 2
        self.zeta_surv_slice = slice(3 * n + 3, 3 * n + 3 + self.p_surv)
        self.idx_zeta_value = 3 * n + 3 + self.p_surv

    def set_frailty_means(self, means: np.ndarray) -> None:
        means = np.asarray(means, dtype=float)
        if means.shape != (self.n_subjects,):
            raise ContractError(
                f"expected {self.n_subjects} frailty means, got shape {means.shape}"
            )
        self.frailty_prior_means = means

    def initial_state(self) -> np.ndarray:
        theta = np.zeros(self.dim)
        with np.errstate(invalid="ignore"):
            means = self.long.values.sum(axis=1) / self.long.counts
        theta[self.intercept_slice] = means
        # Crude per-subject secant slope as a starting point.
        last = (self.long.counts - 1).astype(int)
        rows = np.arange(self.n_subjects)
        span = self.long.times[rows, last] - self.long.times[rows, 0]
        rise = self.long.values[rows, last] - self.long.values[rows, 0]
        slopes = np.where(span > 0, rise / np.maximum(span, 1e-12), 0.0)
        theta[self.slope_slice] = slopes
        p = self.spec.priors
        resid = self.long.mask * (
            self.long.values
            - means[:, None]
            - slopes[:, None] * self.long.times
        )
        mean_sq = float(np.sum(resid * resid)) / self.long.n_obs_total
        theta[self.idx_log_sigma2] = math.log(max(mean_sq, 1e-6))

        def design(t: float) -> np.ndarray:
            return np.column_stack([self.z, means + slopes * t])

        coef = _proportional_hazards_seed(self.surv.y, self.surv.delta, design)
        theta[self.zeta_surv_slice] = coef[: self.p_surv]
        theta[self.idx_zeta_value] = coef[self.p_surv]
        _, log_tau = _weibull_common_mle(self.surv.y, self.surv.delta)
        theta[self.idx_log_tau] = log_tau
        tau = math.exp(log_tau)
        s = self.surv
        with np.errstate(**_EXP_STATE):
            v1_mid = (
                means[:, None]
                - self.center_value
                + slopes[:, None] * s.t_mid
            )
            lam_mid = (self.z @ coef[: self.p_surv])[:, None] + (
                coef[self.p_surv] * v1_mid
            )
            omega = s.width[:, None] * tau * np.exp(
                (tau - 1.0) * s.log_t_mid + lam_mid
            )
        exposures = omega.sum(axis=1)
        n_events = float(np.sum(s.delta))
        if n_events > 0 and np.all(np.isfinite(exposures)):
            level = float(np.log(n_events / float(np.sum(exposures))))
        else:
            level, _ = _weibull_common_mle(s.y, s.delta)
            exposures = np.power(s.y, tau)
        theta[self.beta0_surv_slice] = _weibull_intercept_modes(
            s.delta, exposures, level, p.frailty_within_var
        )
        return theta

    def _split(self, theta: np.ndarray):
        return (
            theta[self.intercept_slice],
            theta[self.slope_slice],
            theta[self.beta0_surv_slice],
            theta[self.idx_curvature],
            theta[self.idx_log_sigma2],
            theta[self.idx_log_tau],
            theta[self.zeta_surv_slice],
            theta[self.idx_zeta_value],
        )

    def logpost_parts(self, theta: np.ndarray) -> dict[str, float]:
        b0, b1, b0s, b2, ls2, lt, zs, z1 = self._split(theta)
        p = self.spec.priors
        s = self.surv
        with np.errstate(**_EXP_STATE):
            sigma2 = np.exp(np.float64(ls2))
            tau = np.exp(np.float64(lt))
            mu = b0[:, None] + b1[:, None] * self.long.times + b2 * (
                self.long.times * self.long.times
            )
            resid = self.long.mask * (self.long.values - mu)
            long_ll = -0.5 * self.long.n_obs_total * (
                LOG_2PI + ls2
            ) - 0.5 * float(np.sum(resid * resid)) / sigma2
            v1 = (
                b0[:, None]
                - self.center_value
                + b1[:, None] * s.t_eval
                + b2 * (s.t_eval * s.t_eval)
            )
            lam = (b0s + self.z @ zs)[:, None] + z1 * v1
            omega = s.width[:, None] * tau * np.exp(
                (tau - 1.0) * s.log_t_mid + lam[:, : s.m]
            )
            event = s.delta * (np.log(tau) + (tau - 1.0) * s.log_y + lam[:, s.m])
            surv_ll = float(np.sum(event) - np.sum(omega))
            prior = (
                _normal_logpdf_sum(b0, p.intercept_long_mean, p.intercept_long_var)
                + _normal_logpdf_sum(b1, 0.0, p.coef_var)
                + _normal_logpdf_sum(b2, 0.0, p.coef_var)
                + _normal_logpdf_sum(
                    b0s - self.frailty_prior_means, 0.0, p.frailty_within_var
                )
                + _normal_logpdf_sum(ls2, p.log_sigma2_mean, p.log_sigma2_var)
                + _normal_logpdf_sum(lt, p.log_tau_mean, p.log_tau_var)
                + _normal_logpdf_sum(zs, 0.0, p.coef_var)
                + _normal_logpdf_sum(z1, 0.0, p.coef_var)
            )
        return {"longitudinal": long_ll, "survival": surv_ll, "prior": prior}

    def logpost(self, theta: np.ndarray) -> float:
        parts = self.logpost_parts(theta)
        return parts["longitudinal"] + parts["survival"] + parts["prior"]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        b0, b1, b0s, b2, ls2, lt, zs, z1 = self._split(theta)
        p = self.spec.priors
        s = self.surv
        g = np.zeros(self.dim)
        with np.errstate(**_EXP_STATE):
            sigma2 = np.exp(np.float64(ls2))
            tau = np.exp(np.float64(lt))
            t_obs = self.long.times
            mu = b0[:, None] + b1[:, None] * t_obs + b2 * (t_obs * t_obs)
            resid = self.long.mask * (self.long.values - mu) / sigma2
            g_b0 = resid.sum(axis=1)
            g_b1 = np.sum(resid * t_obs, axis=1)
            g_b2 = float(np.sum(resid * t_obs * t_obs))
            g_ls2 = -0.5 * self.long.n_obs_total + 0.5 * sigma2 * float(
                np.sum(resid * resid)
            )

            v1 = (
                b0[:, None]
                - self.center_value
                + b1[:, None] * s.t_eval
                + b2 * (s.t_eval * s.t_eval)
            )
            lam = (b0s + self.z @ zs)[:, None] + z1 * v1
            omega = s.width[:, None] * tau * np.exp(
                (tau - 1.0) * s.log_t_mid + lam[:, : s.m]
            )
            w_eval = np.concatenate([-omega, s.delta[:, None]], axis=1)
            w_sum = w_eval.sum(axis=1)
            g[self.beta0_surv_slice] = w_sum - (
                b0s - self.frailty_prior_means
            ) / p.frailty_within_var
            g[self.zeta_surv_slice] = self.z.T @ w_sum - zs / p.coef_var
            g[self.idx_zeta_value] = float(np.sum(w_eval * v1)) - z1 / p.coef_var
            g_b0 = g_b0 + z1 * w_sum
            g_b1 = g_b1 + z1 * np.sum(w_eval * s.t_eval, axis=1)
            g_b2 = g_b2 + z1 * float(np.sum(w_eval * s.t_eval * s.t_eval))
            g_tau = float(
                np.sum(s.delta * (1.0 / tau + s.log_y))
                - np.sum(omega * (1.0 / tau + s.log_t_mid))
            )

            g[self.intercept_slice] = g_b0 - (
                b0 - p.intercept_long_mean
            ) / p.intercept_long_var
            g[self.slope_slice] = g_b1 - b1 / p.coef_var
            g[self.idx_curvature] = g_b2 - b2 / p.coef_var
            g[self.idx_log_sigma2] = g_ls2 - (
                ls2 - p.log_sigma2_mean
            ) / p.log_sigma2_var
            g[self.idx_log_tau] = g_tau * tau - (lt - p.log_tau_mean) / p.log_tau_var
        return g
