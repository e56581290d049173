"""Model specification, reference posterior, fitting, and summaries.

The reference implementations here compute the joint log posterior one
subject at a time through the plain building blocks (marginal GP
likelihood, midpoint hazard integral, prior densities).  They are slow
but transparent, and the batched engine is validated against them; the
engine is what the sampler actually runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chain import PosteriorDraws, run_chain
from .data import Dataset
from .engine import (
    JointPosterior,
    LongitudinalPosterior,
    PolyJointPosterior,
    _normal_logpdf_sum,
)
from .errors import ContractError, DomainError
from .frailty import FrailtyState
from .hmc import HmcConfig
from .kernel import KernelCache, build_cache
from .longitudinal import (
    LongitudinalParams,
    deriv_auc,
    long_loglik,
    posterior_mean_at,
)
from .survival import surv_logcontrib

VARIANTS = ("I", "II", "III")

TRAJECTORIES = ("gp", "quadratic")

AUC_SCHEMES = ("uniform", "pointwise")


@dataclass(frozen=True)
class Priors:
    """Prior settings for every sampled block.

    Variances are variances, not standard deviations.  Positivity
    parameters get Normal priors on their logs.  The frailty intercepts
    are Normal around their current cluster mean with frailty_within_var;
    cluster means come from a Dirichlet process with a Normal base
    measure and a Gamma-distributed concentration (shape-rate).
    """

    intercept_long_mean: float = 5.0
    intercept_long_var: float = 4.0
    log_kappa2_mean: float = -1.0
    log_kappa2_var: float = 2.0
    log_sigma2_mean: float = -1.0
    log_sigma2_var: float = 1.0
    log_tau_mean: float = 0.0
    log_tau_var: float = 1.0
    coef_var: float = 25.0
    frailty_within_var: float = 0.1
    dp_alpha_shape: float = 3.0
    dp_alpha_rate: float = 3.0
    dp_base_mean: float = 0.0
    dp_base_var: float = 25.0

    def __post_init__(self):
        for name in (
            "intercept_long_var",
            "log_kappa2_var",
            "log_sigma2_var",
            "log_tau_var",
            "coef_var",
            "frailty_within_var",
            "dp_alpha_shape",
            "dp_alpha_rate",
            "dp_base_var",
        ):
            if not getattr(self, name) > 0:
                raise DomainError(f"prior setting {name} must be > 0")


@dataclass(frozen=True)
class ModelSpec:
    """Which hazard link to fit and with what fixed settings.

    variant selects the longitudinal covariates entering the hazard:
    "I" the trajectory value, "II" value plus average rate of change,
    "III" the subject intercept plus volatility.  trajectory "quadratic"
    swaps the GP for the polynomial comparator (variant "I" only).
    auc_offset None averages the derivative over the whole history
    [0, t]; a positive value uses the trailing window [t - offset, t].
    """

    variant: str = "III"
    trajectory: str = "gp"
    auc_scheme: str = "uniform"
    auc_offset: float | None = None
    baseline_covariates: tuple[str, ...] | None = None
    priors: Priors = field(default_factory=Priors)
    rho2: float = 0.1
    n_quad: int = 200
    m_midpoints: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.trajectory not in TRAJECTORIES:
            raise DomainError(
                f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}"
            )
        if self.trajectory == "quadratic" and self.variant != "I":
            raise DomainError("the quadratic trajectory supports variant I only")
        if self.auc_scheme not in AUC_SCHEMES:
            raise DomainError(
                f"auc_scheme must be one of {AUC_SCHEMES}, got {self.auc_scheme!r}"
            )
        if self.auc_offset is not None and not self.auc_offset > 0:
            raise DomainError("auc_offset must be positive when given")
        if not self.rho2 > 0:
            raise DomainError("rho2 must be > 0")
        if self.n_quad < 1:
            raise DomainError("n_quad must be >= 1")
        if self.m_midpoints < 1:
            raise DomainError("m_midpoints must be >= 1")
        if self.baseline_covariates is not None:
            object.__setattr__(
                self, "baseline_covariates", tuple(self.baseline_covariates)
            )

    @property
    def long_covariate_names(self) -> tuple[str, ...]:
        if self.variant == "I":
            return ("value",)
        if self.variant == "II":
            return ("value", "slope")
        return ("intercept", "volatility")


@dataclass
class ParameterState:
    """One point of the continuous block plus the frailty machinery."""

    beta0_long: np.ndarray
    log_kappa2: np.ndarray
    beta0_surv: np.ndarray
    log_sigma2: float
    log_tau: float
    zeta_surv: np.ndarray
    zeta_long: np.ndarray
    frailty: FrailtyState

    def __post_init__(self):
        for name in ("beta0_long", "log_kappa2", "beta0_surv", "zeta_surv", "zeta_long"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.beta0_long.size
        if self.log_kappa2.size != n or self.beta0_surv.size != n:
            raise ContractError("per-subject blocks must share one length")
        flat = self.pack_continuous()
        if not np.all(np.isfinite(flat)):
            raise ContractError("parameter state contains non-finite entries")

    def pack_continuous(self) -> np.ndarray:
        """Flatten to the engine's parameter-vector layout."""
        return np.concatenate(
            [
                self.beta0_long,
                self.log_kappa2,
                self.beta0_surv,
                [self.log_sigma2, self.log_tau],
                self.zeta_surv,
                self.zeta_long,
            ]
        )

    @classmethod
    def unpack_continuous(
        cls, theta: np.ndarray, n: int, p_surv: int, p_long: int, frailty: FrailtyState
    ) -> "ParameterState":
        theta = np.asarray(theta, dtype=float)
        expected = 3 * n + 2 + p_surv + p_long
        if theta.size != expected:
            raise ContractError(f"state vector has {theta.size} entries, expected {expected}")
        return cls(
            beta0_long=theta[0:n],
            log_kappa2=theta[n : 2 * n],
            beta0_surv=theta[2 * n : 3 * n],
            log_sigma2=float(theta[3 * n]),
            log_tau=float(theta[3 * n + 1]),
            zeta_surv=theta[3 * n + 2 : 3 * n + 2 + p_surv],
            zeta_long=theta[3 * n + 2 + p_surv :],
            frailty=frailty,
        )


def _subject_caches(data: Dataset, rho2: float) -> list[KernelCache]:
    return [
        build_cache(s.times, rho2, subject_id=s.subject_id) for s in data.subjects
    ]


def _baseline_values(data: Dataset, spec: ModelSpec, index: int) -> np.ndarray:
    names = (
        list(data.covariate_names)
        if spec.baseline_covariates is None
        else list(spec.baseline_covariates)
    )
    cols = [data.covariate_names.index(c) for c in names]
    return np.array([data.subjects[index].z_baseline[j] for j in cols])


def linear_predictor(
    spec: ModelSpec,
    data: Dataset,
    state: ParameterState,
    index: int,
    t: float,
    cache: KernelCache | None = None,
) -> float:
    """Log Weibull scale for one subject at one time, reference path.

    Composes the frailty intercept, the baseline-covariate term, and the
    variant's longitudinal terms straight from the subject-level
    building blocks.  Longitudinal level covariates enter centered at
    their prior means so the coefficients stay decoupled from the
    frailty intercepts; the centering constant is absorbed by the
    intercept and leaves the hazard model unchanged.
    """
    if not t > 0:
        raise DomainError(f"time must be > 0, got {t}")
    subject = data.subjects[index]
    z = _baseline_values(data, spec, index)
    out = float(state.beta0_surv[index]) + float(state.zeta_surv @ z)
    if spec.variant == "III":
        kappa2 = math.exp(float(state.log_kappa2[index]))
        return out + float(
            state.zeta_long[0]
            * (state.beta0_long[index] - spec.priors.intercept_long_mean)
            + state.zeta_long[1]
            * (kappa2 - math.exp(spec.priors.log_kappa2_mean))
        )
    if cache is None:
        cache = build_cache(subject.times, spec.rho2, subject_id=subject.subject_id)
    params = LongitudinalParams(
        beta0=float(state.beta0_long[index]),
        kappa2=math.exp(float(state.log_kappa2[index])),
        sigma2=math.exp(state.log_sigma2),
        rho2=spec.rho2,
    )
    out += float(state.zeta_long[0]) * (
        float(posterior_mean_at(subject, params, cache, t))
        - spec.priors.intercept_long_mean
    )
    if spec.variant == "II":
        tau0 = 0.0 if spec.auc_offset is None else max(0.0, t - spec.auc_offset)
        out += float(state.zeta_long[1]) * deriv_auc(
            subject,
            params,
            cache,
            tau0,
            t,
            scheme=spec.auc_scheme,
            n_quad=spec.n_quad,
        )
    return out


def joint_log_posterior_parts(
    state: ParameterState, data: Dataset, spec: ModelSpec
) -> dict[str, float]:
    """Reference decomposition into longitudinal, survival, prior terms.

    The survival term integrates the hazard by the midpoint rule for the
    time-varying links and in closed form for the subject-summary link,
    mirroring the batched engine exactly.
    """
    n = data.n_subjects
    if state.beta0_long.size != n:
        raise ContractError(
            f"state is for {state.beta0_long.size} subjects, data has {n}"
        )
    p = spec.priors
    caches = _subject_caches(data, spec.rho2)
    sigma2 = math.exp(state.log_sigma2)
    tau = math.exp(state.log_tau)

    longitudinal = 0.0
    survival = 0.0
    for i, subject in enumerate(data.subjects):
        params = LongitudinalParams(
            beta0=float(state.beta0_long[i]),
            kappa2=math.exp(float(state.log_kappa2[i])),
            sigma2=sigma2,
            rho2=spec.rho2,
        )
        longitudinal += long_loglik(subject, params, caches[i])
        if spec.variant == "III":
            lam = linear_predictor(spec, data, state, i, subject.y, caches[i])
            cumulative = math.exp(lam) * subject.y**tau
            survival += (
                subject.delta
                * (math.log(tau) + (tau - 1.0) * math.log(subject.y) + lam)
                - cumulative
            )
        else:

            def lp_path(times, i=i, cache=caches[i]):
                return np.array(
                    [linear_predictor(spec, data, state, i, t, cache) for t in np.atleast_1d(times)]
                )

            survival += surv_logcontrib(subject, lp_path, tau, spec.m_midpoints)

    prior = (
        _normal_logpdf_sum(state.beta0_long, p.intercept_long_mean, p.intercept_long_var)
        + _normal_logpdf_sum(state.log_kappa2, p.log_kappa2_mean, p.log_kappa2_var)
        + _normal_logpdf_sum(
            state.beta0_surv - state.frailty.subject_means(), 0.0, p.frailty_within_var
        )
        + _normal_logpdf_sum(state.log_sigma2, p.log_sigma2_mean, p.log_sigma2_var)
        + _normal_logpdf_sum(state.log_tau, p.log_tau_mean, p.log_tau_var)
        + _normal_logpdf_sum(state.zeta_surv, 0.0, p.coef_var)
        + _normal_logpdf_sum(state.zeta_long, 0.0, p.coef_var)
    )
    return {"longitudinal": longitudinal, "survival": survival, "prior": prior}


def joint_log_posterior(
    state: ParameterState, data: Dataset, spec: ModelSpec
) -> float:
    parts = joint_log_posterior_parts(state, data, spec)
    total = parts["longitudinal"] + parts["survival"] + parts["prior"]
    return total


def build_posterior(data: Dataset, spec: ModelSpec):
    """Instantiate the batched engine matching the spec."""
    if spec.trajectory == "quadratic":
        return PolyJointPosterior(data, spec)
    return JointPosterior(data, spec)


def build_stage1_posterior(data: Dataset, spec: ModelSpec) -> LongitudinalPosterior:
    """The longitudinal-only posterior for the two-stage comparator."""
    return LongitudinalPosterior(data, spec)


def fit(
    data: Dataset,
    spec: ModelSpec,
    cfg: HmcConfig,
    rng: np.random.Generator | None = None,
    check_gradient: bool = True,
) -> PosteriorDraws:
    """Run the hybrid chain on the model's batched posterior."""
    posterior = build_posterior(data, spec)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return run_chain(posterior, cfg, rng, check_gradient=check_gradient)


TRANSFORMS = ("coef", "relative_risk_per_decrement")


def summarize(
    draws: PosteriorDraws,
    transform: str = "coef",
    names: tuple[str, ...] | None = None,
) -> list[dict]:
    """Posterior summary rows: mean, median, SD, central 95% interval.

    relative_risk_per_decrement maps each draw through exp(-value), the
    hazard ratio for a one-unit decrease, and summarizes that scale.
    """
    if transform not in TRANSFORMS:
        raise DomainError(f"transform must be one of {TRANSFORMS}, got {transform!r}")
    if draws.n_draws == 0:
        raise ContractError("no draws to summarize")
    rows = []
    for name in names if names is not None else draws.names:
        col = draws.column(name)
        if transform == "relative_risk_per_decrement":
            col = np.exp(-col)
        rows.append(
            {
                "name": name,
                "mean": float(np.mean(col)),
                "median": float(np.median(col)),
                "sd": float(np.std(col, ddof=1)) if col.size > 1 else 0.0,
                "q2.5": float(np.quantile(col, 0.025)),
                "q97.5": float(np.quantile(col, 0.975)),
            }
        )
    return rows


def poly_trajectory_value(
    b0: float, b1: float, b2: float, t
):
    """Quadratic trajectory value(s) at t for the polynomial comparator."""
    t = np.asarray(t, dtype=float)
    return b0 + b1 * t + b2 * t * t


def poly_joint_log_posterior_parts(
    theta: np.ndarray,
    data: Dataset,
    spec: ModelSpec,
    frailty_means: np.ndarray,
) -> dict[str, float]:
    """Reference decomposition for the polynomial comparator.

    theta follows PolyJointPosterior's layout; frailty_means are the
    per-subject cluster means currently injected into the prior.
    """
    n = data.n_subjects
    p = spec.priors
    b0 = theta[0:n]
    b1 = theta[n : 2 * n]
    b0s = theta[2 * n : 3 * n]
    b2 = float(theta[3 * n])
    ls2 = float(theta[3 * n + 1])
    lt = float(theta[3 * n + 2])
    sigma2 = math.exp(ls2)
    tau = math.exp(lt)
    p_surv = theta.size - (3 * n + 4)
    zs = theta[3 * n + 3 : 3 * n + 3 + p_surv]
    z1 = float(theta[3 * n + 3 + p_surv])

    longitudinal = 0.0
    survival = 0.0
    for i, subject in enumerate(data.subjects):
        mu = poly_trajectory_value(b0[i], b1[i], b2, subject.times)
        resid = subject.values - mu
        longitudinal += -0.5 * subject.n_obs * (
            math.log(2.0 * math.pi) + math.log(sigma2)
        ) - 0.5 * float(resid @ resid) / sigma2
        z = _baseline_values(data, spec, i)
        base = float(b0s[i]) + float(zs @ z)

        def lp_path(times, i=i, base=base):
            return base + z1 * (
                poly_trajectory_value(b0[i], b1[i], b2, times)
                - p.intercept_long_mean
            )

        survival += surv_logcontrib(subject, lp_path, tau, spec.m_midpoints)

    prior = (
        _normal_logpdf_sum(b0, p.intercept_long_mean, p.intercept_long_var)
        + _normal_logpdf_sum(b1, 0.0, p.coef_var)
        + _normal_logpdf_sum(b2, 0.0, p.coef_var)
        + _normal_logpdf_sum(b0s - frailty_means, 0.0, p.frailty_within_var)
        + _normal_logpdf_sum(ls2, p.log_sigma2_mean, p.log_sigma2_var)
        + _normal_logpdf_sum(lt, p.log_tau_mean, p.log_tau_var)
        + _normal_logpdf_sum(zs, 0.0, p.coef_var)
        + _normal_logpdf_sum(z1, 0.0, p.coef_var)
    )
    return {"longitudinal": longitudinal, "survival": survival, "prior": prior}
