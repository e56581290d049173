"""Hybrid Gibbs/Hamiltonian chain over a joint posterior.

Each iteration first refreshes the Dirichlet-process frailty machinery
with Gibbs steps (reseating sweep, cluster-mean refresh, concentration
update), then moves the whole continuous block with one Hamiltonian
proposal holding the cluster structure fixed.  Step size adapts by
dual averaging during burn-in only and is frozen afterwards; halfway
through a long enough adaptation window a diagonal mass matrix is
estimated from the early draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .frailty import (
    init_frailty_state,
    neal8_sweep,
    update_alpha,
    update_cluster_means,
)
from .hmc import DualAveraging, HmcConfig, grad_check, hmc_step

GRAD_GUARD_TOL = 1e-4

DIVERGENT_STREAK_LIMIT = 100

# Diagonal mass adaptation needs enough burn-in to estimate coordinate
# scales; shorter adaptation windows run with the identity mass.
MASS_ADAPT_MIN_WINDOW = 400

# Shrinkage of the empirical variances toward a small constant, after
# the usual windowed-adaptation recipe, so short windows cannot produce
# wild scales.
MASS_SHRINK_PSEUDO = 5.0

MASS_SHRINK_TARGET = 1e-3


@dataclass
class PosteriorDraws:
    """Post-burn-in draws plus the run's diagnostics.

    matrix holds one row per stored iteration; names label its columns.
    When the model has the frailty component, the concentration
    parameter and the cluster count are appended as extra columns.
    """

    names: tuple[str, ...]
    matrix: np.ndarray
    logpost: np.ndarray
    accept_rate: float
    step_size: float
    n_divergent: int
    config: HmcConfig = field(repr=False)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.names):
            raise ContractError(
                f"draw matrix shape {self.matrix.shape} does not match "
                f"{len(self.names)} names"
            )
        if self.matrix.shape[0] != self.logpost.size:
            raise ContractError("one log-posterior value per stored draw required")

    @property
    def n_draws(self) -> int:
        return self.matrix.shape[0]

    def column(self, name: str) -> np.ndarray:
        """Draws of one named parameter."""
        try:
            j = self.names.index(name)
        except ValueError:
            raise ContractError(f"no parameter named {name!r}") from None
        return self.matrix[:, j]


def run_chain(
    posterior,
    cfg: HmcConfig,
    rng: np.random.Generator,
    init: np.ndarray | None = None,
    check_gradient: bool = True,
) -> PosteriorDraws:
    """Sample the posterior and return the stored draws.

    The posterior object supplies logpost/grad/initial_state and, when
    it carries the frailty component, the beta0_surv slice plus
    set_frailty_means for the Gibbs interleaving.
    """
    if rng is None:
        raise ContractError("rng is required")
    if posterior.n_subjects < 1:
        raise ContractError("need at least one subject")
    theta = posterior.initial_state() if init is None else np.asarray(init, float).copy()
    if theta.shape != (posterior.dim,):
        raise ContractError(
            f"initial state has shape {theta.shape}, expected ({posterior.dim},)"
        )

    if check_gradient:
        worst, idx = grad_check(posterior.logpost, posterior.grad, theta, h=1e-4)
        if not worst < GRAD_GUARD_TOL:
            raise ContractError(
                f"gradient check failed before sampling: relative error "
                f"{worst:.3e} at {posterior.names[idx]}"
            )

    lp = posterior.logpost(theta)
    if not np.isfinite(lp):
        raise ContractError("log posterior is not finite at the initial state")

    has_frailty = getattr(posterior, "has_frailty", False)
    frailty = None
    if has_frailty:
        priors = posterior.spec.priors
        frailty = init_frailty_state(
            posterior.n_subjects,
            alpha=1.0,
            var_within=priors.frailty_within_var,
            base_mean=priors.dp_base_mean,
            base_var=priors.dp_base_var,
            prior_shape=priors.dp_alpha_shape,
            prior_rate=priors.dp_alpha_rate,
            means=theta[posterior.beta0_surv_slice],
        )
        posterior.set_frailty_means(frailty.subject_means())
        lp = posterior.logpost(theta)

    names = tuple(posterior.names) + (
        ("dp_alpha", "dp_n_clusters") if has_frailty else ()
    )
    n_store = cfg.total_iters - cfg.burn_in
    matrix = np.empty((n_store, len(names)))
    logpost = np.empty(n_store)
    adapt_window = cfg.adaptation_window
    eps = cfg.step_size
    averager = DualAveraging(eps, target_accept=cfg.target_accept)
    n_accept = 0
    n_divergent = 0
    divergent_streak = 0

    # Coordinate scales differ by orders of magnitude (a noise variance
    # pinned by every observation versus one subject's intercept), so
    # halfway through a long enough adaptation window the first half's
    # draws set a diagonal mass matrix and step-size adaptation
    # restarts against it.
    inv_mass = None
    mass_end = adapt_window // 2 if adapt_window >= MASS_ADAPT_MIN_WINDOW else -1
    mass_start = mass_end // 4
    mass_draws = []

    for it in range(cfg.total_iters):
        if it == adapt_window:
            eps = averager.adapted_step_size
        if it == mass_end:
            pool = np.array(mass_draws)
            mass_draws = []
            var = pool.var(axis=0)
            weight = pool.shape[0] / (pool.shape[0] + MASS_SHRINK_PSEUDO)
            inv_mass = np.maximum(
                weight * var + (1.0 - weight) * MASS_SHRINK_TARGET, 1e-6
            )
            eps = averager.adapted_step_size
            averager = DualAveraging(eps, target_accept=cfg.target_accept)
        if has_frailty:
            beta0_s = theta[posterior.beta0_surv_slice]
            frailty = neal8_sweep(frailty, beta0_s, rng=rng)
            frailty = update_cluster_means(frailty, beta0_s, rng)
            frailty = update_alpha(frailty, posterior.n_subjects, rng)
            posterior.set_frailty_means(frailty.subject_means())
            lp = None  # the prior for beta0_surv moved under us
        theta, accepted, lp, accept_prob = hmc_step(
            theta,
            posterior.logpost,
            posterior.grad,
            eps,
            cfg.n_leapfrog,
            rng,
            current_logpost=lp,
            inv_mass=inv_mass,
        )
        if mass_start <= it < mass_end:
            mass_draws.append(theta.copy())
        if accept_prob == 0.0:
            n_divergent += 1
            divergent_streak += 1
            if it < adapt_window and divergent_streak >= DIVERGENT_STREAK_LIMIT:
                raise NumericError(
                    f"{DIVERGENT_STREAK_LIMIT} consecutive divergent proposals "
                    f"during adaptation (step size {eps:.3e}); the posterior "
                    "or its gradient is numerically unstable at this scale"
                )
        else:
            divergent_streak = 0
        if it < adapt_window:
            eps = averager.update(accept_prob)
        if it >= cfg.burn_in:
            row = it - cfg.burn_in
            if has_frailty:
                matrix[row, : posterior.dim] = theta
                matrix[row, posterior.dim] = frailty.alpha
                matrix[row, posterior.dim + 1] = frailty.n_clusters
            else:
                matrix[row] = theta
            logpost[row] = lp
            n_accept += int(accepted)

    if not np.all(np.isfinite(logpost)):
        raise NumericError("non-finite log posterior among stored draws")
    return PosteriorDraws(
        names=names,
        matrix=matrix,
        logpost=logpost,
        accept_rate=n_accept / n_store,
        step_size=eps,
        n_divergent=n_divergent,
        config=cfg,
    )
