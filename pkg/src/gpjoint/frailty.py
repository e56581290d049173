"""Dirichlet-process mixture over the survival frailty intercepts.

The subject intercepts share cluster-level means drawn from a DP with
Normal base measure.  This module owns the discrete part of the
sampler: reassigning subjects among clusters with auxiliary atoms
(Neal's Algorithm 8), refreshing occupied cluster means through the
conjugate Normal-Normal update, and resampling the concentration
parameter with the usual beta-augmented mixture-of-Gammas step.  The
intercepts themselves move in the gradient block; only their mixture
structure lives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, DomainError


@dataclass
class FrailtyState:
    """Partition, cluster means, and concentration of the DP mixture."""

    assignments: np.ndarray
    cluster_means: np.ndarray
    alpha: float
    var_within: float = 0.1
    base_mean: float = 0.0
    base_var: float = 25.0
    prior_shape: float = 3.0
    prior_rate: float = 3.0

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        self.cluster_means = np.asarray(self.cluster_means, dtype=float)
        if not self.alpha > 0:
            raise DomainError(f"alpha must be > 0, got {self.alpha}")
        if not self.var_within > 0:
            raise DomainError(f"var_within must be > 0, got {self.var_within}")
        if not self.base_var > 0:
            raise DomainError(f"base_var must be > 0, got {self.base_var}")

    @property
    def n_clusters(self) -> int:
        return self.cluster_means.size

    def check_partition(self) -> None:
        """Labels must be compact 0..k-1 with every cluster occupied."""
        k = self.n_clusters
        if self.assignments.size == 0:
            raise ContractError("empty assignment vector")
        if self.assignments.min() < 0 or self.assignments.max() >= k:
            raise ContractError("assignment label out of range")
        counts = np.bincount(self.assignments, minlength=k)
        if np.any(counts == 0):
            raise ContractError("unoccupied cluster label present")

    def subject_means(self) -> np.ndarray:
        """Per-subject prior mean for the frailty intercepts."""
        return self.cluster_means[self.assignments]


def init_frailty_state(
    n_subjects: int,
    alpha: float = 1.0,
    var_within: float = 0.1,
    base_mean: float = 0.0,
    base_var: float = 25.0,
    prior_shape: float = 3.0,
    prior_rate: float = 3.0,
    means: np.ndarray | None = None,
) -> FrailtyState:
    """Build the starting partition.

    By default everyone starts in one cluster with the base mean.  When
    ``means`` is given (one value per subject), each subject starts in
    its own cluster at that value, which lets the first sweeps merge a
    dispersed starting pattern into data-driven clusters instead of
    having to grow them from a single shared atom.
    """
    if n_subjects < 1:
        raise ContractError("need at least one subject")
    if means is None:
        return FrailtyState(
            assignments=np.zeros(n_subjects, dtype=np.int64),
            cluster_means=np.array([base_mean]),
            alpha=alpha,
            var_within=var_within,
            base_mean=base_mean,
            base_var=base_var,
            prior_shape=prior_shape,
            prior_rate=prior_rate,
        )
    means = np.asarray(means, dtype=float)
    if means.shape != (n_subjects,):
        raise ContractError(
            f"means must have shape ({n_subjects},), got {means.shape}"
        )
    return FrailtyState(
        assignments=np.arange(n_subjects, dtype=np.int64),
        cluster_means=means.copy(),
        alpha=alpha,
        var_within=var_within,
        base_mean=base_mean,
        base_var=base_var,
        prior_shape=prior_shape,
        prior_rate=prior_rate,
    )


def neal8_sweep(
    state: FrailtyState,
    beta0_s: np.ndarray,
    m_aux: int = 3,
    rng: np.random.Generator | None = None,
) -> FrailtyState:
    """One full reassignment pass with m_aux auxiliary atoms per subject.

    Each subject is removed from its cluster and reseated among the
    occupied clusters (weight: count times the within-cluster Normal
    density) and m_aux fresh atoms from the base measure (weight:
    alpha/m_aux times the density).  A subject that was alone keeps its
    old mean as the first auxiliary atom, following the algorithm.
    """
    if rng is None:
        raise ContractError("rng is required")
    if m_aux < 1:
        raise DomainError(f"m_aux must be >= 1, got {m_aux}")
    x = np.asarray(beta0_s, dtype=float)
    n = x.size
    if state.assignments.size != n:
        raise ContractError(
            f"{n} intercepts for {state.assignments.size} assignments"
        )
    assign = state.assignments.copy()
    means = list(map(float, state.cluster_means))
    counts = list(np.bincount(assign, minlength=len(means)).astype(int))
    inv2w = 0.5 / state.var_within
    log_alpha_per_aux = math.log(state.alpha / m_aux)
    base_sd = math.sqrt(state.base_var)
    # One rng draw batch per sweep keeps stream consumption independent
    # of the partition path.
    aux_draws = state.base_mean + base_sd * rng.normal(size=(n, m_aux))
    unifs = rng.uniform(size=n)

    for i in range(n):
        c = int(assign[i])
        counts[c] -= 1
        aux = aux_draws[i]
        if counts[c] == 0:
            aux = aux.copy()
            aux[0] = means[c]
            last = len(means) - 1
            if c != last:
                means[c] = means[last]
                counts[c] = counts[last]
                assign[assign == last] = c
            means.pop()
            counts.pop()
        k = len(means)
        xi = x[i]
        logw = [0.0] * (k + m_aux)
        for j in range(k):
            diff = xi - means[j]
            logw[j] = math.log(counts[j]) - diff * diff * inv2w
        for j in range(m_aux):
            diff = xi - aux[j]
            logw[k + j] = log_alpha_per_aux - diff * diff * inv2w
        top = max(logw)
        weights = [math.exp(v - top) for v in logw]
        total = sum(weights)
        target = unifs[i] * total
        acc = 0.0
        choice = k + m_aux - 1
        for j, w in enumerate(weights):
            acc += w
            if target <= acc:
                choice = j
                break
        if choice < k:
            assign[i] = choice
            counts[choice] += 1
        else:
            assign[i] = k
            means.append(float(aux[choice - k]))
            counts.append(1)

    out = replace(
        state, assignments=assign, cluster_means=np.array(means, dtype=float)
    )
    out.check_partition()
    return out


def update_cluster_means(
    state: FrailtyState,
    beta0_s: np.ndarray,
    rng: np.random.Generator,
) -> FrailtyState:
    """Conjugate refresh of every occupied cluster mean.

    Posterior precision is 1/base_var + n_c/var_within with the
    precision-weighted mean of the base mean and the members' average.
    """
    x = np.asarray(beta0_s, dtype=float)
    k = state.n_clusters
    counts = np.bincount(state.assignments, minlength=k)
    sums = np.bincount(state.assignments, weights=x, minlength=k)
    prec = 1.0 / state.base_var + counts / state.var_within
    mean = (state.base_mean / state.base_var + sums / state.var_within) / prec
    draws = mean + rng.normal(size=k) / np.sqrt(prec)
    return replace(state, cluster_means=draws)


def update_alpha(
    state: FrailtyState,
    n_subjects: int,
    rng: np.random.Generator,
) -> FrailtyState:
    """Resample the concentration from its full conditional.

    Standard beta augmentation: draw eta ~ Beta(alpha+1, n), then a
    Gamma whose shape is prior_shape + k or prior_shape + k - 1 chosen
    by the mixing odds, with rate prior_rate - log eta.  Gamma is in
    shape-rate convention throughout.
    """
    if n_subjects < 1:
        raise ContractError("need at least one subject")
    k = state.n_clusters
    a, b = state.prior_shape, state.prior_rate
    eta = rng.beta(state.alpha + 1.0, n_subjects)
    rate = b - math.log(eta)
    odds = (a + k - 1.0) / (n_subjects * rate)
    shape = a + k if rng.uniform() < odds / (1.0 + odds) else a + k - 1.0
    new_alpha = rng.gamma(shape, 1.0 / rate)
    return replace(state, alpha=float(new_alpha))
