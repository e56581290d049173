"""Hamiltonian Monte Carlo building blocks.

Leapfrog integration with a diagonal mass matrix, a Metropolis step on
the Hamiltonian, dual-averaging step-size adaptation toward a target
acceptance rate, and a finite-difference gradient checker.  Proposals
that produce non-finite positions, gradients, or energies are treated
as divergent and rejected outright.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DomainError


@dataclass
class HmcConfig:
    """Sampler settings for one chain.

    adapt_iters bounds the dual-averaging window; None means adapt for
    the whole burn-in.  The step size is frozen afterwards.
    """

    step_size: float = 0.1
    n_leapfrog: int = 20
    target_accept: float = 0.8
    adapt_iters: int | None = None
    total_iters: int = 2000
    burn_in: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.target_accept < 1.0:
            raise DomainError("target_accept must be in (0, 1)")
        if not 0 <= self.burn_in < self.total_iters:
            raise DomainError("need 0 <= burn_in < total_iters")
        if self.adapt_iters is not None and not 0 <= self.adapt_iters <= self.burn_in:
            raise DomainError("need 0 <= adapt_iters <= burn_in")
        if self.n_leapfrog < 1:
            raise DomainError("n_leapfrog must be >= 1")
        if not self.step_size > 0:
            raise DomainError("step_size must be > 0")

    @property
    def adaptation_window(self) -> int:
        """Iterations of step-size adaptation actually run."""
        return self.burn_in if self.adapt_iters is None else self.adapt_iters


def leapfrog(
    q: np.ndarray,
    p: np.ndarray,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    eps: float,
    n_steps: int,
    inv_mass: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Integrate Hamilton's equations for n_steps of size eps.

    grad_fn returns the gradient of the log posterior (not the
    potential).  inv_mass is the diagonal of the inverse mass matrix
    (None for the identity); larger entries give a coordinate
    proportionally larger position moves.  Returns (q, p, diverged); on
    divergence the returned state is unusable and the caller must
    reject.
    """
    q = q.copy()
    p = p.copy()
    if n_steps == 0:
        return q, p, False
    grad = grad_fn(q)
    if not np.all(np.isfinite(grad)):
        return q, p, True
    p = p + 0.5 * eps * grad
    for step in range(n_steps):
        q = q + eps * (p if inv_mass is None else inv_mass * p)
        if not np.all(np.isfinite(q)):
            return q, p, True
        grad = grad_fn(q)
        if not np.all(np.isfinite(grad)):
            return q, p, True
        # Full momentum step except after the final position update.
        factor = 1.0 if step < n_steps - 1 else 0.5
        p = p + factor * eps * grad
    return q, p, False


def hmc_step(
    q: np.ndarray,
    logpost_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    eps: float,
    n_leapfrog: int,
    rng: np.random.Generator,
    current_logpost: float | None = None,
    inv_mass: np.ndarray | None = None,
) -> tuple[np.ndarray, bool, float, float]:
    """One proposal: returns (q', accepted, logpost(q'), accept_prob)."""
    if current_logpost is None:
        current_logpost = logpost_fn(q)
    if not np.isfinite(current_logpost):
        raise ContractError("log posterior is not finite at the current state")
    z = rng.normal(size=q.shape)
    p0 = z if inv_mass is None else z / np.sqrt(inv_mass)

    def kinetic(p: np.ndarray) -> float:
        with np.errstate(over="ignore"):
            return 0.5 * float(p @ (p if inv_mass is None else inv_mass * p))

    h0 = current_logpost - kinetic(p0)
    q_new, p_new, diverged = leapfrog(q, p0, grad_fn, eps, n_leapfrog, inv_mass)
    if diverged:
        return q, False, current_logpost, 0.0
    lp_new = logpost_fn(q_new)
    if not np.isfinite(lp_new):
        return q, False, current_logpost, 0.0
    h1 = lp_new - kinetic(p_new)
    log_ratio = h1 - h0
    accept_prob = min(1.0, math.exp(min(0.0, log_ratio)))
    if math.log(rng.uniform()) < log_ratio:
        return q_new, True, lp_new, accept_prob
    return q, False, current_logpost, accept_prob


class DualAveraging:
    """Nesterov dual averaging of log step size toward target acceptance.

    Constants follow the usual tuning recipe: shrinkage toward
    mu = log(10 eps0), gamma=0.05, t0=10, kappa=0.75.
    """

    def __init__(self, eps0: float, target_accept: float = 0.8):
        if not eps0 > 0:
            raise DomainError("initial step size must be > 0")
        self.mu = math.log(10.0 * eps0)
        self.target = target_accept
        self.eps0 = eps0
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.gamma = 0.05
        self.t0 = 10.0
        self.kappa = 0.75
        self.count = 0

    def update(self, accept_prob: float) -> float:
        """Feed one acceptance probability; returns the next step size."""
        self.count += 1
        m = self.count
        frac = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        weight = m ** (-self.kappa)
        self.log_eps_bar = weight * self.log_eps + (1.0 - weight) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def adapted_step_size(self) -> float:
        """Smoothed step size to freeze after burn-in.

        With no updates yet there is nothing to average, so the
        configured step size passes through untouched.
        """
        return math.exp(self.log_eps_bar) if self.count else self.eps0


def find_initial_step(
    q: np.ndarray,
    logpost_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
    eps0: float = 1.0,
) -> float:
    """Crude bracketing of a step size whose one-step acceptance is ~1/2.

    Doubles or halves eps until the single-leapfrog energy change
    crosses log(1/2), the standard warm-start heuristic.
    """
    eps = eps0
    lp0 = logpost_fn(q)
    p0 = rng.normal(size=q.shape)
    h0 = lp0 - 0.5 * float(p0 @ p0)

    def log_ratio(eps):
        q1, p1, diverged = leapfrog(q, p0, grad_fn, eps, 1)
        if diverged:
            return -np.inf
        lp1 = logpost_fn(q1)
        if not np.isfinite(lp1):
            return -np.inf
        return (lp1 - 0.5 * float(p1 @ p1)) - h0

    direction = 1.0 if log_ratio(eps) > math.log(0.5) else -1.0
    for _ in range(60):
        eps_next = eps * 2.0**direction
        if direction > 0 and log_ratio(eps_next) <= math.log(0.5):
            return eps_next
        if direction < 0 and log_ratio(eps_next) > math.log(0.5):
            return eps_next
        eps = eps_next
        if eps < 1e-10 or eps > 1e6:
            break
    return max(min(eps, 1.0), 1e-6)


def grad_check(
    logpost_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    point: np.ndarray,
    h: float = 1e-4,
) -> tuple[float, int]:
    """Central-difference check of every gradient coordinate.

    Returns (max relative error, arg-max coordinate index), with the
    relative error of coordinate j defined against max(1, |analytic_j|)
    so small-gradient coordinates are judged on absolute error.
    """
    if not h > 0:
        raise DomainError("h must be > 0")
    point = np.asarray(point, dtype=float)
    analytic = np.asarray(grad_fn(point), dtype=float)
    if analytic.shape != point.shape:
        raise ContractError(
            f"gradient shape {analytic.shape} != point shape {point.shape}"
        )
    worst = -1.0
    worst_idx = 0
    for j in range(point.size):
        e = np.zeros_like(point)
        e[j] = h
        fd = (logpost_fn(point + e) - logpost_fn(point - e)) / (2.0 * h)
        rel = abs(fd - analytic[j]) / max(1.0, abs(analytic[j]))
        if rel > worst:
            worst = rel
            worst_idx = j
    return worst, worst_idx
