"""Cox proportional-hazards fit for the two-stage comparator.

Partial likelihood with the Breslow convention for tied event times and
support for covariates that change over time: the covariate matrix is
re-evaluated at every distinct event time, so plugged-in trajectory
summaries can enter the risk sets at the value they take when each
event happens.  Newton-Raphson on the score with the observed
information supplies both the estimate and its standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError

SCORE_TOL = 1e-8

MAX_NEWTON_ITER = 50

# A covariate whose within-risk-set variation never exceeds this bound
# carries no partial-likelihood information; its standard error is
# reported as infinite instead of a misleading finite number.
SINGULAR_INFO_TOL = 1e-10


@dataclass
class CoxFit:
    """Partial-likelihood estimate with its curvature-based errors."""

    coef: np.ndarray
    se: np.ndarray
    loglik: float
    n_iter: int
    converged: bool
    names: tuple[str, ...]


def _event_blocks(y: np.ndarray, delta: np.ndarray):
    """Distinct event times ascending, with event and risk-set masks."""
    event_times = np.unique(y[delta > 0])
    blocks = []
    for t in event_times:
        dying = (y == t) & (delta > 0)
        at_risk = y >= t
        blocks.append((t, dying, at_risk))
    return blocks


def _covariate_stack(covariates, blocks, n: int):
    """Covariate matrix per distinct event time, shape (k, n, p)."""
    if callable(covariates):
        mats = [np.asarray(covariates(t), dtype=float) for t, _, _ in blocks]
    else:
        x = np.asarray(covariates, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        mats = [x for _ in blocks]
    for mat in mats:
        if mat.ndim != 2 or mat.shape[0] != n:
            raise ContractError(
                f"covariates must evaluate to (n, p) with n={n}, got {mat.shape}"
            )
        if not np.all(np.isfinite(mat)):
            raise DomainError("covariate values must all be finite")
    return np.array(mats) if mats else np.zeros((0, n, 1))


def cox_loglik_score_info(
    beta: np.ndarray, y: np.ndarray, delta: np.ndarray, x_stack: np.ndarray, blocks
):
    """Breslow partial log likelihood with its score and information.

    Ties share one denominator: a time with d events contributes the d
    linear predictors minus d times the log risk-set sum, so the score
    subtracts d weighted means and the information adds d weighted
    covariance matrices.
    """
    p = x_stack.shape[2] if x_stack.size else np.asarray(beta).size
    ll = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    for k, (_, dying, at_risk) in enumerate(blocks):
        x = x_stack[k]
        eta = x @ beta
        # Stabilize the log-sum-exp over the risk set.
        m = float(np.max(eta[at_risk]))
        w = np.where(at_risk, np.exp(eta - m), 0.0)
        total = float(np.sum(w))
        xbar = (w @ x) / total
        d = float(np.sum(dying))
        ll += float(np.sum(eta[dying])) - d * (np.log(total) + m)
        score += x[dying].sum(axis=0) - d * xbar
        centered = x - xbar
        info += d * (centered.T @ (w[:, None] * centered)) / total
    return ll, score, info


def cox_fit(
    y: np.ndarray,
    delta: np.ndarray,
    covariates,
    names: tuple[str, ...] | None = None,
    max_iter: int = MAX_NEWTON_ITER,
    tol: float = SCORE_TOL,
) -> CoxFit:
    """Fit the proportional-hazards model by Newton-Raphson.

    Parameters
    ----------
    y : observed times, shape (n,), all > 0.
    delta : event indicators, shape (n,), 1 for an event, 0 censored.
    covariates : (n, p) array of time-fixed values, or a callable
        mapping an event time t to the (n, p) matrix of covariate
        values every subject would show at t.
    names : optional labels for the p columns.
    max_iter, tol : Newton stops when the largest score component in
        absolute value drops below tol, or after max_iter updates.

    Returns
    -------
    CoxFit with coefficients, standard errors from the inverse observed
    information (infinite where the information is degenerate), the
    final partial log likelihood, and convergence diagnostics.
    """
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if y.ndim != 1 or y.shape != delta.shape:
        raise ContractError(
            f"y and delta must be matching 1-d arrays, got {y.shape} and {delta.shape}"
        )
    if not np.all(y > 0):
        raise DomainError("observed times must all be > 0")
    if not np.all((delta == 0) | (delta == 1)):
        raise DomainError("event indicators must be 0 or 1")
    n = y.size
    blocks = _event_blocks(y, delta)
    x_stack = _covariate_stack(covariates, blocks, n)
    p = x_stack.shape[2] if x_stack.size else 1
    if names is None:
        names = tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ContractError(f"{p} covariate columns but {len(names)} names")
    if not blocks:
        return CoxFit(
            coef=np.zeros(p),
            se=np.full(p, np.inf),
            loglik=0.0,
            n_iter=0,
            converged=False,
            names=tuple(names),
        )

    beta = np.zeros(p)
    converged = False
    n_iter = 0
    ll, score, info = cox_loglik_score_info(beta, y, delta, x_stack, blocks)
    for n_iter in range(1, max_iter + 1):
        if float(np.max(np.abs(score))) < tol:
            converged = True
            n_iter -= 1
            break
        degenerate = np.diag(info) <= SINGULAR_INFO_TOL
        if degenerate.any():
            # Solve in the informative subspace only; degenerate
            # coordinates stay at zero with infinite standard error.
            keep = ~degenerate
            sub = np.zeros(p)
            if keep.any():
                sub[keep] = np.linalg.solve(
                    info[np.ix_(keep, keep)], score[keep]
                )
            step = sub
        else:
            step = np.linalg.solve(info, score)
        beta = beta + step
        ll, score, info = cox_loglik_score_info(beta, y, delta, x_stack, blocks)
    else:
        converged = float(np.max(np.abs(score))) < tol

    se = np.full(p, np.inf)
    degenerate = np.diag(info) <= SINGULAR_INFO_TOL
    keep = ~degenerate
    if keep.any():
        cov = np.linalg.inv(info[np.ix_(keep, keep)])
        se[keep] = np.sqrt(np.diag(cov))
    return CoxFit(
        coef=beta,
        se=se,
        loglik=ll,
        n_iter=n_iter,
        converged=converged,
        names=tuple(names),
    )
