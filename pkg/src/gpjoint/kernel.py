"""Squared-exponential correlation kernel with a cached spectral form.

Each subject's measurement grid is fixed for the whole MCMC run, so the
correlation matrix ``exp(-rho2 * dt**2)`` and its eigendecomposition are
computed once.  Marginal log-determinants and quadratic forms for any
(kappa2, sigma2) pair then cost O(l) instead of O(l**3), which is what
makes per-iteration likelihood evaluation cheap inside the sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, NumericError

# Eigenvalues of a correlation matrix are >= 0 in exact arithmetic.  The
# eigensolver may return tiny negative noise; anything below this floor
# indicates a genuinely broken decomposition rather than roundoff.
EIGENVALUE_FLOOR = -1e-10

# Relative Frobenius tolerance for Q diag(lam) Q^T to reproduce the
# correlation matrix it was computed from.
RECONSTRUCTION_TOL = 1e-10


def sq_exp_kernel(times: np.ndarray, rho2: float, kappa2: float = 1.0) -> np.ndarray:
    """Covariance matrix ``kappa2 * exp(-rho2 * (t_i - t_j)**2)``.

    Parameters
    ----------
    times : array of measurement times, any finite values.
    rho2 : decay rate of correlation with squared time separation, > 0.
    kappa2 : marginal variance scaling the whole matrix, >= 0.
        The default 1.0 gives the correlation matrix.

    Returns
    -------
    (l, l) symmetric matrix with ``kappa2`` on the diagonal.
    """
    t = np.asarray(times, dtype=float)
    if t.ndim != 1:
        raise ContractError(f"times must be 1-d, got shape {t.shape}")
    if t.size == 0:
        raise ContractError("times must be non-empty")
    if not np.all(np.isfinite(t)):
        raise DomainError("times must all be finite")
    if not (np.isfinite(rho2) and rho2 > 0):
        raise DomainError(f"rho2 must be positive and finite, got {rho2}")
    if not (np.isfinite(kappa2) and kappa2 >= 0):
        raise DomainError(f"kappa2 must be >= 0 and finite, got {kappa2}")
    dt = t[:, None] - t[None, :]
    corr = np.exp(-rho2 * dt * dt)
    # Enforce exact symmetry and unit diagonal against roundoff.
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return kappa2 * corr


@dataclass(frozen=True)
class KernelCache:
    """Spectral decomposition of one subject's correlation matrix.

    Attributes
    ----------
    times : measurement grid the matrix was built from, shape (l,).
    rho2 : decay rate used.
    corr : the correlation matrix, shape (l, l).
    eigenvalues : descending, length l, all >= 0 after clamping.
    eigenvectors : orthonormal columns, column k pairs with eigenvalue k.
    """

    times: np.ndarray
    rho2: float
    corr: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    subject_id: str | None = field(default=None, compare=False)

    @property
    def size(self) -> int:
        return self.times.size


def build_cache(
    times: np.ndarray, rho2: float, subject_id: str | None = None
) -> KernelCache:
    """Decompose the correlation matrix for one measurement grid.

    Eigenvalues in [-1e-10, 0) are clamped to zero; anything below that
    floor raises NumericError, as does a reconstruction residual above
    1e-10 relative Frobenius norm.  ``subject_id`` is only used to label
    error messages.
    """
    corr = sq_exp_kernel(times, rho2, 1.0)
    who = f" (subject {subject_id})" if subject_id is not None else ""
    try:
        lam, vec = np.linalg.eigh(corr)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed{who}: {exc}") from exc
    if np.min(lam) < EIGENVALUE_FLOOR:
        raise NumericError(
            f"eigenvalue {np.min(lam):.3e} below floor {EIGENVALUE_FLOOR:.0e}{who}"
        )
    lam = np.where(lam < 0.0, 0.0, lam)
    # eigh returns ascending order; the cache stores descending.
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    vec = vec[:, order]
    recon = (vec * lam) @ vec.T
    rel = np.linalg.norm(recon - corr) / np.linalg.norm(corr)
    if rel > RECONSTRUCTION_TOL:
        raise NumericError(
            f"spectral reconstruction error {rel:.3e} exceeds "
            f"{RECONSTRUCTION_TOL:.0e}{who}"
        )
    return KernelCache(
        times=np.asarray(times, dtype=float).copy(),
        rho2=float(rho2),
        corr=corr,
        eigenvalues=lam,
        eigenvectors=vec,
        subject_id=subject_id,
    )


def _shifted_spectrum(cache: KernelCache, kappa2: float, sigma2: float) -> np.ndarray:
    if not (np.isfinite(kappa2) and kappa2 >= 0):
        raise DomainError(f"kappa2 must be >= 0 and finite, got {kappa2}")
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise DomainError(f"sigma2 must be positive and finite, got {sigma2}")
    d = kappa2 * cache.eigenvalues + sigma2
    if np.min(d) <= 0.0:
        raise NumericError(
            f"shifted spectrum has non-positive entry {np.min(d):.3e}"
        )
    return d


def marg_logdet(cache: KernelCache, kappa2: float, sigma2: float) -> float:
    """log det(kappa2 * K + sigma2 * I) via the cached spectrum."""
    d = _shifted_spectrum(cache, kappa2, sigma2)
    return float(np.sum(np.log(d)))


def marg_quadform(
    cache: KernelCache, residual: np.ndarray, kappa2: float, sigma2: float
) -> float:
    """residual^T (kappa2 * K + sigma2 * I)^{-1} residual via the cache."""
    r = np.asarray(residual, dtype=float)
    if r.shape != (cache.size,):
        raise ContractError(
            f"residual shape {r.shape} does not match grid size {cache.size}"
        )
    d = _shifted_spectrum(cache, kappa2, sigma2)
    u = cache.eigenvectors.T @ r
    return float(np.sum(u * u / d))
