"""Minimum-variance allocation (plain, return-targeted, ridge-regularised) and resampled portfolios."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import linalg

from .core import CovarianceEstimate, ReturnsPanel, SeedLike, as_matrix, as_returns, make_rng
from .errors import ConditioningError, ConstraintError, DegeneracyError, DimensionError, DomainError

logger = logging.getLogger(__name__)

__all__ = [
    "PortfolioWeights",
    "DiversificationMetric",
    "min_variance_weights",
    "min_variance_with_return",
    "regularized_min_variance",
    "asset_variance_metric",
    "resampled_weights",
    "resampled_weights_path",
]

_RCOND_MIN = 1e-12


@dataclass
class PortfolioWeights:
    w: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=float)
        if not np.all(np.isfinite(self.w)):
            raise ConditioningError("portfolio weights are not finite")
        if abs(self.w.sum() - 1.0) > 1e-10:
            raise ConstraintError(f"weights sum to {self.w.sum()!r}, not 1")

    def variance(self, cov: CovarianceEstimate | np.ndarray) -> float:
        return float(self.w @ as_matrix(cov) @ self.w)


@dataclass(frozen=True)
class DiversificationMetric:
    """Diagonal penalty metric: single-asset variances."""

    diag: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.diag, dtype=float)
        if d.ndim != 1 or not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise DomainError("diversification metric must be a vector of positive variances")
        object.__setattr__(self, "diag", d)


def _factor(C: np.ndarray):
    n = C.shape[0]
    if C.ndim != 2 or C.shape[1] != n:
        raise DimensionError(f"covariance must be square, got {C.shape}")
    evals = np.linalg.eigvalsh(C)
    tr = np.trace(C)
    if not (evals[0] > 1e-12 * tr / n) or evals[0] / evals[-1] < _RCOND_MIN:
        raise ConditioningError(
            f"covariance is not safely positive definite (eigenvalues {evals[0]:.3g} .. {evals[-1]:.3g})"
        )
    try:
        return linalg.cho_factor(C, lower=True, check_finite=False), evals[0] / evals[-1]
    except linalg.LinAlgError as exc:
        raise ConditioningError(str(exc)) from exc


def min_variance_weights(cov: CovarianceEstimate | np.ndarray) -> PortfolioWeights:
    """``C^-1 1 / (1' C^-1 1)``, via a Cholesky solve."""
    C = as_matrix(cov)
    cf, rcond = _factor(C)
    x = linalg.cho_solve(cf, np.ones(C.shape[0]), check_finite=False)
    return PortfolioWeights(x / x.sum(), {"solver": "min_variance", "rcond": rcond})


def min_variance_with_return(
    cov: CovarianceEstimate | np.ndarray, r_hat: Sequence[float], r_star: float
) -> PortfolioWeights:
    """Minimise ``w'Cw`` subject to ``1'w = 1`` and ``r_hat'w = r_star``."""
    C = as_matrix(cov)
    n = C.shape[0]
    r_hat = np.asarray(r_hat, dtype=float)
    if r_hat.shape != (n,):
        raise DimensionError(f"r_hat has shape {r_hat.shape}, expected ({n},)")
    cf, rcond = _factor(C)
    A = np.column_stack([np.ones(n), r_hat])
    CiA = linalg.cho_solve(cf, A, check_finite=False)
    H = A.T @ CiA
    # H is singular exactly when r_hat is proportional to the ones vector
    det = H[0, 0] * H[1, 1] - H[0, 1] ** 2
    if det <= 1e-12 * H[0, 0] * H[1, 1]:
        raise ConstraintError("return constraint is degenerate with the budget constraint")
    lam = np.linalg.solve(H, np.array([1.0, float(r_star)]))
    w = CiA @ lam
    return PortfolioWeights(w, {"solver": "min_variance_with_return", "r_star": float(r_star), "rcond": rcond})


def regularized_min_variance(
    cov: CovarianceEstimate | np.ndarray, metric: DiversificationMetric, lam: float
) -> PortfolioWeights:
    """Minimum variance of ``w'Cw + lam w'Lw`` with ``L = diag(metric)`` under ``1'w = 1``."""
    if not lam >= 0:
        raise DomainError(f"lambda must be >= 0, got {lam!r}")
    C = as_matrix(cov)
    if metric.diag.shape != (C.shape[0],):
        raise DimensionError("metric does not match covariance size")
    if lam == 0:
        out = min_variance_weights(C)
    else:
        out = min_variance_weights(C + lam * np.diag(metric.diag))
    out.meta.update(solver="ridge_min_variance", lam=float(lam))
    return out


def asset_variance_metric(panel: ReturnsPanel | np.ndarray) -> DiversificationMetric:
    r = as_returns(panel)
    if r.shape[0] < 2:
        raise DomainError("need T >= 2 to estimate variances")
    var = r.var(axis=0, ddof=1)
    if np.any(var <= 0):
        raise DegeneracyError(f"assets {np.flatnonzero(var <= 0).tolist()} have zero variance")
    return DiversificationMetric(var)


def _resample_covariances(r: np.ndarray, n_resamples: int, seed: SeedLike) -> tuple[list[np.ndarray], int]:
    T, N = r.shape
    mean = r.mean(axis=0)
    rc = r - mean
    C = rc.T @ rc / (T - 1)
    evals, evecs = np.linalg.eigh(C)
    root = evecs * np.sqrt(np.maximum(evals, 0.0))
    covs = []
    n_jitter = 0
    for k in range(n_resamples):
        z = make_rng(seed, k).standard_normal((T, N))
        sim = z @ root.T + mean
        sc = sim - sim.mean(axis=0)
        Ck = sc.T @ sc / (T - 1)
        ev = np.linalg.eigvalsh(Ck)
        tr = np.trace(Ck)
        if not (ev[0] > 1e-12 * tr / N) or ev[0] / ev[-1] < _RCOND_MIN:
            Ck = Ck + 1e-8 * tr / N * np.eye(N)
            n_jitter += 1
        covs.append(Ck)
    if n_jitter:
        logger.info("jittered %d of %d singular resample covariances", n_jitter, n_resamples)
    return covs, n_jitter


def resampled_weights_path(
    panel: ReturnsPanel | np.ndarray,
    n_resamples: int = 100,
    seed: SeedLike = 0,
    lambdas: Sequence[float] = (0.0,),
) -> list[PortfolioWeights]:
    """Resampled portfolios for several ridge strengths sharing one set of resamples."""
    r = as_returns(panel)
    if r.shape[0] < 2:
        raise DomainError("need T >= 2")
    if n_resamples < 1:
        raise DomainError("n_resamples must be >= 1")
    covs, n_jitter = _resample_covariances(r, n_resamples, seed)
    out = []
    for lam in lambdas:
        acc = np.zeros(r.shape[1])
        for Ck in covs:
            if lam == 0:
                acc += min_variance_weights(Ck).w
            else:
                acc += regularized_min_variance(Ck, DiversificationMetric(np.diag(Ck).copy()), lam).w
        w = acc / n_resamples
        w = w / w.sum()
        out.append(
            PortfolioWeights(w, {"solver": "resampled", "n_resamples": n_resamples, "lam": float(lam), "n_jitter": n_jitter})
        )
    return out


def resampled_weights(
    panel: ReturnsPanel | np.ndarray,
    n_resamples: int = 100,
    seed: SeedLike = 0,
    inner_solver: dict[str, Any] | None = None,
) -> PortfolioWeights:
    """Average of minimum-variance weights over Gaussian resamples of the panel's sample moments.

    ``inner_solver`` may set ``{"lambda": value}`` to use the ridge-regularised solver
    (with each resample's own variances as the metric).
    """
    lam = float((inner_solver or {}).get("lambda", 0.0))
    return resampled_weights_path(panel, n_resamples, seed, (lam,))[0]
