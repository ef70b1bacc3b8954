"""Covariance estimators: sample, shrinkage, factor analysis (EM) and exogenous-factor regression."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import (
    CovarianceEstimate,
    EstimatorTag,
    FactorModelParams,
    ReturnsPanel,
    as_returns,
    make_rng,
)
from .errors import (
    CollinearityError,
    DataError,
    DegeneracyError,
    DimensionError,
    DomainError,
    InsufficientDataError,
)

logger = logging.getLogger(__name__)

__all__ = [
    "EmOptions",
    "FitTrace",
    "sample_covariance",
    "shrinkage_covariance",
    "shrinkage_target",
    "single_index_target",
    "fa_fit_em",
    "fa_fit_em_batch",
    "fa_loglik",
    "fm_covariance",
    "fa_dof",
    "exogenous_factor_covariance",
]

SHRINKAGE_TARGETS = ("identity_scaled", "diagonal_variances", "constant_correlation", "single_index")

_INIT_FLOOR = 1e-6
_MSTEP_FLOOR = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EmOptions:
    max_iter: int = 1000
    rel_tol: float = 1e-8
    init: str = "spectral"
    init_seed: int = 0

    def __post_init__(self) -> None:
        if int(self.max_iter) < 1:
            raise DomainError("max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise DomainError("rel_tol must be > 0")
        if self.init not in ("spectral", "seeded_random"):
            raise DomainError(f"unknown EM init {self.init!r}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"max_iter": self.max_iter, "rel_tol": self.rel_tol, "init": self.init}
        if self.init == "seeded_random":
            out["seed"] = self.init_seed
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "EmOptions":
        data = data or {}
        return cls(
            max_iter=int(data.get("max_iter", 1000)),
            rel_tol=float(data.get("rel_tol", 1e-8)),
            init=data.get("init", "spectral"),
            init_seed=int(data.get("seed", 0)),
        )


@dataclass
class FitTrace:
    loglik_per_iter: list[float] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def final_loglik(self) -> float:
        return self.loglik_per_iter[-1]


def _centered(r: np.ndarray) -> np.ndarray:
    return r - r.mean(axis=0)


# ---------------------------------------------------------------------------
# sample covariance and shrinkage


def sample_covariance(panel: ReturnsPanel | np.ndarray) -> CovarianceEstimate:
    """Unbiased sample covariance (mean-centred, ``1/(T-1)`` normalisation)."""
    r = as_returns(panel)
    T = r.shape[0]
    if T < 2:
        raise InsufficientDataError(f"sample covariance needs T >= 2, got {T}")
    rc = _centered(r)
    return CovarianceEstimate(rc.T @ rc / (T - 1), EstimatorTag.SAMPLE)


def single_index_target(panel: ReturnsPanel | np.ndarray) -> CovarianceEstimate:
    """One-factor market model with the equal-weighted cross-sectional mean as the market.

    Betas come from univariate least squares on the centred series; the target is
    ``beta beta' var(m) + diag(residual variances)``. Variances use ``1/(T-1)``, so the
    target reproduces the sample variances on its diagonal.
    """
    r = as_returns(panel)
    T = r.shape[0]
    if T < 3:
        raise InsufficientDataError(f"single-index target needs T >= 3, got {T}")
    rc = _centered(r)
    m = rc.mean(axis=1)
    ss_m = float(m @ m)
    scale = float(np.mean(np.sum(rc * rc, axis=0)))
    if ss_m <= 1e-14 * max(scale, np.finfo(float).tiny):
        raise DegeneracyError("market series has zero variance")
    beta = rc.T @ m / ss_m
    resid = rc - np.outer(m, beta)
    resid_var = np.sum(resid * resid, axis=0) / (T - 1)
    var_m = ss_m / (T - 1)
    target = np.outer(beta, beta) * var_m
    target[np.diag_indices_from(target)] += resid_var
    return CovarianceEstimate(target, EstimatorTag.SHRINKAGE, {"beta": beta, "market_variance": var_m})


def shrinkage_target(panel: ReturnsPanel | np.ndarray, target: str, sample: np.ndarray | None = None) -> np.ndarray:
    if target not in SHRINKAGE_TARGETS:
        raise DomainError(f"unknown shrinkage target {target!r}; expected one of {SHRINKAGE_TARGETS}")
    if sample is None:
        sample = sample_covariance(panel).matrix
    var = np.diag(sample)
    if target == "identity_scaled":
        return np.mean(var) * np.eye(len(var))
    if target == "diagonal_variances":
        return np.diag(var)
    if target == "constant_correlation":
        sd = np.sqrt(var)
        n = len(var)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = sample / np.outer(sd, sd)
        if n < 2 or not np.all(np.isfinite(corr)):
            raise DegeneracyError("constant-correlation target needs n >= 2 assets with positive variance")
        rbar = (corr.sum() - np.trace(corr)) / (n * (n - 1))
        out = rbar * np.outer(sd, sd)
        out[np.diag_indices_from(out)] = var
        return out
    return single_index_target(panel).matrix


def _auto_intensity(rc: np.ndarray, sample: np.ndarray, target: np.ndarray, skip_diagonal: bool) -> float:
    # unbiased plug-in estimate of Var(C_ij), summed over the shrunk entries
    T = rc.shape[0]
    w = rc[:, :, None] * rc[:, None, :]
    wbar = w.mean(axis=0)
    var_hat = T / (T - 1) ** 3 * np.sum((w - wbar) ** 2, axis=0)
    diff2 = (sample - target) ** 2
    if skip_diagonal:
        mask = ~np.eye(sample.shape[0], dtype=bool)
        var_hat, diff2 = var_hat[mask], diff2[mask]
    denom = float(diff2.sum())
    num = float(var_hat.sum())
    if denom <= 0.0:
        return 1.0
    return 1.0 - min(1.0, num / denom)


def shrinkage_covariance(
    panel: ReturnsPanel | np.ndarray,
    target: str = "single_index",
    intensity: float | str = "auto",
) -> CovarianceEstimate:
    """Convex combination ``lam * C_sample + (1 - lam) * C_target``.

    ``intensity`` is either a fixed weight on the sample covariance in ``[0, 1]`` or
    ``"auto"`` for the plug-in bias/variance rule. The chosen weight is stored in
    ``meta["intensity"]``.
    """
    r = as_returns(panel)
    T = r.shape[0]
    if T < 2:
        raise InsufficientDataError(f"shrinkage needs T >= 2, got {T}")
    if isinstance(intensity, str):
        if intensity != "auto":
            raise DomainError(f"intensity must be a number in [0, 1] or 'auto', got {intensity!r}")
    elif not (0.0 <= float(intensity) <= 1.0):
        raise DomainError(f"shrinkage intensity must lie in [0, 1], got {intensity!r}")
    sample = sample_covariance(r).matrix
    tgt = shrinkage_target(r, target, sample)
    if intensity == "auto":
        lam = _auto_intensity(_centered(r), sample, tgt, skip_diagonal=target != "identity_scaled")
    else:
        lam = float(intensity)
    if lam == 1.0:
        mat = sample
    elif lam == 0.0:
        mat = tgt
    else:
        mat = lam * sample + (1.0 - lam) * tgt
    return CovarianceEstimate(mat, EstimatorTag.SHRINKAGE, {"intensity": lam, "target": target})


# ---------------------------------------------------------------------------
# factor analysis


def fa_dof(M: int, N: int) -> int:
    """Free parameters of an M-factor FA model on N assets: ``(M+1)(N-1) + 2``."""
    if not (1 <= M < N):
        raise DomainError(f"need 1 <= M < N, got M={M}, N={N}")
    return (M + 1) * (N - 1) + 2


def fm_covariance(params: FactorModelParams) -> CovarianceEstimate:
    return CovarianceEstimate(params.covariance_matrix(), EstimatorTag.FACTOR_ANALYSIS)


def _loglik_terms(S: np.ndarray, W: np.ndarray, D: np.ndarray):
    """Per-observation Gaussian log-likelihood of covariance ``W W' + diag(D)`` given ML scatter ``S``.

    Works on stacks: S (B,N,N), W (B,N,M), D (B,N). Uses the Woodbury identity so the
    cost is O(N^2 M). Also returns the pieces the EM update reuses.
    """
    B, N, M = W.shape
    Wt_Dinv = W.transpose(0, 2, 1) / D[:, None, :]  # (B,M,N)
    G = np.eye(M) + Wt_Dinv @ W  # (B,M,M)
    A = S @ Wt_Dinv.transpose(0, 2, 1)  # (B,N,M) = S D^-1 W
    G_inv = np.linalg.inv(G)
    _, logdet_G = np.linalg.slogdet(G)
    logdet = np.sum(np.log(D), axis=1) + logdet_G
    # tr(C^-1 S) = tr(D^-1 S) - tr(G^-1 W'D^-1 S D^-1 W)
    trace = (np.einsum("bii->bi", S) / D).sum(axis=1) - np.einsum("bij,bjk,bki->b", G_inv, Wt_Dinv, A)
    ll = -0.5 * (N * _LOG_2PI + logdet + trace)
    return ll, G_inv, Wt_Dinv, A


def _spectral_init(S: np.ndarray, M: int) -> tuple[np.ndarray, np.ndarray]:
    B, N, _ = S.shape
    evals, evecs = np.linalg.eigh(S)
    evals = evals[:, ::-1]
    evecs = evecs[:, :, ::-1]
    mean_var = np.einsum("bii->bi", S).mean(axis=1)
    eps = _INIT_FLOOR * mean_var
    resid = evals[:, M:].mean(axis=1)
    scale = np.sqrt(np.maximum(evals[:, :M] - resid[:, None], eps[:, None]))
    W = evecs[:, :, :M] * scale[:, None, :]
    D = np.einsum("bii->bi", S) - np.sum(W * W, axis=2)
    D = np.maximum(D, eps[:, None])
    return W, D


def _random_init(S: np.ndarray, M: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    B, N, _ = S.shape
    rng = make_rng(seed)
    diag = np.einsum("bii->bi", S)
    mean_var = diag.mean(axis=1)
    W = rng.standard_normal((B, N, M)) * np.sqrt(mean_var / M)[:, None, None] * 0.5
    D = np.maximum(diag, _INIT_FLOOR * mean_var[:, None])
    return W, D


@dataclass
class _BatchFit:
    W: np.ndarray  # (B,N,M): transposed mixing
    D: np.ndarray  # (B,N)
    traces: list[FitTrace]


def _em_batch(S: np.ndarray, T: np.ndarray, M: int, opts: EmOptions) -> _BatchFit:
    """Run FA-EM on a stack of ML scatter matrices ``S`` (B,N,N) with sample sizes ``T`` (B,)."""
    B, N, _ = S.shape
    if opts.init == "spectral":
        W, D = _spectral_init(S, M)
    else:
        W, D = _random_init(S, M, opts.init_seed)
    floor = _MSTEP_FLOOR * np.einsum("bii->bi", S).mean(axis=1)
    traces = [FitTrace() for _ in range(B)]
    active = np.arange(B)
    eye = np.eye(M)
    ll_prev = None
    for it in range(opts.max_iter + 1):
        Sa, Wa, Da = S[active], W[active], D[active]
        ll, G_inv, Wt_Dinv, A = _loglik_terms(Sa, Wa, Da)
        total = ll * T[active]
        for b, val in zip(active, total):
            traces[b].loglik_per_iter.append(float(val))
        if ll_prev is not None:
            gain = total - ll_prev
            done = gain < opts.rel_tol * np.abs(ll_prev)
            for b in active[done]:
                traces[b].converged = True
            keep = ~done
        else:
            keep = np.ones(len(active), dtype=bool)
        if it == opts.max_iter:
            break
        if not np.any(keep):
            break
        active, Sa, Wa, G_inv, Wt_Dinv, A, total = (
            active[keep], Sa[keep], Wa[keep], G_inv[keep], Wt_Dinv[keep], A[keep], total[keep],
        )
        # E-step: beta = G^-1 W' D^-1 ; S beta' = A G^-1
        beta = G_inv @ Wt_Dinv  # (b,M,N)
        S_beta = A @ G_inv  # (b,N,M), G symmetric
        Ezz = eye - beta @ Wa + beta @ S_beta  # (b,M,M)
        # M-step
        W_new = np.linalg.solve(Ezz, S_beta.transpose(0, 2, 1)).transpose(0, 2, 1)
        D_new = np.einsum("bii->bi", Sa) - np.sum(W_new * S_beta, axis=2)
        D_new = np.maximum(D_new, floor[active][:, None])
        W[active] = W_new
        D[active] = D_new
        for b in active:
            traces[b].iterations += 1
        ll_prev = total
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(D))):
        bad = np.unique(np.argwhere(~np.isfinite(W).all(axis=(1, 2)) | ~np.isfinite(D).all(axis=1)))
        for b in bad:
            traces[b].converged = False
            traces[b].loglik_per_iter.append(float("nan"))
    return _BatchFit(W, D, traces)


def _ml_scatter(r: np.ndarray) -> np.ndarray:
    rc = r - r.mean(axis=-2, keepdims=True)
    return np.swapaxes(rc, -1, -2) @ rc / r.shape[-2]


def _check_fa_dims(T: int, N: int, M: int) -> None:
    if not (1 <= M < N):
        raise DimensionError(f"factor analysis needs 1 <= M < N, got M={M}, N={N}")
    if T <= M + 1:
        raise InsufficientDataError(f"factor analysis with M={M} needs T > M + 1, got T={T}")


def fa_fit_em_batch(
    returns: np.ndarray, n_factors: int, opts: EmOptions | None = None
) -> tuple[list[FactorModelParams | None], list[FitTrace]]:
    """Fit independent FA models to a stack of panels ``returns`` of shape (B, T, N).

    Each panel is processed exactly as :func:`fa_fit_em` would, but the EM iterations
    are vectorised across the stack. Fits that produced non-finite parameters are
    returned as ``None``.
    """
    opts = opts or EmOptions()
    returns = np.asarray(returns, dtype=float)
    if returns.ndim != 3:
        raise DimensionError("batched returns must have shape (B, T, N)")
    B, T, N = returns.shape
    _check_fa_dims(T, N, n_factors)
    if not np.all(np.isfinite(returns)):
        raise DataError("returns contain non-finite values")
    S = _ml_scatter(returns)
    return _fit_from_scatter(S, np.full(B, T, dtype=float), n_factors, opts)


def _fit_from_scatter(S, T, M, opts):
    fit = _em_batch(S, T, M, opts)
    params: list[FactorModelParams | None] = []
    for b in range(S.shape[0]):
        W, D = fit.W[b], fit.D[b]
        if np.all(np.isfinite(W)) and np.all(np.isfinite(D)) and np.all(D > 0):
            params.append(FactorModelParams(W.T.copy(), D.copy()))
        else:
            params.append(None)
    return params, fit.traces


def fa_fit_em(
    panel: ReturnsPanel | np.ndarray, n_factors: int, opts: EmOptions | None = None
) -> tuple[FactorModelParams, FitTrace]:
    """Maximum-likelihood factor analysis via EM on the mean-centred panel.

    Parameters
    ----------
    panel : ReturnsPanel or ndarray
        T x N returns.
    n_factors : int
        Number of latent factors M, ``1 <= M < N``.
    opts : EmOptions, optional
        Iteration limit, relative log-likelihood tolerance and initialisation.

    Returns
    -------
    params : FactorModelParams
        Fitted mixing matrix (M x N) and uniquenesses.
    trace : FitTrace
        Log-likelihood after initialisation and after every EM update.
    """
    r = as_returns(panel)
    params, traces = fa_fit_em_batch(r[None], n_factors, opts)
    if params[0] is None:
        raise DataError("EM produced non-finite parameters")
    return params[0], traces[0]


def fa_loglik(params: FactorModelParams, panel: ReturnsPanel | np.ndarray) -> float:
    """Gaussian log-likelihood of the mean-centred panel under ``X'X + D``."""
    r = as_returns(panel)
    T, N = r.shape
    if N != params.n_assets:
        raise DimensionError(f"panel has {N} assets, model has {params.n_assets}")
    S = _ml_scatter(r)
    ll, *_ = _loglik_terms(S[None], params.mixing.T[None], params.noise_var[None])
    return float(ll[0] * T)


# ---------------------------------------------------------------------------
# exogenous factors


def exogenous_factor_covariance(
    panel: ReturnsPanel | np.ndarray, factor_series: np.ndarray
) -> CovarianceEstimate:
    """Covariance implied by OLS exposures to supplied factor return series.

    Returns ``B' Cov(F) B + diag(residual variances)`` where ``B`` (F x N) comes from
    regressing centred returns on centred factors.
    """
    r = as_returns(panel)
    f = np.asarray(factor_series, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    T = r.shape[0]
    if f.shape[0] != T:
        raise DimensionError(f"factor series has {f.shape[0]} rows, panel has {T}")
    if not np.all(np.isfinite(f)):
        raise DataError("factor series contains non-finite values")
    if T < 2:
        raise InsufficientDataError("need T >= 2")
    n_fac = f.shape[1]
    if n_fac >= T:
        raise InsufficientDataError(f"need fewer factors ({n_fac}) than observations ({T})")
    rc, fc = _centered(r), _centered(f)
    fvar = np.sum(fc * fc, axis=0)
    scale = max(float(np.max(fvar)), np.finfo(float).tiny)
    if np.any(fvar <= 1e-14 * scale) or float(np.max(fvar)) == 0.0:
        raise CollinearityError("a factor series has zero variance")
    if np.linalg.matrix_rank(fc) < n_fac:
        raise CollinearityError("factor series are collinear")
    B, *_ = np.linalg.lstsq(fc, rc, rcond=None)
    resid = rc - fc @ B
    resid_var = np.sum(resid * resid, axis=0) / (T - 1)
    cov_f = fc.T @ fc / (T - 1)
    mat = B.T @ cov_f @ B
    mat[np.diag_indices_from(mat)] += resid_var
    return CovarianceEstimate(mat, EstimatorTag.EXOGENOUS_FACTOR, {"n_factors": n_fac})
