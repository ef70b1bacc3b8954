"""Directional Variance Adjustment of factor-analysis covariance estimates.

The fitted model is used as a generator: K synthetic panels of the original size are
drawn from it and refitted, and the average ratio of refitted to generating variance
along each refit's factor-subspace / complement eigendirections gives one correction
factor per direction. The original covariance is then rescaled along its own
directions by the inverse of those factors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import (
    CovarianceEstimate,
    EstimatorTag,
    FactorModelParams,
    ReturnsPanel,
    SeedLike,
    as_matrix,
    as_returns,
    make_rng,
)
from .errors import DegeneracyError, DimensionError, DvaCovError, RankDeficiencyError
from .estimators import EmOptions, _fit_from_scatter, _ml_scatter, fa_fit_em
from .synthgen import NoiseDistribution, _simulate

logger = logging.getLogger(__name__)

__all__ = [
    "SubspaceBasis",
    "CorrectionFactors",
    "BiasReport",
    "subspace_bases",
    "directional_variances",
    "systematic_error_ratios",
    "dva_correction_factors",
    "dva_correction_factors_many",
    "dva_adjust",
    "dva_covariance",
    "run_bias_study",
    "compare_bias",
]

DEFAULT_CLAMP = (0.2, 5.0)
DEFAULT_K = 100
_MAX_RETRIES = 5
_CHUNK = 1024


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal N x N basis; the first ``n_factors`` columns span the factor subspace."""

    directions: np.ndarray
    n_factors: int

    @property
    def factor_subspace(self) -> np.ndarray:
        return self.directions[:, : self.n_factors]

    @property
    def complement(self) -> np.ndarray:
        return self.directions[:, self.n_factors :]


@dataclass
class CorrectionFactors:
    s: np.ndarray
    k_runs: int
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"s": self.s.tolist(), "k_runs": self.k_runs, "meta": _jsonable(self.meta)}


@dataclass
class BiasReport:
    """Per-direction summary of estimated / true directional variance ratios over replications."""

    s_mean: np.ndarray
    s_std: np.ndarray
    a_mean: np.ndarray
    n_reps: int
    ratios: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def s_cv(self) -> np.ndarray:
        """Standard deviation normalised by the mean ratio."""
        return self.s_std / self.s_mean

    def to_dict(self) -> dict[str, Any]:
        def arr(x):
            return [None if not np.isfinite(v) else float(v) for v in x]

        return {
            "s_mean": arr(self.s_mean),
            "s_std": arr(self.s_std),
            "a_mean": arr(self.a_mean),
            "n_reps": self.n_reps,
            "meta": _jsonable(self.meta),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# bases and directional variances


def _bases(W: np.ndarray, C: np.ndarray, check_rank: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stacked subspace bases. W is (B,N,M) (exposures as columns), C is (B,N,N).

    Returns directions P (B,N,N) and the confined eigenvalues (B,N), which equal the
    directional variances of C along P.
    """
    B, N, M = W.shape
    Q, R = np.linalg.qr(W, mode="complete")
    if check_rank:
        rdiag = np.abs(np.einsum("bii->bi", R[:, :M, :M]))
        scale = np.max(np.abs(W), axis=(1, 2))
        if np.any(rdiag <= 1e-12 * N * np.maximum(scale, np.finfo(float).tiny)[:, None]):
            raise RankDeficiencyError("exposure matrix is rank deficient; factor directions not identifiable")
    P = np.empty_like(Q)
    lam = np.empty((B, N))
    for lo, hi in ((0, M), (M, N)):
        if hi == lo:
            continue
        Q0 = Q[:, :, lo:hi]
        confined = Q0.transpose(0, 2, 1) @ C @ Q0
        confined = 0.5 * (confined + confined.transpose(0, 2, 1))
        ev, V = np.linalg.eigh(confined)
        ev, V = ev[:, ::-1], V[:, :, ::-1]
        P[:, :, lo:hi] = Q0 @ V
        lam[:, lo:hi] = ev
    return P, lam


def subspace_bases(params: FactorModelParams, cov: CovarianceEstimate | np.ndarray) -> SubspaceBasis:
    """Eigenbases of ``cov`` confined to the row span of the exposures and to its complement.

    Within each block the directions are sorted by decreasing directional variance.
    """
    C = as_matrix(cov)
    N = params.n_assets
    if C.shape != (N, N):
        raise DimensionError(f"covariance shape {C.shape} does not match {N} assets")
    if params.n_factors >= N:
        raise DimensionError("need fewer factors than assets")
    P, _ = _bases(params.mixing.T[None], C[None])
    return SubspaceBasis(P[0], params.n_factors)


def directional_variances(cov: CovarianceEstimate | np.ndarray, basis: SubspaceBasis | np.ndarray) -> np.ndarray:
    """``p_i' C p_i`` for every basis column ``p_i``."""
    C = as_matrix(cov)
    P = basis.directions if isinstance(basis, SubspaceBasis) else np.asarray(basis)
    if P.shape[0] != C.shape[0]:
        raise DimensionError("basis and covariance dimensions differ")
    return np.einsum("ni,nm,mi->i", P, C, P)


def systematic_error_ratios(
    cov_est: CovarianceEstimate | np.ndarray,
    cov_true: CovarianceEstimate | np.ndarray,
    basis: SubspaceBasis,
) -> np.ndarray:
    """Estimated over true directional variance along each basis direction (one replication)."""
    true = directional_variances(cov_true, basis)
    if np.any(true <= 0):
        raise DegeneracyError("true directional variance is zero along some direction")
    return directional_variances(cov_est, basis) / true


# ---------------------------------------------------------------------------
# correction factors


def _stack_params(params: Sequence[FactorModelParams]) -> tuple[np.ndarray, np.ndarray]:
    W = np.stack([p.mixing.T for p in params])
    D = np.stack([p.noise_var for p in params])
    return W, D


def _cov_from(W: np.ndarray, D: np.ndarray) -> np.ndarray:
    C = W @ W.transpose(0, 2, 1)
    idx = np.arange(C.shape[1])
    C[:, idx, idx] += D
    return C


def _resample_jobs(
    params_list: Sequence[FactorModelParams],
    T: int,
    K: int,
    opts: EmOptions,
    seeds: Sequence[SeedLike],
) -> np.ndarray:
    """Refit K resamples per generating model; returns ratio array (len(params_list), K, N)."""
    n_models = len(params_list)
    N = params_list[0].n_assets
    M = params_list[0].n_factors
    jobs = [(g, k) for g in range(n_models) for k in range(K)]
    gauss = NoiseDistribution()
    ratios = np.empty((n_models, K, N))
    gen_cov = np.stack([p.covariance_matrix() for p in params_list])
    for start in range(0, len(jobs), _CHUNK):
        chunk = jobs[start : start + _CHUNK]
        attempts = [0] * len(chunk)
        fitted: list[FactorModelParams | None] = [None] * len(chunk)
        pending = list(range(len(chunk)))
        while pending:
            S = np.empty((len(pending), N, N))
            for row, j in enumerate(pending):
                g, k = chunk[j]
                r = _simulate(params_list[g], T, gauss, make_rng(seeds[g], k, attempts[j]))
                S[row] = _ml_scatter(r)
            Tvec = np.full(len(pending), T, dtype=float)
            fits, _ = _fit_from_scatter(S, Tvec, M, opts)
            retry = []
            for row, j in enumerate(pending):
                if fits[row] is None:
                    attempts[j] += 1
                    if attempts[j] >= _MAX_RETRIES:
                        raise DvaCovError(f"resample fit failed {_MAX_RETRIES} times")
                    logger.warning("resample %s fit failed; retrying with a fresh seed", chunk[j])
                    retry.append(j)
                else:
                    fitted[j] = fits[row]
            pending = retry
        W, D = _stack_params(fitted)
        P, lam = _bases(W, _cov_from(W, D), check_rank=False)
        gidx = np.array([g for g, _ in chunk])
        denom = np.einsum("bni,bnm,bmi->bi", P, gen_cov[gidx], P)
        for row, (g, k) in enumerate(chunk):
            ratios[g, k] = lam[row] / denom[row]
    return ratios


def _finish_factors(raw: np.ndarray, K: int, clamp: tuple[float, float]) -> CorrectionFactors:
    lo, hi = clamp
    s = np.clip(raw, lo, hi)
    clamped = np.flatnonzero((raw < lo) | (raw > hi))
    if len(clamped):
        logger.info("clamped %d correction factors to [%g, %g]", len(clamped), lo, hi)
    return CorrectionFactors(s, K, {"raw": raw, "clamped": clamped.tolist(), "n_clamped": int(len(clamped))})


def dva_correction_factors_many(
    params_list: Sequence[FactorModelParams],
    T: int,
    K: int = DEFAULT_K,
    em_opts: EmOptions | None = None,
    seeds: Sequence[SeedLike] | None = None,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> list[CorrectionFactors]:
    """Correction factors for several fitted models at once (resample fits share EM batches)."""
    if K < 1:
        raise DvaCovError("K must be >= 1")
    if not params_list:
        return []
    shapes = {(p.n_factors, p.n_assets) for p in params_list}
    if len(shapes) != 1:
        raise DimensionError("all models must share (M, N) to be processed together")
    em_opts = em_opts or EmOptions()
    seeds = list(seeds) if seeds is not None else list(range(len(params_list)))
    ratios = _resample_jobs(params_list, T, K, em_opts, seeds)
    # fixed-order mean over k
    return [_finish_factors(ratios[g].mean(axis=0), K, clamp) for g in range(len(params_list))]


def dva_correction_factors(
    params: FactorModelParams,
    T: int,
    K: int = DEFAULT_K,
    em_opts: EmOptions | None = None,
    seed: SeedLike = 0,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> CorrectionFactors:
    """Mean over K resample fits of refit / generator directional variance per direction."""
    return dva_correction_factors_many([params], T, K, em_opts, [seed], clamp)[0]


def dva_adjust(
    params: FactorModelParams | np.ndarray | CovarianceEstimate,
    factors: CorrectionFactors | np.ndarray,
    basis: SubspaceBasis,
    *,
    literal_sign: bool = False,
) -> CovarianceEstimate:
    """Rescale the variance of the model covariance along each basis direction by ``1 / S_i``.

    ``C + sum_i (1/S_i - 1) p_i p_i' C p_i p_i'`` so that ``p_i' C_dva p_i = p_i' C p_i / S_i``.
    ``literal_sign=True`` uses the coefficient ``1 - 1/S_i`` instead (kept for comparison
    only; it pushes variances the wrong way).
    """
    if isinstance(params, FactorModelParams):
        C = params.covariance_matrix()
    else:
        C = as_matrix(params)
    s = factors.s if isinstance(factors, CorrectionFactors) else np.asarray(factors, dtype=float)
    P = basis.directions
    N = C.shape[0]
    if P.shape != (N, N) or s.shape != (N,):
        raise DimensionError(f"basis {P.shape} / factors {s.shape} do not match covariance of size {N}")
    coef = (1.0 - 1.0 / s) if literal_sign else (1.0 / s - 1.0)
    sigma2 = np.einsum("ni,nm,mi->i", P, C, P)
    out = C + (P * (coef * sigma2)) @ P.T
    out = 0.5 * (out + out.T)
    meta: dict[str, Any] = {"psd_repaired": False}
    evals, evecs = np.linalg.eigh(out)
    if evals[0] < 0:
        logger.warning("DVA covariance indefinite (min eigenvalue %.3g); projecting to PSD", evals[0])
        out = (evecs * np.maximum(evals, 0.0)) @ evecs.T
        out = 0.5 * (out + out.T)
        meta["psd_repaired"] = True
    meta["s"] = s
    return CovarianceEstimate(out, EstimatorTag.DVA_FACTOR_ANALYSIS, meta)


def dva_covariance(
    panel: ReturnsPanel | np.ndarray,
    M: int,
    K: int = DEFAULT_K,
    em_opts: EmOptions | None = None,
    seed: SeedLike = 0,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> CovarianceEstimate:
    """Fit FA to ``panel`` and return its directional-variance-adjusted covariance."""
    r = as_returns(panel)
    params, trace = fa_fit_em(r, M, em_opts)
    factors = dva_correction_factors(params, r.shape[0], K, em_opts, seed, clamp)
    est = _adjust_fitted(params, factors)
    est.meta.update({"K": K, "n_clamped": factors.meta["n_clamped"], "em_iterations": trace.iterations})
    return est


def _adjust_fitted(params: FactorModelParams, factors: CorrectionFactors) -> CovarianceEstimate:
    C = params.covariance_matrix()
    basis = subspace_bases(params, C)
    est = dva_adjust(C, factors, basis)
    est.meta["basis"] = basis
    return est


# ---------------------------------------------------------------------------
# Monte-Carlo bias studies


def _summarise(ratios: np.ndarray, meta: dict[str, Any]) -> BiasReport:
    n = ratios.shape[0]
    if n == 0:
        nan = np.full(ratios.shape[1], np.nan)
        return BiasReport(nan, nan, nan, 0, ratios, meta)
    s_std = ratios.std(axis=0, ddof=1) if n > 1 else np.full(ratios.shape[1], np.nan)
    return BiasReport(ratios.mean(axis=0), s_std, np.abs(ratios - 1.0).mean(axis=0), n, ratios, meta)


def compare_bias(
    generator: FactorModelParams,
    T: int,
    M_fit: int,
    n_reps: int = 150,
    opts: EmOptions | None = None,
    seed: SeedLike = 0,
    K: int | None = DEFAULT_K,
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> dict[str, BiasReport]:
    """Bias study for plain FA and (if ``K``) DVA-FA on the same replications.

    Replication ``rep`` draws its panel from seed ``(seed, rep)``; the DVA resamples of
    that replication use ``(seed, rep, 1)``.
    """
    if n_reps < 1:
        raise DvaCovError("n_reps must be >= 1")
    opts = opts or EmOptions()
    C_true = generator.covariance_matrix()
    base = [int(s) for s in np.atleast_1d(seed)] if seed is not None else [0]
    gauss = NoiseDistribution()
    S = np.stack([_ml_scatter(_simulate(generator, T, gauss, make_rng(base + [rep]))) for rep in range(n_reps)])
    fits, traces = _fit_from_scatter(S, np.full(n_reps, T, dtype=float), M_fit, opts)
    ok = [rep for rep in range(n_reps) if fits[rep] is not None]
    skipped = [rep for rep in range(n_reps) if fits[rep] is None]
    bases = {}
    for rep in list(ok):
        try:
            bases[rep] = subspace_bases(fits[rep], fits[rep].covariance_matrix())
        except RankDeficiencyError:
            ok.remove(rep)
            skipped.append(rep)
    meta = {"T": T, "M_fit": M_fit, "skipped": sorted(skipped), "n_skipped": len(skipped)}
    fa_ratios = np.array(
        [systematic_error_ratios(fits[rep].covariance_matrix(), C_true, bases[rep]) for rep in ok]
    ).reshape(len(ok), generator.n_assets)
    out = {"fa": _summarise(fa_ratios, dict(meta))}
    if K:
        factors = dva_correction_factors_many(
            [fits[rep] for rep in ok], T, K, opts, [base + [rep, 1] for rep in ok], clamp
        )
        dva_ratios = []
        n_clamped = 0
        n_repaired = 0
        for rep, fac in zip(ok, factors):
            est = dva_adjust(fits[rep].covariance_matrix(), fac, bases[rep])
            n_clamped += fac.meta["n_clamped"]
            n_repaired += int(est.meta["psd_repaired"])
            dva_ratios.append(systematic_error_ratios(est, C_true, bases[rep]))
        dmeta = dict(meta, K=K, n_clamped=n_clamped, n_psd_repaired=n_repaired)
        out["dva"] = _summarise(np.array(dva_ratios).reshape(len(ok), generator.n_assets), dmeta)
    return out


def run_bias_study(
    generator: FactorModelParams,
    T: int,
    M_fit: int,
    n_reps: int = 150,
    opts: EmOptions | None = None,
    seed: SeedLike = 0,
    *,
    method: str = "fa",
    K: int = DEFAULT_K,
) -> BiasReport:
    """Monte-Carlo systematic error of FA (``method="fa"``) or DVA-FA (``method="dva"``)."""
    if method not in ("fa", "dva"):
        raise DvaCovError(f"unknown method {method!r}")
    return compare_bias(generator, T, M_fit, n_reps, opts, seed, K if method == "dva" else None)[method]
