"""Core data containers shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence, Union

import numpy as np

from .errors import DataError, DimensionError, DomainError

SeedLike = Union[int, Sequence[int], np.random.SeedSequence, None]


def make_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Return a fresh generator for ``seed`` extended by integer ``keys``.

    Child streams for Monte-Carlo runs are derived as ``make_rng(seed, k)`` so
    that results never depend on evaluation order.
    """
    if isinstance(seed, np.random.SeedSequence):
        base = list(np.atleast_1d(seed.entropy)) + list(seed.spawn_key)
    elif seed is None:
        base = []
    else:
        base = [int(s) for s in np.atleast_1d(seed)]
    entropy = [int(x) & 0xFFFFFFFFFFFFFFFF for x in base] + [int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy if entropy else None))


class EstimatorTag(str, Enum):
    SAMPLE = "sample"
    SHRINKAGE = "shrinkage"
    FACTOR_ANALYSIS = "factor_analysis"
    DVA_FACTOR_ANALYSIS = "dva_factor_analysis"
    EXOGENOUS_FACTOR = "exogenous_factor"
    TRUE_MODEL = "true_model"


@dataclass(frozen=True)
class FactorModelParams:
    """Factor model ``r_t = f_t X + e_t`` with ``f_t ~ N(0, I)`` and ``e_t ~ N(0, diag(noise_var))``.

    ``mixing`` is M x N: row m holds the exposures of all assets to factor m.
    """

    mixing: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self) -> None:
        mixing = np.atleast_2d(np.asarray(self.mixing, dtype=float))
        noise = np.atleast_1d(np.asarray(self.noise_var, dtype=float))
        if mixing.ndim != 2 or noise.ndim != 1:
            raise DimensionError("mixing must be 2-D and noise_var 1-D")
        if mixing.shape[1] != noise.shape[0]:
            raise DimensionError(
                f"mixing has {mixing.shape[1]} columns but noise_var has {noise.shape[0]} entries"
            )
        if mixing.shape[0] > mixing.shape[1]:
            raise DimensionError(f"more factors ({mixing.shape[0]}) than assets ({mixing.shape[1]})")
        if not (np.all(np.isfinite(mixing)) and np.all(np.isfinite(noise))):
            raise DataError("factor model parameters must be finite")
        if np.any(noise <= 0):
            raise DomainError("noise variances must be strictly positive")
        object.__setattr__(self, "mixing", mixing)
        object.__setattr__(self, "noise_var", noise)

    @property
    def n_factors(self) -> int:
        return self.mixing.shape[0]

    @property
    def n_assets(self) -> int:
        return self.mixing.shape[1]

    def covariance_matrix(self) -> np.ndarray:
        cov = self.mixing.T @ self.mixing
        cov[np.diag_indices_from(cov)] += self.noise_var
        return cov

    def subset(self, idx: Sequence[int]) -> "FactorModelParams":
        idx = np.asarray(idx)
        return FactorModelParams(self.mixing[:, idx], self.noise_var[idx])

    def to_dict(self) -> dict[str, Any]:
        return {"mixing": self.mixing.tolist(), "noise_var": self.noise_var.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FactorModelParams":
        return cls(np.asarray(data["mixing"], dtype=float), np.asarray(data["noise_var"], dtype=float))


@dataclass(frozen=True)
class ReturnsPanel:
    """T x N matrix of returns with asset identifiers and a strictly increasing time index."""

    returns: np.ndarray
    asset_ids: tuple[str, ...] = ()
    time_index: tuple[Any, ...] = ()

    def __post_init__(self) -> None:
        r = np.asarray(self.returns, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        if r.ndim != 2:
            raise DimensionError("returns must be a T x N matrix")
        if not np.all(np.isfinite(r)):
            bad = np.argwhere(~np.isfinite(r))[0]
            raise DataError(f"non-finite return at row {bad[0]}, column {bad[1]}")
        T, N = r.shape
        ids = tuple(str(a) for a in self.asset_ids) if len(self.asset_ids) else tuple(f"A{i}" for i in range(N))
        times = tuple(self.time_index) if len(self.time_index) else tuple(range(T))
        if len(ids) != N:
            raise DimensionError(f"{len(ids)} asset ids for {N} columns")
        if len(times) != T:
            raise DimensionError(f"{len(times)} time labels for {T} rows")
        for k in range(1, T):
            if not times[k - 1] < times[k]:
                raise DataError(f"time index not strictly increasing at row {k}: {times[k - 1]!r} -> {times[k]!r}")
        r.setflags(write=False)
        object.__setattr__(self, "returns", r)
        object.__setattr__(self, "asset_ids", ids)
        object.__setattr__(self, "time_index", times)

    @property
    def n_obs(self) -> int:
        return self.returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def columns(self, idx: Sequence[int]) -> "ReturnsPanel":
        idx = np.asarray(idx)
        return ReturnsPanel(self.returns[:, idx], tuple(self.asset_ids[i] for i in idx), self.time_index)

    def rows(self, start: int, stop: int) -> "ReturnsPanel":
        return ReturnsPanel(self.returns[start:stop], self.asset_ids, self.time_index[start:stop])


@dataclass
class CovarianceEstimate:
    """Symmetric N x N covariance matrix tagged with the estimator that produced it."""

    matrix: np.ndarray
    estimator_tag: EstimatorTag = EstimatorTag.SAMPLE
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"covariance must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DataError("covariance contains non-finite entries")
        # stored canonically symmetric; a no-op (bitwise) for already symmetric input
        if not np.array_equal(m, m.T):
            m = 0.5 * (m + m.T)
        self.matrix = m
        self.estimator_tag = EstimatorTag(self.estimator_tag)

    @property
    def n_assets(self) -> int:
        return self.matrix.shape[0]

    def is_psd(self) -> bool:
        n = self.n_assets
        tol = 1e-10 * max(np.trace(self.matrix), 0.0) / n
        return bool(np.linalg.eigvalsh(self.matrix)[0] >= -tol)


def as_returns(data: ReturnsPanel | np.ndarray) -> np.ndarray:
    """Return the raw T x N array behind a panel or array-like."""
    if isinstance(data, ReturnsPanel):
        return data.returns
    r = np.asarray(data, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    if r.ndim != 2:
        raise DimensionError("returns must be a T x N matrix")
    if not np.all(np.isfinite(r)):
        raise DataError("returns contain non-finite values")
    return r


def as_matrix(cov: CovarianceEstimate | np.ndarray) -> np.ndarray:
    if isinstance(cov, CovarianceEstimate):
        return cov.matrix
    return np.asarray(cov, dtype=float)
