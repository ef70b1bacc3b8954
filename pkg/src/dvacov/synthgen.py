"""Synthetic return panels from known factor models and random-matrix reference values.

Panels follow ``r_t = f_t X + e_t`` with standard normal factors. The idiosyncratic
noise is either Gaussian or Student-t rescaled to the requested variance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from .core import (
    CovarianceEstimate,
    EstimatorTag,
    FactorModelParams,
    ReturnsPanel,
    SeedLike,
    make_rng,
)
from .errors import DimensionError, DomainError

__all__ = [
    "NoiseDistribution",
    "GeneratorSpec",
    "MPSupport",
    "make_generator_params",
    "true_covariance",
    "generate_panel",
    "student_t_dof",
    "t_excess_kurtosis",
    "pearson_to_kg",
    "sample_scaled_t",
    "marchenko_pastur_support",
    "write_panel_csv",
]


@dataclass(frozen=True)
class NoiseDistribution:
    """Idiosyncratic noise law: ``gaussian`` or ``student_t`` with kurtosis parameter ``kurtosis``.

    ``kurtosis`` is the k_g of ``nu = 6 / k_g + 4``, i.e. the excess kurtosis of the
    resulting t law (Gaussian corresponds to k_g -> 0).
    """

    kind: str = "gaussian"
    kurtosis: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "student_t"):
            raise DomainError(f"unknown noise distribution {self.kind!r}")
        if self.kind == "student_t":
            k = self.kurtosis
            if k is None or not math.isfinite(k) or k <= 0:
                raise DomainError(f"student_t kurtosis must be positive and finite, got {k!r}")

    @property
    def dof(self) -> float | None:
        return None if self.kind == "gaussian" else student_t_dof(self.kurtosis)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "gaussian":
            return {"type": "gaussian"}
        return {"type": "student_t", "kurtosis": self.kurtosis}

    @classmethod
    def from_dict(cls, data: dict[str, Any] | str | None) -> "NoiseDistribution":
        if data is None:
            return cls()
        if isinstance(data, str):
            return cls(data)
        return cls(data.get("type", "gaussian"), data.get("kurtosis"))


@dataclass(frozen=True)
class GeneratorSpec:
    n_assets: int
    n_obs: int
    factor_strengths: tuple[float, ...]
    noise_variances: tuple[float, ...] | None = None
    noise_range: tuple[float, float] | None = (0.5, 1.5)
    noise_distribution: NoiseDistribution = field(default_factory=NoiseDistribution)
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.n_assets) < 1 or int(self.n_obs) < 1:
            raise DomainError("n_assets and n_obs must be positive")
        strengths = tuple(float(s) for s in self.factor_strengths)
        if any(not (s > 0 and math.isfinite(s)) for s in strengths):
            raise DomainError("every factor strength must be positive")
        object.__setattr__(self, "factor_strengths", strengths)
        if self.noise_variances is not None:
            nv = tuple(float(v) for v in self.noise_variances)
            if len(nv) != self.n_assets:
                raise DimensionError(f"{len(nv)} noise variances for {self.n_assets} assets")
            if any(not (v > 0) for v in nv):
                raise DomainError("noise variances must be positive")
            object.__setattr__(self, "noise_variances", nv)
            object.__setattr__(self, "noise_range", None)
        else:
            if self.noise_range is None:
                raise DomainError("either noise_variances or noise_range is required")
            lo, hi = (float(v) for v in self.noise_range)
            if not (0 < lo <= hi):
                raise DomainError(f"noise range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")
            object.__setattr__(self, "noise_range", (lo, hi))
        if not isinstance(self.noise_distribution, NoiseDistribution):
            object.__setattr__(self, "noise_distribution", NoiseDistribution.from_dict(self.noise_distribution))

    def noise_vector(self) -> np.ndarray:
        if self.noise_variances is not None:
            return np.array(self.noise_variances)
        lo, hi = self.noise_range
        return np.linspace(lo, hi, self.n_assets)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "n_assets": self.n_assets,
            "n_obs": self.n_obs,
            "factor_strengths": list(self.factor_strengths),
        }
        if self.noise_variances is not None:
            out["noise_variances"] = list(self.noise_variances)
        else:
            out["noise_range"] = list(self.noise_range)
        out["noise_distribution"] = self.noise_distribution.to_dict()
        out["seed"] = self.seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GeneratorSpec":
        nv = data.get("noise_variances")
        return cls(
            n_assets=int(data["n_assets"]),
            n_obs=int(data["n_obs"]),
            factor_strengths=tuple(data["factor_strengths"]),
            noise_variances=tuple(nv) if nv is not None else None,
            noise_range=tuple(data.get("noise_range", (0.5, 1.5))) if nv is None else None,
            noise_distribution=NoiseDistribution.from_dict(data.get("noise_distribution")),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSpec":
        return cls.from_dict(json.loads(text))


def make_generator_params(spec: GeneratorSpec) -> FactorModelParams:
    """Draw randomly oriented exposure rows with the requested lengths."""
    M, N = len(spec.factor_strengths), spec.n_assets
    if M > N:
        raise DimensionError(f"{M} factors requested for {N} assets")
    rng = make_rng(spec.seed)
    mixing = np.empty((M, N))
    for m, strength in enumerate(spec.factor_strengths):
        v = rng.standard_normal(N)
        norm = np.linalg.norm(v)
        while norm == 0.0:  # probability zero, but keep the normalisation safe
            v = rng.standard_normal(N)
            norm = np.linalg.norm(v)
        mixing[m] = strength * v / norm
    return FactorModelParams(mixing, spec.noise_vector())


def true_covariance(params: FactorModelParams) -> CovarianceEstimate:
    return CovarianceEstimate(params.covariance_matrix(), EstimatorTag.TRUE_MODEL)


def generate_panel(
    params: FactorModelParams,
    T: int,
    dist: NoiseDistribution | str | None = None,
    seed: SeedLike = 0,
    *,
    asset_ids: Sequence[str] = (),
) -> ReturnsPanel:
    """Simulate ``T`` observations of the factor model (zero-mean process)."""
    if T < 1:
        raise DomainError("T must be at least 1")
    if not isinstance(dist, NoiseDistribution):
        dist = NoiseDistribution.from_dict(dist)
    return ReturnsPanel(_simulate(params, T, dist, make_rng(seed)), tuple(asset_ids))


def _simulate(params: FactorModelParams, T: int, dist: NoiseDistribution, rng: np.random.Generator) -> np.ndarray:
    M, N = params.mixing.shape
    factors = rng.standard_normal((T, M))
    if dist.kind == "gaussian":
        noise = rng.standard_normal((T, N))
    else:
        noise = _scaled_t(rng, dist.dof, (T, N))
    return factors @ params.mixing + noise * np.sqrt(params.noise_var)


def student_t_dof(kurtosis: float) -> float:
    """Degrees of freedom of a t law whose kurtosis parameter is ``kurtosis``: ``6/k + 4``."""
    if not kurtosis > 0 or not math.isfinite(kurtosis):
        raise DomainError(f"kurtosis must be positive and finite, got {kurtosis!r}")
    return 6.0 / kurtosis + 4.0


def t_excess_kurtosis(dof: float) -> float:
    """Excess kurtosis ``6 / (nu - 4)`` of a t law; inverse of :func:`student_t_dof`."""
    if not dof > 4:
        raise DomainError(f"kurtosis of a t law is finite only for dof > 4, got {dof!r}")
    return 6.0 / (dof - 4.0)


def pearson_to_kg(kurtosis: float) -> float:
    """Convert Pearson (non-excess) kurtosis to the ``k_g`` argument of :func:`student_t_dof`."""
    return kurtosis - 3.0


def _scaled_t(rng: np.random.Generator, dof: float, size) -> np.ndarray:
    return rng.standard_t(dof, size=size) / math.sqrt(dof / (dof - 2.0))


def sample_scaled_t(dof: float, variance: float, rows: int, cols: int, seed: SeedLike = 0) -> np.ndarray:
    """i.i.d. Student-t draws rescaled to have the requested variance."""
    if not dof > 2:
        raise DomainError(f"variance of a t law exists only for dof > 2, got {dof!r}")
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance!r}")
    return _scaled_t(make_rng(seed), dof, (rows, cols)) * math.sqrt(variance)


class MPSupport(NamedTuple):
    lower: float
    upper: float
    zero_mass: float


def marchenko_pastur_support(q: float) -> MPSupport:
    """Support edges of the Marchenko-Pastur law for sample size / dimension ratio ``q``.

    For ``q < 1`` a fraction ``1 - q`` of the eigenvalues sits at zero.
    """
    if not q > 0:
        raise DomainError(f"q must be positive, got {q!r}")
    r = math.sqrt(1.0 / q)
    return MPSupport((1.0 - r) ** 2, (1.0 + r) ** 2, max(0.0, 1.0 - q))


def write_panel_csv(panel: ReturnsPanel, path: str | Path) -> None:
    """Write ``date,<asset_id>...`` header plus one row per time step (round-trip exact)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", *panel.asset_ids])
        for label, row in zip(panel.time_index, panel.returns):
            writer.writerow([str(label), *(repr(float(x)) for x in row)])
