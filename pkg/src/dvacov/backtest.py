"""Rolling-window out-of-sample evaluation of covariance estimators via minimum-variance portfolios.

For every out-of-sample day ``t`` each of ``J`` fixed asset subsets gets weights built
from the ``window`` days strictly before ``t``; the realised deviation
``w' (r_t - rbar)`` (``rbar`` = trailing mean over the same window) is squared and
absolute-valued, averaged over subsets, then over days.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import ReturnsPanel, SeedLike, as_returns, make_rng
from .dva import _adjust_fitted, _jsonable, dva_correction_factors_many
from .errors import ConditioningError, DataError, DimensionError, DomainError, DvaCovError
from .estimators import (
    EmOptions,
    exogenous_factor_covariance,
    fa_fit_em_batch,
    sample_covariance,
    shrinkage_covariance,
)
from .portfolio import (
    DiversificationMetric,
    min_variance_weights,
    regularized_min_variance,
    resampled_weights_path,
)

logger = logging.getLogger(__name__)

__all__ = [
    "EstimatorSpec",
    "BacktestConfig",
    "BacktestReport",
    "BacktestError",
    "subset_sample",
    "run_backtest",
    "run_lambda_sweep",
    "significance_randomization",
    "load_returns_csv",
    "write_report",
    "write_sweep_csv",
]

ESTIMATOR_KINDS = ("sample", "shrinkage", "fa", "dva_fa", "exogenous", "resampled", "oracle")
MAX_SKIP_FRACTION = 0.01


class BacktestError(DvaCovError):
    """Too many estimator failures for the averages to be comparable."""


@dataclass(frozen=True)
class EstimatorSpec:
    """Which covariance estimator a backtest uses, plus its settings.

    ``oracle`` plugs in a known covariance (synthetic studies only); ``exogenous``
    needs factor series supplied to :func:`run_backtest`.
    """

    kind: str = "sample"
    n_factors: int = 7
    K: int = 100
    em: EmOptions = field(default_factory=EmOptions)
    target: str = "single_index"
    intensity: float | str = "auto"
    n_resamples: int = 100
    name: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ESTIMATOR_KINDS:
            raise DomainError(f"unknown estimator {self.kind!r}; expected one of {ESTIMATOR_KINDS}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind in ("fa", "dva_fa"):
            return f"{self.kind}({self.n_factors})"
        return self.kind

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.kind}
        if self.kind in ("fa", "dva_fa"):
            out.update(n_factors=self.n_factors, em=self.em.to_dict())
        if self.kind == "dva_fa":
            out["K"] = self.K
        if self.kind == "shrinkage":
            out.update(target=self.target, intensity=self.intensity)
        if self.kind == "resampled":
            out["n_resamples"] = self.n_resamples
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | str) -> "EstimatorSpec":
        if isinstance(data, str):
            return cls(kind=data)
        return cls(
            kind=data.get("type", "sample"),
            n_factors=int(data.get("n_factors", 7)),
            K=int(data.get("K", 100)),
            em=EmOptions.from_dict(data.get("em")),
            target=data.get("target", "single_index"),
            intensity=data.get("intensity", "auto"),
            n_resamples=int(data.get("n_resamples", 100)),
            name=data.get("name"),
        )


@dataclass(frozen=True)
class BacktestConfig:
    window: int = 150
    subset_size: int = 100
    n_subsets: int = 1000
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    lambdas: tuple[float, ...] | None = None
    rebalance_every: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.window < 2:
            raise DomainError("window must be >= 2")
        if self.subset_size < 1 or self.n_subsets < 1:
            raise DomainError("subset_size and n_subsets must be positive")
        if self.rebalance_every < 1:
            raise DomainError("rebalance_every must be >= 1")
        if self.lambdas is not None:
            lams = tuple(float(x) for x in self.lambdas)
            if not lams or any(not (x >= 0) for x in lams):
                raise DomainError("ridge lambdas must be a non-empty list of values >= 0")
            object.__setattr__(self, "lambdas", lams)

    @property
    def solve_lambdas(self) -> tuple[float, ...]:
        return self.lambdas if self.lambdas is not None else (0.0,)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "window": self.window,
            "subset_size": self.subset_size,
            "n_subsets": self.n_subsets,
            "estimator": self.estimator.to_dict(),
            "rebalance_every": self.rebalance_every,
            "seed": self.seed,
        }
        if self.lambdas is None:
            out["regularization"] = {"type": "none"}
        elif len(self.lambdas) == 1:
            out["regularization"] = {"type": "ridge", "lambda": self.lambdas[0]}
        else:
            out["regularization"] = {"type": "ridge_path", "lambdas": list(self.lambdas)}
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BacktestConfig":
        reg = data.get("regularization") or {"type": "none"}
        kind = reg.get("type", "none")
        if kind == "none":
            lambdas = None
        elif kind == "ridge":
            lambdas = (float(reg["lambda"]),)
        elif kind == "ridge_path":
            lambdas = tuple(float(x) for x in reg["lambdas"])
        else:
            raise DomainError(f"unknown regularization {kind!r}")
        return cls(
            window=int(data.get("window", 150)),
            subset_size=int(data.get("subset_size", 100)),
            n_subsets=int(data.get("n_subsets", 1000)),
            estimator=EstimatorSpec.from_dict(data.get("estimator", "sample")),
            lambdas=lambdas,
            rebalance_every=int(data.get("rebalance_every", 1)),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class BacktestReport:
    estimator: str
    realized_variance: float
    realized_mad: float
    per_period_sq: np.ndarray
    per_period_abs: np.ndarray
    per_lambda: dict[float, tuple[float, float]] = field(default_factory=dict)
    per_lambda_series: dict[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_periods(self) -> int:
        return len(self.per_period_sq)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "estimator": self.estimator,
            "realized_variance": self.realized_variance,
            "realized_mad": self.realized_mad,
            "per_period": {"squared": self.per_period_sq.tolist(), "absolute": self.per_period_abs.tolist()},
            "meta": _jsonable(self.meta),
        }
        if self.per_lambda:
            out["per_lambda"] = [
                {"lambda": lam, "variance": v, "mad": m} for lam, (v, m) in self.per_lambda.items()
            ]
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BacktestReport":
        per_lambda = {float(e["lambda"]): (float(e["variance"]), float(e["mad"])) for e in data.get("per_lambda", [])}
        return cls(
            estimator=data["estimator"],
            realized_variance=float(data["realized_variance"]),
            realized_mad=float(data["realized_mad"]),
            per_period_sq=np.asarray(data["per_period"]["squared"], dtype=float),
            per_period_abs=np.asarray(data["per_period"]["absolute"], dtype=float),
            per_lambda=per_lambda,
            meta=dict(data.get("meta", {})),
        )


# ---------------------------------------------------------------------------


def subset_sample(n_total: int, n: int, J: int, seed: SeedLike = 0) -> list[np.ndarray]:
    """``J`` independent uniformly drawn index sets of size ``n`` (sorted within each set)."""
    if n > n_total:
        raise DomainError(f"subset size {n} exceeds universe of {n_total}")
    if n < 1 or J < 1:
        raise DomainError("subset size and count must be positive")
    rng = make_rng(seed, 1)
    return [np.sort(rng.choice(n_total, size=n, replace=False)) for _ in range(J)]


class _Context:
    def __init__(self, spec: EstimatorSpec, factor_series, true_cov, seed):
        self.spec = spec
        self.factor_series = None if factor_series is None else np.asarray(factor_series, dtype=float)
        self.true_cov = None if true_cov is None else np.asarray(true_cov, dtype=float)
        self.seed = seed


def _estimate(ctx: _Context, windows: np.ndarray, subsets, rows: slice, step: int):
    """Covariances (or resampled weight lists) for every subset; ``None`` marks a failure."""
    spec = ctx.spec
    J = len(subsets)
    out: list[Any] = [None] * J
    if spec.kind in ("fa", "dva_fa"):
        try:
            params, _ = fa_fit_em_batch(windows, spec.n_factors, spec.em)
        except DvaCovError as exc:
            logger.warning("FA fit failed at step %d: %s", step, exc)
            return out
        if spec.kind == "fa":
            return [None if p is None else p.covariance_matrix() for p in params]
        ok = [j for j in range(J) if params[j] is not None]
        factors = dva_correction_factors_many(
            [params[j] for j in ok],
            windows.shape[1],
            spec.K,
            spec.em,
            [[int(ctx.seed), 2, step, j] for j in ok],
        )
        for j, fac in zip(ok, factors):
            try:
                out[j] = _adjust_fitted(params[j], fac).matrix
            except DvaCovError as exc:
                logger.warning("DVA failed for subset %d at step %d: %s", j, step, exc)
        return out
    for j in range(J):
        win = windows[j]
        try:
            if spec.kind == "sample":
                out[j] = sample_covariance(win).matrix
            elif spec.kind == "shrinkage":
                out[j] = shrinkage_covariance(win, spec.target, spec.intensity).matrix
            elif spec.kind == "exogenous":
                if ctx.factor_series is None:
                    raise DomainError("exogenous estimator needs factor series")
                out[j] = exogenous_factor_covariance(win, ctx.factor_series[rows]).matrix
            elif spec.kind == "oracle":
                if ctx.true_cov is None:
                    raise DomainError("oracle estimator needs the true covariance")
                out[j] = ctx.true_cov[np.ix_(subsets[j], subsets[j])]
            elif spec.kind == "resampled":
                out[j] = ("resampled", win)
        except DomainError:
            raise
        except DvaCovError as exc:
            logger.warning("estimator %s failed for subset %d at step %d: %s", spec.kind, j, step, exc)
    return out


def _weights(ctx: _Context, est, window: np.ndarray, lambdas: Sequence[float], step: int, j: int):
    if isinstance(est, tuple):
        ws = resampled_weights_path(window, ctx.spec.n_resamples, [int(ctx.seed), 3, step, j], lambdas)
        return [w.w for w in ws]
    out = []
    metric = None
    for lam in lambdas:
        if lam == 0:
            out.append(min_variance_weights(est).w)
        else:
            if metric is None:
                metric = DiversificationMetric(window.var(axis=0, ddof=1))
            out.append(regularized_min_variance(est, metric, lam).w)
    return out


def _run(panel, config: BacktestConfig, factor_series=None, true_cov=None) -> BacktestReport:
    r = as_returns(panel)
    T, N = r.shape
    w = config.window
    if T <= w + 1:
        raise DomainError(f"need T > window + 1 (T={T}, window={w})")
    if config.subset_size > N:
        raise DomainError(f"subset size {config.subset_size} exceeds {N} assets")
    if factor_series is not None and np.asarray(factor_series).shape[0] != T:
        raise DimensionError("factor series must have one row per panel row")
    subsets = subset_sample(N, config.subset_size, config.n_subsets, config.seed)
    lambdas = config.solve_lambdas
    ctx = _Context(config.estimator, factor_series, true_cov, config.seed)
    n_periods = T - w
    J = len(subsets)
    sq = np.full((len(lambdas), n_periods, J), np.nan)
    ab = np.full((len(lambdas), n_periods, J), np.nan)
    weights: list[list[np.ndarray] | None] = [None] * J
    n_failed = 0
    n_rebalances = 0
    for p in range(n_periods):
        t = w + p
        rows = slice(t - w, t)
        past = r[rows]
        if p % config.rebalance_every == 0:
            n_rebalances += 1
            windows = np.stack([past[:, s] for s in subsets])
            ests = _estimate(ctx, windows, subsets, rows, p)
            for j in range(J):
                weights[j] = None
                if ests[j] is None:
                    continue
                try:
                    weights[j] = _weights(ctx, ests[j], windows[j], lambdas, p, j)
                except ConditioningError as exc:
                    logger.warning("solver failed for subset %d at step %d: %s", j, p, exc)
        rbar = past.mean(axis=0)
        dev_t = r[t] - rbar
        for j, s in enumerate(subsets):
            if weights[j] is None:
                n_failed += 1
                continue
            d = dev_t[s]
            for li, wv in enumerate(weights[j]):
                x = float(wv @ d)
                sq[li, p, j] = x * x
                ab[li, p, j] = abs(x)
    skip_frac = n_failed / (n_periods * J)
    if skip_frac > MAX_SKIP_FRACTION:
        raise BacktestError(f"{config.estimator.label}: {skip_frac:.2%} of subset-periods failed")
    with np.errstate(invalid="ignore"):
        per_sq = np.nanmean(sq, axis=2) if n_failed else sq.mean(axis=2)
        per_ab = np.nanmean(ab, axis=2) if n_failed else ab.mean(axis=2)
    per_lambda = {}
    per_lambda_series = {}
    for li, lam in enumerate(lambdas):
        per_lambda[lam] = (float(np.nanmean(per_sq[li])), float(np.nanmean(per_ab[li])))
        per_lambda_series[lam] = (per_sq[li], per_ab[li])
    meta = {
        "config": config.to_dict(),
        "n_periods": n_periods,
        "n_rebalances": n_rebalances,
        "n_skipped": n_failed,
        "skip_fraction": skip_frac,
    }
    return BacktestReport(
        estimator=config.estimator.label,
        realized_variance=per_lambda[lambdas[0]][0],
        realized_mad=per_lambda[lambdas[0]][1],
        per_period_sq=per_sq[0],
        per_period_abs=per_ab[0],
        per_lambda=per_lambda if config.lambdas is not None else {},
        per_lambda_series=per_lambda_series if config.lambdas is not None else {},
        meta=meta,
    )


def run_backtest(
    panel: ReturnsPanel | np.ndarray,
    config: BacktestConfig,
    *,
    factor_series: np.ndarray | None = None,
    true_cov: np.ndarray | None = None,
) -> BacktestReport:
    """Rolling out-of-sample backtest; weights for day ``t`` use only rows before ``t``.

    With ``config.lambdas`` set, the first value is the reported ridge strength.
    Covariances are re-estimated every ``config.rebalance_every`` days (default daily);
    the trailing mean is updated every day.
    """
    return _run(panel, config, factor_series, true_cov)


def run_lambda_sweep(
    panel: ReturnsPanel | np.ndarray,
    config: BacktestConfig,
    *,
    factor_series: np.ndarray | None = None,
    true_cov: np.ndarray | None = None,
) -> BacktestReport:
    """Backtest every ridge strength in ``config.lambdas`` on shared covariance estimates."""
    if config.lambdas is None:
        raise DomainError("a lambda sweep needs config.lambdas")
    return _run(panel, config, factor_series, true_cov)


# ---------------------------------------------------------------------------


def significance_randomization(
    per_period_a: Sequence[float], per_period_b: Sequence[float], n_perm: int = 10_000, seed: SeedLike = 0
) -> float:
    """Two-sided paired sign-flip test on the mean difference, ``(1 + #extreme) / (1 + n_perm)``."""
    a = np.asarray(per_period_a, dtype=float)
    b = np.asarray(per_period_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired series must have equal length, got {a.shape} and {b.shape}")
    if n_perm < 1:
        raise DomainError("n_perm must be >= 1")
    d = a - b
    n = len(d)
    obs = abs(d.mean())
    # small relative slack so sign patterns tying with the observed statistic count as extreme
    thresh = obs * (1.0 - 1e-12)
    rng = make_rng(seed)
    count = 0
    chunk = max(1, min(n_perm, 4_000_000 // max(n, 1)))
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        signs = rng.integers(0, 2, size=(m, n), dtype=np.int8) * 2 - 1
        stats = np.abs(signs @ d) / n
        count += int(np.sum(stats >= thresh))
        done += m
    return (count + 1) / (n_perm + 1)


def _parse_times(labels: list[str], path: Path) -> tuple:
    try:
        return tuple(int(x) for x in labels)
    except ValueError:
        pass
    try:
        return tuple(np.datetime64(x) for x in labels)
    except ValueError as exc:
        raise DataError(f"{path}: unparseable date label ({exc})") from exc


def load_returns_csv(path: str | Path) -> ReturnsPanel:
    """Read a ``date,<asset ids>...`` CSV of decimal returns."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2 or header[0].strip().lower() != "date":
            raise DataError(f"{path}: header must be 'date,<asset_id>,...'")
        ids = [h.strip() for h in header[1:]]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate asset ids in header")
        labels: list[str] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: row {lineno}: non-finite value")
            labels.append(row[0].strip())
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    times = _parse_times(labels, path)
    for k in range(1, len(times)):
        if times[k] == times[k - 1]:
            raise DataError(f"{path}: duplicate date {labels[k]!r} at row {k + 2}")
        if times[k] < times[k - 1]:
            raise DataError(f"{path}: dates not increasing at row {k + 2} ({labels[k - 1]!r} -> {labels[k]!r})")
    return ReturnsPanel(np.array(rows, dtype=float), tuple(ids), times)


def write_report(
    reports: BacktestReport | Mapping[str, BacktestReport],
    path: str | Path,
    fmt: str = "json",
    p_values: Mapping[str, float | None] | None = None,
) -> None:
    """Write a report as JSON (full detail) or a Table-1 style CSV (one row per estimator).

    CSV columns: estimator, mad_x1e3, variance_x1e6, p_vs_reference.
    """
    path = Path(path)
    if isinstance(reports, BacktestReport):
        reports = {reports.estimator: reports}
    p_values = p_values or {}
    try:
        if fmt == "json":
            payload: Any
            if len(reports) == 1:
                payload = next(iter(reports.values())).to_dict()
            else:
                payload = {name: rep.to_dict() for name, rep in reports.items()}
            path.write_text(json.dumps(payload, indent=2, allow_nan=True), encoding="utf-8")
        elif fmt == "csv":
            with path.open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["estimator", "mad_x1e3", "variance_x1e6", "p_vs_reference"])
                for name, rep in reports.items():
                    p = p_values.get(name)
                    writer.writerow(
                        [name, repr(rep.realized_mad * 1e3), repr(rep.realized_variance * 1e6), "" if p is None else repr(p)]
                    )
        else:
            raise DomainError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise DvaCovError(f"cannot write report to {path}: {exc}") from exc


def write_sweep_csv(report: BacktestReport, path: str | Path) -> None:
    """``lambda,mad,variance`` rows for plotting realised risk against ridge strength."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "mad", "variance"])
            for lam, (var, mad) in report.per_lambda.items():
                writer.writerow([repr(lam), repr(mad), repr(var)])
    except OSError as exc:
        raise DvaCovError(f"cannot write sweep to {path}: {exc}") from exc
