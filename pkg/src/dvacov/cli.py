"""Command-line entry point: ``dvacov <subcommand> --config cfg.json --out DIR``.

Every run validates its config before touching the output directory, writes files
atomically, and finishes with a ``manifest.json`` (config hash, seed, version and
output checksums). Exit codes: 0 success, 1 runtime failure, 2 invalid config.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np

from . import __version__
from .backtest import (
    BacktestConfig,
    BacktestReport,
    EstimatorSpec,
    load_returns_csv,
    run_backtest,
    run_lambda_sweep,
    significance_randomization,
)
from .core import FactorModelParams, make_rng
from .dva import _jsonable, compare_bias, dva_correction_factors, dva_adjust, subspace_bases
from .errors import DvaCovError
from .estimators import EmOptions, fa_fit_em, sample_covariance
from .synthgen import (
    GeneratorSpec,
    NoiseDistribution,
    generate_panel,
    make_generator_params,
    marchenko_pastur_support,
    true_covariance,
)

logger = logging.getLogger("dvacov")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

N500_STRENGTHS = [10, 5, 4, 3, 2.5, 2, 1.5, 1]

# --------------------------------------------------------------------------- schemas

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_em = {
    "type": "object",
    "properties": {
        "max_iter": _pos_int,
        "rel_tol": _pos_num,
        "init": {"enum": ["spectral", "seeded_random"]},
        "seed": _seed,
    },
    "additionalProperties": False,
}
_noise_dist = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"type": {"const": "gaussian"}},
            "required": ["type"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {"type": {"const": "student_t"}, "kurtosis": _pos_num},
            "required": ["type", "kurtosis"],
            "additionalProperties": False,
        },
    ]
}
_estimator = {
    "type": "object",
    "properties": {
        "type": {"enum": ["sample", "shrinkage", "fa", "dva_fa", "exogenous", "resampled", "oracle"]},
        "name": {"type": "string"},
        "n_factors": _pos_int,
        "K": _pos_int,
        "em": _em,
        "target": {"enum": ["identity_scaled", "diagonal_variances", "constant_correlation", "single_index"]},
        "intensity": {"oneOf": [{"const": "auto"}, {"type": "number", "minimum": 0, "maximum": 1}]},
        "n_resamples": _pos_int,
    },
    "required": ["type"],
    "additionalProperties": False,
}
_regularization = {
    "type": "object",
    "properties": {
        "type": {"enum": ["none", "ridge", "ridge_path"]},
        "lambda": {"type": "number", "minimum": 0},
        "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
    },
    "required": ["type"],
    "additionalProperties": False,
}
_backtest_common = {
    "returns": {"type": "string"},
    "factors": {"type": "string"},
    "true_covariance": {"type": "string"},
    "window": {"type": "integer", "minimum": 2},
    "subset_size": _pos_int,
    "n_subsets": _pos_int,
    "rebalance_every": _pos_int,
    "seed": _seed,
    "estimators": {"type": "array", "items": _estimator, "minItems": 1},
    "reference": {"type": "string"},
    "n_perm": _pos_int,
}

SCHEMAS: dict[str, dict[str, Any]] = {
    "gen": {
        "type": "object",
        "properties": {
            "n_assets": _pos_int,
            "n_obs": {"oneOf": [_pos_int, {"type": "array", "items": _pos_int, "minItems": 1}]},
            "factor_strengths": {"type": "array", "items": _pos_num},
            "noise_variances": {"type": "array", "items": _pos_num, "minItems": 1},
            "noise_range": {"type": "array", "items": _pos_num, "minItems": 2, "maxItems": 2},
            "noise_distribution": _noise_dist,
            "seed": _seed,
        },
        "required": ["n_assets", "n_obs", "factor_strengths"],
        "not": {"required": ["noise_variances", "noise_range"]},
        "additionalProperties": False,
    },
    "spectrum": {
        "type": "object",
        "properties": {
            "n_assets": _pos_int,
            "ratios": {"type": "array", "items": _pos_num, "minItems": 1},
            "reps": _pos_int,
            "bins": _pos_int,
            "seed": _seed,
        },
        "required": ["n_assets", "ratios"],
        "additionalProperties": False,
    },
    "bias-sim": {
        "type": "object",
        "properties": {
            "protocol": {"enum": ["n30", "n500"]},
            "n_assets": _pos_int,
            "factor_strengths": {"type": "array", "items": _pos_num, "minItems": 1},
            "noise_range": {"type": "array", "items": _pos_num, "minItems": 2, "maxItems": 2},
            "ratios": {"type": "array", "items": _pos_num, "minItems": 1},
            "M_fit": _pos_int,
            "reps": _pos_int,
            "K": _pos_int,
            "em": _em,
            "generator_seed": _seed,
            "seed": _seed,
        },
        "additionalProperties": False,
    },
    "adjust": {
        "type": "object",
        "properties": {
            "returns": {"type": "string"},
            "M": _pos_int,
            "K": _pos_int,
            "em": _em,
            "seed": _seed,
            "write_fa": {"type": "boolean"},
        },
        "required": ["returns", "M"],
        "additionalProperties": False,
    },
    "backtest": {
        "type": "object",
        "properties": dict(_backtest_common, regularization=_regularization),
        "required": ["returns", "estimators"],
        "additionalProperties": False,
    },
    "sweep": {
        "type": "object",
        "properties": dict(
            _backtest_common, lambdas={"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}
        ),
        "required": ["returns", "estimators", "lambdas"],
        "additionalProperties": False,
    },
}


class ConfigError(Exception):
    pass


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate_config(subcommand: str, config: Any) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[subcommand])
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{_pointer(e.absolute_path)}: {e.message}" for e in errors]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


# --------------------------------------------------------------------------- output


class OutputDir:
    """Collects outputs; each file is written to a temp name then renamed into place."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def _write(self, name: str, writer: Callable[[io.TextIOBase], None]) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        target = self.root / name
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
                writer(fh)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name not in self.files:
            self.files.append(name)
        return target

    def text(self, name: str, text: str) -> Path:
        return self._write(name, lambda fh: fh.write(text))

    def json(self, name: str, payload: Any) -> Path:
        return self.text(name, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header: list[str], rows) -> Path:
        def writer(fh):
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(x) for x in row])

        return self._write(name, writer)

    def manifest(self, subcommand: str, config: dict[str, Any], seed: int | None) -> None:
        checksums = {}
        for name in sorted(self.files):
            checksums[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
        self.json(
            "manifest.json",
            {
                "subcommand": subcommand,
                "config": config,
                "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
                "seed": seed,
                "version": __version__,
                "numpy_version": np.__version__,
                "outputs": checksums,
            },
        )


def _cell(x: Any) -> str:
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if not np.isfinite(x) else repr(x)
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


# --------------------------------------------------------------------------- commands


def cmd_gen(config: dict[str, Any], out: OutputDir, base: Path) -> int:
    n_obs = config["n_obs"]
    n_list = n_obs if isinstance(n_obs, list) else [n_obs]
    spec = GeneratorSpec.from_dict(dict(config, n_obs=n_list[0]))
    params = make_generator_params(spec)
    ids = [f"A{i:03d}" for i in range(spec.n_assets)]
    for i, T in enumerate(n_list):
        panel = generate_panel(params, T, spec.noise_distribution, [spec.seed, 1, i], asset_ids=ids)
        name = "returns.csv" if len(n_list) == 1 else f"returns_T{T}.csv"
        out.csv(name, ["date", *panel.asset_ids], ([t, *row] for t, row in zip(panel.time_index, panel.returns)))
    spec_dict = spec.to_dict()
    spec_dict["n_obs"] = n_obs
    out.json(
        "params.json",
        {
            "spec": spec_dict,
            "asset_ids": ids,
            "mixing": params.mixing,
            "noise_var": params.noise_var,
            "true_covariance": true_covariance(params).matrix,
        },
    )
    return EXIT_OK


def cmd_spectrum(config: dict[str, Any], out: OutputDir, base: Path) -> int:
    N = config["n_assets"]
    reps = config.get("reps", 1)
    n_bins = config.get("bins", 30)
    seed = config.get("seed", 0)
    eig_rows, hist_rows, sup_rows = [], [], []
    for qi, q in enumerate(config["ratios"]):
        T = max(2, int(round(q * N)))
        sup = marchenko_pastur_support(q)
        hi = 1.5 * sup.upper
        edges = np.linspace(0.0, hi, n_bins + 1)
        counts = np.zeros(n_bins)
        n_zero = []
        for rep in range(reps):
            z = make_rng(seed, qi, rep).standard_normal((T, N))
            ev = np.sort(np.linalg.eigvalsh(sample_covariance(z).matrix))[::-1]
            zero = ev < 1e-10
            n_zero.append(int(zero.sum()))
            nz = ev[~zero]
            counts += np.histogram(np.clip(nz, 0.0, hi), bins=edges)[0]
            eig_rows.extend((q, T, rep, k, float(v)) for k, v in enumerate(ev))
        width = edges[1] - edges[0]
        total = counts.sum()
        for b in range(n_bins):
            density = counts[b] / (total * width) if total else 0.0
            hist_rows.append((q, edges[b], edges[b + 1], int(counts[b]), density))
        sup_rows.append(
            (q, T, sup.lower, sup.upper, sup.zero_mass, width, N - min(T - 1, N), float(np.mean(n_zero)))
        )
    out.csv("eigenvalues.csv", ["ratio", "T", "rep", "rank", "eigenvalue"], eig_rows)
    out.csv("histogram.csv", ["ratio", "bin_lo", "bin_hi", "count", "density"], hist_rows)
    out.csv(
        "support.csv",
        ["ratio", "T", "mp_lower", "mp_upper", "zero_mass", "bin_width", "expected_zero_count", "mean_zero_count"],
        sup_rows,
    )
    return EXIT_OK


def _bias_setup(config: dict[str, Any]) -> dict[str, Any]:
    protocol = config.get("protocol", "n30")
    if protocol == "n500":
        defaults = {"n_assets": 500, "factor_strengths": N500_STRENGTHS, "M_fit": 8}
    else:
        defaults = {"n_assets": 30, "factor_strengths": [10, 3, 1], "M_fit": 3}
    setup = {
        "n_assets": config.get("n_assets", defaults["n_assets"]),
        "factor_strengths": config.get("factor_strengths", defaults["factor_strengths"]),
        "noise_range": config.get("noise_range", [0.5, 1.5]),
        "ratios": config.get("ratios", [0.7, 1, 5]),
        "M_fit": config.get("M_fit", defaults["M_fit"]),
        "reps": config.get("reps", 150),
        "K": config.get("K", 100),
        "em": EmOptions.from_dict(config.get("em")),
        "generator_seed": config.get("generator_seed", 0),
        "seed": config.get("seed", 0),
    }
    if protocol == "n500" and "factor_strengths" not in config:
        warnings.warn(
            "the N=500 protocol is described as seven factors but lists eight strengths; "
            "all eight are used (M=8)",
            stacklevel=2,
        )
    return setup


def cmd_bias_sim(config: dict[str, Any], out: OutputDir, base: Path) -> int:
    s = _bias_setup(config)
    spec = GeneratorSpec(s["n_assets"], 1, tuple(s["factor_strengths"]), noise_range=tuple(s["noise_range"]), seed=s["generator_seed"])
    params = make_generator_params(spec)
    N, M = s["n_assets"], s["M_fit"]
    summary: dict[str, Any] = {"setup": {k: v for k, v in s.items() if k != "em"}, "em": s["em"].to_dict(), "ratios": {}}
    for qi, q in enumerate(s["ratios"]):
        T = int(round(q * N))
        res = compare_bias(params, T, M, s["reps"], s["em"], [s["seed"], qi], s["K"])
        fa, dv = res["fa"], res["dva"]
        rows = []
        for i in range(N):
            red = 100.0 * (1.0 - dv.a_mean[i] / fa.a_mean[i]) if fa.a_mean[i] > 0 else float("nan")
            rows.append(
                (i, "fs" if i < M else "oc", fa.s_mean[i], fa.s_std[i], fa.a_mean[i],
                 dv.s_mean[i], dv.s_std[i], dv.a_mean[i], red)
            )
        out.csv(
            f"bias_q{q:g}.csv",
            ["direction", "subspace", "fa_s_mean", "fa_s_std", "fa_a_mean",
             "dva_s_mean", "dva_s_std", "dva_a_mean", "a_reduction_pct"],
            rows,
        )
        summary["ratios"][f"{q:g}"] = {"T": T, "fa": fa.to_dict(), "dva": dv.to_dict()}
        out.json("bias.json", summary)
        logger.info("bias study T/N=%g done", q)
    return EXIT_OK


def cmd_adjust(config: dict[str, Any], out: OutputDir, base: Path) -> int:
    panel = load_returns_csv(_resolve(base, config["returns"]))
    M = config["M"]
    K = config.get("K", 100)
    em = EmOptions.from_dict(config.get("em"))
    seed = config.get("seed", 0)
    params, trace = fa_fit_em(panel, M, em)
    factors = dva_correction_factors(params, panel.n_obs, K, em, seed)
    C = params.covariance_matrix()
    basis = subspace_bases(params, C)
    est = dva_adjust(C, factors, basis)
    ids = list(panel.asset_ids)

    def matrix_rows(m):
        return ([ids[i], *m[i]] for i in range(len(ids)))

    out.csv("dva_covariance.csv", ["asset", *ids], matrix_rows(est.matrix))
    if config.get("write_fa", False):
        out.csv("fa_covariance.csv", ["asset", *ids], matrix_rows(C))
    out.json(
        "adjust_meta.json",
        {
            "K": K,
            "M": M,
            "em_iterations": trace.iterations,
            "em_converged": trace.converged,
            "final_loglik": trace.final_loglik,
            "correction_factors": factors.s,
            "raw_correction_factors": factors.meta["raw"],
            "n_clamped": factors.meta["n_clamped"],
            "psd_repaired": est.meta["psd_repaired"],
            "basis": basis.directions,
            "fa_directional_variances": np.einsum("ni,nm,mi->i", basis.directions, C, basis.directions),
        },
    )
    return EXIT_OK


def _load_backtest_inputs(config: dict[str, Any], base: Path):
    panel = load_returns_csv(_resolve(base, config["returns"]))
    factors = None
    if "factors" in config:
        fpanel = load_returns_csv(_resolve(base, config["factors"]))
        if fpanel.time_index != panel.time_index:
            raise DvaCovError("factor file dates do not match the returns file")
        factors = fpanel.returns
    true_cov = None
    if "true_covariance" in config:
        data = json.loads(_resolve(base, config["true_covariance"]).read_text(encoding="utf-8"))
        true_cov = np.asarray(data["true_covariance"] if isinstance(data, dict) else data, dtype=float)
        if true_cov.shape != (panel.n_assets, panel.n_assets):
            raise DvaCovError("true covariance does not match the number of assets")
    return panel, factors, true_cov


def _backtest_configs(config: dict[str, Any], lambdas) -> list[BacktestConfig]:
    out = []
    for e in config["estimators"]:
        out.append(
            BacktestConfig(
                window=config.get("window", 150),
                subset_size=config.get("subset_size", 100),
                n_subsets=config.get("n_subsets", 1000),
                estimator=EstimatorSpec.from_dict(e),
                lambdas=lambdas,
                rebalance_every=config.get("rebalance_every", 1),
                seed=config.get("seed", 0),
            )
        )
    return out


def _reference(config: dict[str, Any], labels: list[str]) -> str | None:
    if "reference" in config:
        return config["reference"]
    for lab in labels:
        if lab.startswith("dva_fa"):
            return lab
    return None


def _run_estimators(config, base, lambdas, sweep: bool, out: OutputDir) -> int:
    panel, factors, true_cov = _load_backtest_inputs(config, base)
    cfgs = _backtest_configs(config, lambdas)
    labels = [c.estimator.label for c in cfgs]
    if len(set(labels)) != len(labels):
        raise DvaCovError(f"estimator labels must be unique (use 'name'): {labels}")
    reports: dict[str, BacktestReport] = {}
    failures: dict[str, str] = {}
    runner = run_lambda_sweep if sweep else run_backtest
    for cfg in cfgs:
        try:
            reports[cfg.estimator.label] = runner(panel, cfg, factor_series=factors, true_cov=true_cov)
            logger.info("%s done", cfg.estimator.label)
        except (DvaCovError, ValueError) as exc:
            logger.error("%s failed: %s", cfg.estimator.label, exc)
            failures[cfg.estimator.label] = str(exc)
    n_perm = config.get("n_perm", 10_000)
    ref = _reference(config, labels)
    # series and summary used in the table: plain run, or the best lambda of a sweep
    chosen: dict[str, tuple[float | None, float, float, np.ndarray]] = {}
    for name, rep in reports.items():
        if sweep:
            lam = min(rep.per_lambda, key=lambda k: rep.per_lambda[k][0])
            var, mad = rep.per_lambda[lam]
            chosen[name] = (lam, var, mad, rep.per_lambda_series[lam][0])
            out.csv(
                f"sweep_{_slug(name)}.csv",
                ["lambda", "mad", "variance"],
                ((lm, m, v) for lm, (v, m) in rep.per_lambda.items()),
            )
        else:
            chosen[name] = (None, rep.realized_variance, rep.realized_mad, rep.per_period_sq)
    p_values: dict[str, float | None] = {}
    for name in reports:
        if ref is None or ref not in reports or name == ref:
            p_values[name] = None
        else:
            p_values[name] = significance_randomization(chosen[name][3], chosen[ref][3], n_perm, config.get("seed", 0))
    header = ["estimator", "mad_x1e3", "variance_x1e6", "p_vs_reference"] + (["lambda"] if sweep else [])
    rows = []
    for name in labels:
        if name not in reports:
            continue
        lam, var, mad, _ = chosen[name]
        row = [name, mad * 1e3, var * 1e6, "" if p_values[name] is None else p_values[name]]
        if sweep:
            row.append(lam)
        rows.append(row)
    out.csv("table.csv", header, rows)
    out.json(
        "report.json",
        {"reference": ref, "reports": {k: v.to_dict() for k, v in reports.items()}, "p_values": p_values, "failures": failures},
    )
    return EXIT_OK if not failures else EXIT_RUNTIME


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name).strip("_")


def cmd_backtest(config: dict[str, Any], out: OutputDir, base: Path) -> int:
    reg = config.get("regularization", {"type": "none"})
    if reg["type"] == "none":
        lambdas = None
    elif reg["type"] == "ridge":
        lambdas = (reg["lambda"],)
    else:
        lambdas = tuple(reg["lambdas"])
    return _run_estimators(config, base, lambdas, False, out)


def cmd_sweep(config: dict[str, Any], out: OutputDir, base: Path) -> int:
    return _run_estimators(config, base, tuple(config["lambdas"]), True, out)


COMMANDS: dict[str, Callable[[dict[str, Any], OutputDir, Path], int]] = {
    "gen": cmd_gen,
    "spectrum": cmd_spectrum,
    "bias-sim": cmd_bias_sim,
    "adjust": cmd_adjust,
    "backtest": cmd_backtest,
    "sweep": cmd_sweep,
}


def _semantic_checks(subcommand: str, config: dict[str, Any], base: Path) -> None:
    """Checks beyond the JSON schema that must pass before any work starts."""
    try:
        if subcommand == "gen":
            n_list = config["n_obs"] if isinstance(config["n_obs"], list) else [config["n_obs"]]
            GeneratorSpec.from_dict(dict(config, n_obs=n_list[0]))
            if len(config["factor_strengths"]) > config["n_assets"]:
                raise ConfigError("/factor_strengths: more factors than assets")
        elif subcommand == "bias-sim":
            s = _bias_setup(config) if config.get("protocol") != "n500" else None
            if s is not None and s["M_fit"] >= s["n_assets"]:
                raise ConfigError("/M_fit: must be smaller than n_assets")
        elif subcommand in ("backtest", "sweep"):
            for i, e in enumerate(config["estimators"]):
                EstimatorSpec.from_dict(e)
                if e["type"] == "exogenous" and "factors" not in config:
                    raise ConfigError(f"/estimators/{i}: exogenous estimator needs a 'factors' file")
                if e["type"] == "oracle" and "true_covariance" not in config:
                    raise ConfigError(f"/estimators/{i}: oracle estimator needs a 'true_covariance' file")
    except DvaCovError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("returns", "factors", "true_covariance"):
        if key in config and not _resolve(base, config[key]).is_file():
            raise ConfigError(f"/{key}: file not found: {config[key]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvacov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
        verbosity = p.add_mutually_exclusive_group()
        verbosity.add_argument("--quiet", action="store_true")
        verbosity.add_argument("--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            config = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise ConfigError("/: config must be a JSON object")
        if args.seed is not None:
            config["seed"] = args.seed
        validate_config(args.subcommand, config)
        base = args.config.resolve().parent
        _semantic_checks(args.subcommand, config, base)
    except ConfigError as exc:
        print(f"dvacov {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = OutputDir(args.out)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    code = EXIT_RUNTIME
    try:
        with limiter:
            code = COMMANDS[args.subcommand](config, out, base)
    except KeyboardInterrupt:
        logger.error("interrupted; partial results kept")
    except (DvaCovError, ValueError, OSError) as exc:
        logger.error("%s", exc)
    finally:
        if out.files:
            out.manifest(args.subcommand, config, config.get("seed"))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
