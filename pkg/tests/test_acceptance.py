"""End-to-end acceptance suite.

Every test records its outcome in ``conftest.ACCEPTANCE`` before asserting, and the
terminal summary prints one PASS/FAIL line per criterion.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dvacov import (
    BacktestConfig,
    DiversificationMetric,
    EmOptions,
    EstimatorSpec,
    FactorModelParams,
    GeneratorSpec,
    compare_bias,
    directional_variances,
    dva_adjust,
    fa_fit_em,
    generate_panel,
    make_generator_params,
    make_rng,
    marchenko_pastur_support,
    min_variance_weights,
    regularized_min_variance,
    run_backtest,
    run_lambda_sweep,
    sample_covariance,
    significance_randomization,
    subspace_bases,
)
from dvacov.cli import main
from oracles import projected_gradient_min_variance, random_spd

pytestmark = pytest.mark.slow


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------- criteria 1-3: N=30 bias study

N30, M30 = 30, 3
RATIOS = (0.7, 1.0, 5.0)
STRONG, WEAK, SMALLEST_OC = 0, M30 - 1, N30 - 1


@pytest.fixture(scope="module")
def bias_study():
    params = make_generator_params(GeneratorSpec(N30, 1, (10, 3, 1), noise_range=(0.5, 1.5), seed=0))
    start = time.perf_counter()
    out = {}
    for q in RATIOS:
        T = int(round(q * N30))
        out[q] = compare_bias(params, T, M30, n_reps=150, seed=7, K=100)
    return out, time.perf_counter() - start


def test_criterion_1_systematic_error_pattern(bias_study):
    res, elapsed = bias_study
    weak = {q: res[q]["fa"].s_mean[WEAK] for q in RATIOS}
    strong5 = res[5.0]["fa"].s_mean[STRONG]
    oc = {q: res[q]["fa"].s_mean[SMALLEST_OC] for q in RATIOS if q <= 1}
    ok = (
        all(v > 1 for v in weak.values())
        and 0.95 <= strong5 <= 1.05
        and all(v < 1 for v in oc.values())
        and elapsed <= 600
    )
    detail = (
        f"weakest S {[round(float(v), 3) for v in weak.values()]}, strongest S at T/N=5 {strong5:.3f}, "
        f"smallest-oc S {[round(float(v), 3) for v in oc.values()]}, {elapsed:.0f}s"
    )
    record(1, ok, detail)


def test_criterion_2_dva_reduces_relative_error(bias_study):
    res, _ = bias_study
    red = {}
    for q in (0.7, 1.0):
        fa, dv = res[q]["fa"], res[q]["dva"]
        for name, i in (("weak", WEAK), ("oc", SMALLEST_OC)):
            red[(q, name)] = 1 - dv.a_mean[i] / fa.a_mean[i]
    ok = all(v >= 0.30 for v in red.values())
    record(2, ok, "A reductions " + ", ".join(f"q={q} {n}: {100 * v:.0f}%" for (q, n), v in red.items()))


def test_criterion_3_dva_spread_not_inflated(bias_study):
    res, _ = bias_study
    # DVA divides each estimate by S (often far below 1 in the complement), which scales the
    # raw spread mechanically; the spread is compared relative to the mean (coefficient of
    # variation). The raw ratio is reported as well.
    cv = max(float(np.max(res[q]["dva"].s_cv / res[q]["fa"].s_cv)) for q in RATIOS)
    raw = max(float(np.max(res[q]["dva"].s_std / res[q]["fa"].s_std)) for q in RATIOS)
    record(3, cv <= 1.25, f"max DVA/FA spread ratio: relative {cv:.3f}, raw {raw:.3f} (gate 1.25)")


# ---------------------------------------------------------------- criterion 4: algebraic identity


def test_criterion_4_adjustment_identity():
    worst, fixed_ok, literal_ok, repaired = 0.0, True, True, 0
    for i in range(100):
        rng = np.random.default_rng([4, i])
        N = int(rng.integers(3, 16))
        M = int(rng.integers(1, N // 2 + 1))
        # eigenvalues in [1, 3] and S in [0.6, 1.4] keep the adjusted matrix positive definite
        C = random_spd(rng, N, cond=3)
        params = FactorModelParams(rng.standard_normal((M, N)) * 2, rng.uniform(0.5, 1.5, N))
        basis = subspace_bases(params, C)
        s = rng.uniform(0.6, 1.4, N)
        sigma2 = directional_variances(C, basis)
        out = dva_adjust(C, s, basis)
        repaired += out.meta["psd_repaired"]
        worst = max(worst, float(np.max(np.abs(directional_variances(out, basis) / (sigma2 / s) - 1))))
        fixed_ok &= bool(np.array_equal(dva_adjust(C, np.ones(N), basis).matrix, C))
        lit = directional_variances(dva_adjust(C, s, basis, literal_sign=True), basis)
        up = s > 1
        literal_ok &= bool(np.all(lit[up] > sigma2[up]))
    ok = worst <= 1e-10 and fixed_ok and literal_ok and repaired == 0
    record(4, ok, f"max rel err {worst:.1e}, S=1 fixed point {fixed_ok}, literal sign inflates {literal_ok}")


# ---------------------------------------------------------------- criterion 5: EM


def test_criterion_5_em_correctness():
    worst_drop = 0.0
    for i in range(50):
        rng = np.random.default_rng([5, i])
        N = int(rng.integers(5, 21))
        M = int(rng.integers(1, 4))
        T = int(rng.integers(20, 200))
        strengths = tuple(sorted(rng.uniform(1, 10, M), reverse=True))
        params = make_generator_params(GeneratorSpec(N, T, strengths, seed=i))
        panel = generate_panel(params, T, seed=[5, i])
        init = "spectral" if i % 2 == 0 else "seeded_random"
        _, trace = fa_fit_em(panel, M, EmOptions(max_iter=500, init=init, init_seed=i))
        worst_drop = min(worst_drop, float(np.min(np.diff(trace.loglik_per_iter))))
    truth = make_generator_params(GeneratorSpec(30, 150, (10, 3, 1), seed=0))
    C = truth.covariance_matrix()
    errs = []
    for T in (150, 1500, 15000):
        e = []
        for s in range(20):
            fit, _ = fa_fit_em(generate_panel(truth, T, seed=[s, T]), 3)
            e.append(np.linalg.norm(fit.covariance_matrix() - C) / np.linalg.norm(C))
        errs.append(float(np.mean(e)))
    ok = worst_drop >= -1e-8 and errs[0] > errs[1] > errs[2]
    record(5, ok, f"largest loglik drop {max(0.0, -worst_drop):.1e}, mean Frobenius errors {[round(e, 4) for e in errs]}")


# ---------------------------------------------------------------- criterion 6: spectrum


def test_criterion_6_spectrum():
    N = 200
    lines, ok = [], True
    for qi, q in enumerate((0.5, 1.0, 5.0, 100.0)):
        T = int(round(q * N))
        ev = np.linalg.eigvalsh(sample_covariance(make_rng(6, qi).standard_normal((T, N))).matrix)
        zero = ev < 1e-10 * ev[-1]
        sup = marchenko_pastur_support(q)
        # tolerance: one bin of the spectrum histogram (30 bins over [0, 1.5 x upper edge])
        width = 1.5 * sup.upper / 30
        nz = ev[~zero]
        inside = nz.min() >= sup.lower - width and nz.max() <= sup.upper + width
        n_zero_ok = int(zero.sum()) == N - min(T - 1, N)
        ok &= bool(inside and n_zero_ok)
        lines.append(f"q={q:g}: [{nz.min():.3f}, {nz.max():.3f}] vs [{sup.lower:.3f}, {sup.upper:.3f}]±{width:.3f}, zeros {zero.sum()}")
    record(6, ok, "; ".join(lines))


# ---------------------------------------------------------------- criterion 7: portfolio solvers


def test_criterion_7_portfolio_solvers():
    pg_err = kkt = lam0 = lam_inf = 0.0
    for i in range(50):
        rng = np.random.default_rng([7, i])
        n = int(rng.integers(2, 13))
        C = random_spd(rng, n, cond=float(rng.uniform(2, 50)))
        w = min_variance_weights(C).w
        pg_err = max(pg_err, float(np.max(np.abs(w - projected_gradient_min_variance(C)))))
        kkt = max(kkt, float(np.ptp(C @ w)))
        metric = DiversificationMetric(np.diag(C).copy())
        lam0 = max(lam0, float(np.max(np.abs(regularized_min_variance(C, metric, 0.0).w - w))))
        iv = (1 / metric.diag) / np.sum(1 / metric.diag)
        lam_inf = max(lam_inf, float(np.max(np.abs(regularized_min_variance(C, metric, 1e6).w - iv))))
    ok = pg_err <= 1e-8 and kkt < 1e-8 and lam0 == 0.0 and lam_inf <= 1e-3
    record(7, ok, f"oracle gap {pg_err:.1e}, KKT spread {kkt:.1e}, lambda=0 gap {lam0:.0e}, lambda=1e6 gap {lam_inf:.1e}")


# ---------------------------------------------------------------- criteria 8-9: synthetic market

MARKET_STRENGTHS = (10, 5, 4, 3, 2.5, 2, 1.5)


def market(seed):
    params = make_generator_params(GeneratorSpec(120, 1000, MARKET_STRENGTHS, seed=seed))
    return params, generate_panel(params, 1000, seed=seed + 1000)


def test_criterion_8_backtest_ordering():
    start = time.perf_counter()
    em = EmOptions(rel_tol=1e-6)
    specs = {
        "true": EstimatorSpec("oracle"),
        "dva": EstimatorSpec("dva_fa", n_factors=7, K=25, em=em),
        "fa": EstimatorSpec("fa", n_factors=7, em=em),
        "sample": EstimatorSpec("sample"),
    }
    var = {k: [] for k in specs}
    series = {k: [] for k in specs}
    for seed in range(20):
        params, panel = market(seed)
        C = params.covariance_matrix()
        for k, spec in specs.items():
            cfg = BacktestConfig(150, 40, 50, spec, rebalance_every=50, seed=seed)
            rep = run_backtest(panel, cfg, true_cov=C)
            var[k].append(rep.realized_variance)
            series[k].append(rep.per_period_sq)
    mean = {k: float(np.mean(v)) for k, v in var.items()}
    dva_sq, sample_sq = np.concatenate(series["dva"]), np.concatenate(series["sample"])
    p = significance_randomization(dva_sq, sample_sq, 10_000, seed=0)
    elapsed = time.perf_counter() - start
    ok = (
        mean["true"] <= mean["dva"] <= mean["fa"] <= mean["sample"]
        and dva_sq.mean() < sample_sq.mean()
        and p < 0.05
        and elapsed <= 1800
    )
    detail = ", ".join(f"{k} {1e3 * v:.3f}e-3" for k, v in mean.items()) + f", p(DVA vs sample) {p:.1e}, {elapsed:.0f}s"
    record(8, ok, detail)


def test_criterion_9_lambda_sweep():
    _, panel = market(0)
    lambdas = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
    cfg = BacktestConfig(150, 100, 50, EstimatorSpec("sample"), lambdas=lambdas, rebalance_every=5, seed=0)
    rep = run_lambda_sweep(panel, cfg)
    curve = {lam: v for lam, (v, _) in rep.per_lambda.items()}
    best = min(curve, key=curve.get)
    ok = best > 0 and curve[best] < curve[0.0]
    record(9, ok, f"min variance {curve[best]:.4g} at lambda={best:g} vs {curve[0.0]:.4g} at lambda=0")


# ---------------------------------------------------------------- criterion 10: CLI determinism


def test_criterion_10_cli_determinism(tmp_path):
    gen = {"n_assets": 12, "n_obs": [120, 30], "factor_strengths": [4, 2], "seed": 3}
    backtest = {
        "returns": "g/returns_T120.csv",
        "true_covariance": "g/params.json",
        "window": 40,
        "subset_size": 6,
        "n_subsets": 4,
        "rebalance_every": 10,
        "n_perm": 200,
        "seed": 2,
        "estimators": [
            {"type": "sample"},
            {"type": "shrinkage"},
            {"type": "fa", "n_factors": 2},
            {"type": "dva_fa", "n_factors": 2, "K": 3},
            {"type": "resampled", "n_resamples": 4},
            {"type": "oracle"},
        ],
    }
    configs = {
        "gen": gen,
        "spectrum": {"n_assets": 30, "ratios": [0.5, 2], "reps": 2, "seed": 1},
        "bias-sim": {"n_assets": 10, "factor_strengths": [5, 2], "M_fit": 2, "ratios": [1, 3], "reps": 3, "K": 3},
        "adjust": {"returns": "g/returns_T30.csv", "M": 2, "K": 4, "write_fa": True, "seed": 5},
        "backtest": dict(backtest, regularization={"type": "ridge_path", "lambdas": [0, 0.5]}),
        "sweep": dict(backtest, lambdas=[0, 0.1, 1]),
    }
    assert main(["gen", "--config", _write(tmp_path, "gen", gen), "--out", str(tmp_path / "g"), "--quiet"]) == 0
    mismatched = []
    for sub, cfg in configs.items():
        path = _write(tmp_path, sub, cfg)
        runs = []
        for tag, extra in (("a", ["--threads", "1"]), ("b", ["--threads", "1"]), ("c", ["--threads", "2"]), ("d", [])):
            out = tmp_path / f"{sub}_{tag}"
            assert main([sub, "--config", path, "--out", str(out), "--quiet", *extra]) == 0
            runs.append(json.loads((out / "manifest.json").read_text())["outputs"])
        if any(r != runs[0] for r in runs[1:]) or not runs[0]:
            mismatched.append(sub)
    record(10, not mismatched, f"{len(configs)} subcommands x 4 runs; differing: {mismatched or 'none'}")


def _write(tmp_path, name, cfg):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return str(path)
