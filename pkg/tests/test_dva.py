import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvacov import (
    BiasReport,
    CorrectionFactors,
    DegeneracyError,
    DimensionError,
    EmOptions,
    EstimatorTag,
    FactorModelParams,
    GeneratorSpec,
    RankDeficiencyError,
    SubspaceBasis,
    compare_bias,
    directional_variances,
    dva_adjust,
    dva_correction_factors,
    dva_correction_factors_many,
    dva_covariance,
    generate_panel,
    make_generator_params,
    run_bias_study,
    subspace_bases,
    systematic_error_ratios,
)
from oracles import principal_angles, quadratic_forms_loop, random_spd


def random_params(rng, M, N):
    return FactorModelParams(rng.standard_normal((M, N)) * 2, rng.uniform(0.5, 1.5, N))


# ---------------------------------------------------------------- bases


def test_axis_aligned_basis():
    N = 5
    params = FactorModelParams(np.array([[3.0, 0, 0, 0, 0]]), np.ones(N))
    C = np.diag([10.0, 4.0, 1.0, 3.0, 2.0])
    basis = subspace_bases(params, C)
    np.testing.assert_allclose(np.abs(basis.factor_subspace[:, 0]), np.eye(N)[0], atol=1e-14)
    # complement sorted by decreasing variance: axes 1, 3, 4, 2
    np.testing.assert_allclose(np.abs(basis.complement), np.eye(N)[:, [1, 3, 4, 2]], atol=1e-14)


@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_basis_orthonormal_and_spans_exposures(M, seed):
    rng = np.random.default_rng(seed)
    N = 9
    params = random_params(rng, M, N)
    C = params.covariance_matrix()
    basis = subspace_bases(params, C)
    P = basis.directions
    assert np.max(np.abs(P.T @ P - np.eye(N))) < 1e-10
    assert np.max(principal_angles(basis.factor_subspace, params.mixing.T)) < 1e-8
    v = directional_variances(C, basis)
    assert np.all(np.diff(v[:M]) <= 1e-12) and np.all(np.diff(v[M:]) <= 1e-12)


def test_directional_variance_equals_confined_eigenvalue(rng):
    params = random_params(rng, 2, 7)
    C = random_spd(rng, 7)
    basis = subspace_bases(params, C)
    Q = basis.factor_subspace
    confined = np.linalg.eigvalsh(Q.T @ C @ Q)[::-1]
    np.testing.assert_allclose(directional_variances(C, basis)[:2], confined, rtol=1e-12)


def test_rank_deficient_exposures_rejected():
    X = np.array([[1.0, 2.0, 0.0, 1.0], [2.0, 4.0, 0.0, 2.0]])
    params = FactorModelParams(X, np.ones(4))
    with pytest.raises(RankDeficiencyError):
        subspace_bases(params, params.covariance_matrix())


def test_basis_dimension_mismatch(rng):
    params = random_params(rng, 1, 4)
    with pytest.raises(DimensionError):
        subspace_bases(params, np.eye(5))


# ---------------------------------------------------------------- directional quantities


def test_directional_variances_trivial_cases(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    basis = SubspaceBasis(Q, 2)
    np.testing.assert_allclose(directional_variances(np.eye(5), basis), np.ones(5), rtol=1e-14)
    d = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    np.testing.assert_array_equal(directional_variances(np.diag(d), SubspaceBasis(np.eye(5), 1)), d)


def test_directional_variances_match_loop(rng):
    C = random_spd(rng, 6)
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    np.testing.assert_allclose(directional_variances(C, SubspaceBasis(Q, 2)), quadratic_forms_loop(C, Q), rtol=1e-12)


def test_systematic_error_ratios(rng):
    C = random_spd(rng, 4)
    basis = SubspaceBasis(np.eye(4), 1)
    np.testing.assert_allclose(systematic_error_ratios(C, C, basis), 1.0)
    np.testing.assert_allclose(systematic_error_ratios(2 * C, C, basis), 2.0)
    two = SubspaceBasis(np.eye(2), 1)
    np.testing.assert_allclose(systematic_error_ratios(np.diag([4.0, 1.0]), np.diag([2.0, 2.0]), two), [2.0, 0.5])
    with pytest.raises(DegeneracyError):
        systematic_error_ratios(np.eye(2), np.diag([1.0, 0.0]), two)


# ---------------------------------------------------------------- adjustment identity


def test_unit_factors_are_a_bitwise_fixed_point(rng):
    params = random_params(rng, 2, 8)
    C = params.covariance_matrix()
    basis = subspace_bases(params, C)
    out = dva_adjust(params, np.ones(8), basis)
    assert np.array_equal(out.matrix, C)
    assert out.meta["psd_repaired"] is False
    assert out.estimator_tag is EstimatorTag.DVA_FACTOR_ANALYSIS


def test_single_direction_halved(rng):
    params = random_params(rng, 2, 6)
    C = params.covariance_matrix()
    basis = subspace_bases(params, C)
    s = np.ones(6)
    s[0] = 2.0
    out = dva_adjust(C, s, basis).matrix
    p = basis.directions[:, 0]
    assert p @ out @ p == pytest.approx(0.5 * (p @ C @ p), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_adjusted_directional_variance_identity(seed):
    rng = np.random.default_rng(seed)
    N, M = 7, 2
    # eigenvalues of C in [1, 3] and coefficients 1/S - 1 >= -2/7 keep the result PD,
    # so the identity is checked without any PSD repair
    C = random_spd(rng, N, cond=3)
    params = random_params(rng, M, N)
    basis = subspace_bases(params, C)
    s = rng.uniform(0.6, 1.4, N)
    sigma2 = directional_variances(C, basis)
    out = dva_adjust(C, s, basis)
    assert not out.meta["psd_repaired"]
    np.testing.assert_allclose(directional_variances(out, basis), sigma2 / s, rtol=1e-10)
    # literal coefficient (1 - 1/S) gives sigma^2 (2 - 1/S): the wrong direction for S > 1
    lit = dva_adjust(C, s, basis, literal_sign=True)
    np.testing.assert_allclose(directional_variances(lit, basis), sigma2 * (2 - 1 / s), rtol=1e-10)
    up = s > 1
    assert np.all(directional_variances(lit, basis)[up] > sigma2[up])
    assert np.all(directional_variances(out, basis)[up] < sigma2[up])
    assert np.all(directional_variances(out, basis)[~up] > sigma2[~up])


def test_psd_repair_flagged(rng):
    C = np.diag([4.0, 1.0, 1.0])
    basis = SubspaceBasis(np.eye(3), 1)
    # literal sign with tiny S drives a direction negative: sigma^2 (2 - 1/S) < 0 for S < 1/2
    out = dva_adjust(C, np.array([1.0, 0.25, 1.0]), basis, literal_sign=True)
    assert out.meta["psd_repaired"] is True
    assert np.linalg.eigvalsh(out.matrix)[0] >= -1e-14


def test_adjust_dimension_checks(rng):
    with pytest.raises(DimensionError):
        dva_adjust(np.eye(3), np.ones(2), SubspaceBasis(np.eye(3), 1))


# ---------------------------------------------------------------- correction factors


def test_factors_near_one_for_huge_T():
    rng = np.random.default_rng(0)
    params = FactorModelParams(rng.standard_normal((1, 5)) * 3, rng.uniform(0.5, 1.5, 5))
    f = dva_correction_factors(params, 100_000, K=1, seed=1)
    np.testing.assert_allclose(f.s, 1.0, atol=0.02)
    assert f.k_runs == 1


def test_factors_are_deterministic_and_clamped():
    params = make_generator_params(GeneratorSpec(12, 15, (5, 1), seed=2))
    a = dva_correction_factors(params, 15, K=8, seed=3)
    b = dva_correction_factors(params, 15, K=8, seed=3)
    np.testing.assert_array_equal(a.s, b.s)
    tight = dva_correction_factors(params, 15, K=8, seed=3, clamp=(0.9, 1.1))
    np.testing.assert_array_equal(tight.s, np.clip(a.meta["raw"], 0.9, 1.1))
    assert tight.meta["n_clamped"] == int(np.sum((a.meta["raw"] < 0.9) | (a.meta["raw"] > 1.1))) > 0
    assert np.all(a.s > 0) and np.all(np.isfinite(a.s))
    json.dumps(a.to_dict())


def test_factors_many_matches_single():
    params = [make_generator_params(GeneratorSpec(8, 20, (4, 1), seed=s)) for s in range(3)]
    many = dva_correction_factors_many(params, 20, K=5, seeds=[10, 11, 12])
    for p, f, s in zip(params, many, [10, 11, 12]):
        np.testing.assert_allclose(dva_correction_factors(p, 20, K=5, seed=s).s, f.s, rtol=1e-12)


def test_weakest_factor_overestimated_across_seeds():
    params = make_generator_params(GeneratorSpec(30, 30, (10, 3, 1), seed=0))
    s3 = [dva_correction_factors(params, 30, K=20, seed=seed).s[2] for seed in range(5)]
    assert np.mean(s3) > 1.0


def test_dva_covariance_pipeline_is_deterministic():
    params = make_generator_params(GeneratorSpec(10, 40, (4, 1), seed=7))
    panel = generate_panel(params, 40, seed=8)
    a = dva_covariance(panel, 2, K=6, seed=9)
    b = dva_covariance(panel, 2, K=6, seed=9)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert a.meta["K"] == 6 and "em_iterations" in a.meta and "n_clamped" in a.meta
    assert a.is_psd()


def test_two_asset_single_factor_adjust():
    rng = np.random.default_rng(1)
    R = rng.standard_normal((60, 1)) @ np.array([[1.0, 0.7]]) + 0.5 * rng.standard_normal((60, 2))
    est = dva_covariance(R, 1, K=10, seed=2)
    assert est.matrix.shape == (2, 2)
    assert np.array_equal(est.matrix, est.matrix.T)
    assert est.is_psd()


# ---------------------------------------------------------------- bias studies


def test_white_noise_bias_study_bulk_near_one():
    N = 10
    gen = FactorModelParams(np.zeros((1, N)), np.ones(N))
    T = 2000
    rep = run_bias_study(gen, T, 1, n_reps=30, seed=4)
    # the ML fit reproduces the sample variances, so the ratio averaged over all N directions
    # estimates 1 (up to the (T-1)/T scatter normalisation)
    per_rep = rep.ratios.mean(axis=1)
    assert abs(per_rep.mean() - (T - 1) / T) < 3 * per_rep.std(ddof=1) / np.sqrt(len(per_rep))
    # the fitted factor absorbs the top sample direction, so the complement bulk sits slightly
    # below 1, and ranked directions spread like sample eigenvalues within the MP edges
    assert abs(rep.s_mean[1:].mean() - 1.0) < 0.02
    q = T / N
    assert np.all(rep.s_mean[1:] > (1 - q**-0.5) ** 2) and np.all(rep.s_mean[1:] < (1 + q**-0.5) ** 2)
    assert np.all(rep.a_mean >= 0)


def test_single_replication_has_nan_std():
    gen = make_generator_params(GeneratorSpec(6, 20, (3,), seed=1))
    rep = run_bias_study(gen, 20, 1, n_reps=1, seed=0)
    assert rep.n_reps == 1 and np.all(np.isnan(rep.s_std))
    doc = rep.to_dict()
    assert doc["s_std"] == [None] * 6
    json.dumps(doc)


def test_compare_bias_shares_fa_replications():
    gen = make_generator_params(GeneratorSpec(8, 24, (4, 1), seed=3))
    both = compare_bias(gen, 24, 2, n_reps=4, seed=5, K=3)
    fa_only = run_bias_study(gen, 24, 2, n_reps=4, seed=5)
    np.testing.assert_array_equal(both["fa"].s_mean, fa_only.s_mean)
    assert isinstance(both["dva"], BiasReport) and both["dva"].meta["K"] == 3
    assert both["dva"].ratios.shape == (4, 8)
    assert isinstance(CorrectionFactors(np.ones(2), 1).s, np.ndarray)


def test_bias_pattern_at_small_sample():
    gen = make_generator_params(GeneratorSpec(30, 21, (10, 3, 1), seed=0))
    rep = run_bias_study(gen, 21, 3, n_reps=40, seed=1, opts=EmOptions(rel_tol=1e-6))
    assert rep.s_mean[2] > 1.0
    assert rep.s_mean[-1] < 1.0
