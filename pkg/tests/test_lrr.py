import numpy as np
import pytest

from mtpose.exceptions import MtposeError
from mtpose.linalg import nuclear_norm
from mtpose.lrr import (
    LrrProblem,
    lrr_affinity,
    mrcl_transform,
    shape_interaction,
    solve_lrr,
)


def _clean_low_rank(rng, d=12, n=20, rank=2, scale=10.0):
    # column norms must be well above 1/lam or the cheapest solution is
    # (Z, E) = (0, X) with all the data declared corruption
    basis = np.linalg.qr(rng.normal(size=(d, rank)))[0]
    coeffs = rng.normal(size=(rank, n))
    return basis @ coeffs * scale, basis


def test_clean_identity_at_scale_matches_oracle():
    # [DERIVED] for clean X = A the minimum-nuclear-norm solution of X = XZ
    # is the shape-interaction matrix V V'; for X = 10*I4 that is I4
    x = 10.0 * np.eye(4)
    result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3))
    assert result.converged
    assert np.allclose(result.z, np.eye(4), atol=1e-6)
    assert np.allclose(result.e, 0.0, atol=1e-6)


def test_clean_rank1_matches_vvt_oracle():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(8, 1))
    v = rng.normal(size=(6, 1))
    x = 10.0 * u @ v.T
    result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3))
    v_hat = v / np.linalg.norm(v)
    assert result.converged
    assert np.allclose(result.z, v_hat @ v_hat.T, atol=1e-4)


def test_clean_general_matches_shape_interaction():
    rng = np.random.default_rng(1)
    x, _ = _clean_low_rank(rng)
    result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3))
    oracle = shape_interaction(x)
    rel = np.linalg.norm(result.z - oracle) / np.linalg.norm(oracle)
    assert result.converged
    assert rel < 1e-4


def test_corrupted_column_localized_in_e():
    rng = np.random.default_rng(2)
    clean, _ = _clean_low_rank(rng, d=10, n=15)
    x = clean.copy()
    # corruption 10x the data scale on one column, clean dictionary
    x[:, 7] += rng.normal(size=10) * 10.0 * np.abs(clean).mean() * 10
    result = solve_lrr(LrrProblem(x=x, a=clean, lam=0.3))
    norms = np.linalg.norm(result.e, axis=0)
    assert norms[7] >= 10 * np.max(np.delete(norms, 7))


def test_residuals_below_tol_and_converged_flag():
    rng = np.random.default_rng(3)
    x, _ = _clean_low_rank(rng)
    result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3), tol=1e-6, max_iter=500)
    assert result.converged
    assert result.primal_residuals[0] < 1e-6
    assert result.primal_residuals[1] < 1e-6
    assert result.iterations <= 500


def test_nonconvergence_is_flag_not_error():
    rng = np.random.default_rng(4)
    x, _ = _clean_low_rank(rng)
    result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3), max_iter=2)
    assert not result.converged


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    x, _ = _clean_low_rank(rng)
    r1 = solve_lrr(LrrProblem(x=x, a=x, lam=0.3))
    r2 = solve_lrr(LrrProblem(x=x, a=x, lam=0.3))
    assert np.array_equal(r1.z, r2.z)
    assert np.array_equal(r1.e, r2.e)
    assert r1.iterations == r2.iterations


def test_final_lagrangian_below_zero_init():
    # augmented Lagrangian with multipliers at zero and mu = mu0: the final
    # iterate must not exceed the value at (Z, E, J) = 0, which is mu0/2 ||X||^2
    rng = np.random.default_rng(6)
    for trial in range(5):
        x, _ = _clean_low_rank(rng, d=8, n=12)
        mu0 = 0.5
        result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3), mu0=mu0)
        resid = x - x @ result.z - result.e
        final = (
            nuclear_norm(result.z)
            + 0.3 * np.linalg.norm(result.e, axis=0).sum()
            + mu0 / 2 * np.sum(resid**2)
        )
        assert final <= mu0 / 2 * np.sum(x**2) + 1e-8


def test_problem_validation():
    with pytest.raises(MtposeError):
        LrrProblem(x=np.eye(3), a=np.eye(4), lam=0.3)
    with pytest.raises(MtposeError):
        LrrProblem(x=np.eye(3), a=np.eye(3), lam=0.0)


# ------------------------------------------------------------------- mrcl


def test_mrcl_clean_low_rank_is_fixed_point():
    rng = np.random.default_rng(7)
    x, _ = _clean_low_rank(rng, d=16, n=30)
    feats = x.T  # rows = samples
    out = mrcl_transform(feats, lam=0.3)
    rel = np.linalg.norm(out - feats) / np.linalg.norm(feats)
    assert rel < 1e-4


def test_mrcl_identical_rows_stay_identical():
    row = 10.0 * np.arange(1.0, 6.0)
    feats = np.vstack([row, row])
    out = mrcl_transform(feats, lam=0.3)
    assert np.allclose(out[0], out[1], atol=1e-10)


def test_mrcl_outlier_row_moves_toward_subspace():
    rng = np.random.default_rng(8)
    x, basis = _clean_low_rank(rng, d=12, n=40)
    feats = x.T
    off = np.linalg.qr(np.hstack([basis, rng.normal(size=(12, 1))]))[0][:, -1]
    outlier = feats[0] + 30.0 * off
    stacked = np.vstack([feats, outlier])
    out = mrcl_transform(stacked, lam=0.3)

    def dist(row):
        return np.linalg.norm(row - basis @ (basis.T @ row))

    assert dist(out[-1]) < dist(outlier)


def test_mrcl_nonconvergence_returns_input():
    rng = np.random.default_rng(9)
    x, _ = _clean_low_rank(rng)
    feats = x.T
    out = mrcl_transform(feats, lam=0.3, max_iter=1)
    assert np.array_equal(out, feats)


def test_mrcl_target_norm_counteracts_global_scaling():
    # with internal normalization, scaling all features by a constant scales
    # the output by the same constant
    rng = np.random.default_rng(10)
    x, _ = _clean_low_rank(rng)
    feats = x.T
    base = mrcl_transform(feats, lam=0.3, target_norm=10.0)
    scaled = mrcl_transform(1000.0 * feats, lam=0.3, target_norm=10.0)
    assert np.allclose(scaled, 1000.0 * base, rtol=1e-8)


def test_mrcl_needs_two_samples():
    with pytest.raises(MtposeError):
        mrcl_transform(np.ones((1, 5)), lam=0.3)


# --------------------------------------------------------------- affinity


def test_affinity_identity():
    assert np.array_equal(lrr_affinity(np.eye(3)), np.eye(3))


def test_affinity_antisymmetric():
    z = np.array([[0.0, 2.0], [-2.0, 0.0]])
    assert np.array_equal(lrr_affinity(z), np.abs(z))


def test_affinity_rejects_nonsquare():
    with pytest.raises(MtposeError):
        lrr_affinity(np.ones((2, 3)))


def test_affinity_two_subspaces_block_diagonal():
    rng = np.random.default_rng(11)
    d, per = 20, 12
    b1 = np.linalg.qr(rng.normal(size=(d, 2)))[0]
    b2 = np.linalg.qr(rng.normal(size=(d, 2)))[0]
    x = np.hstack(
        [10.0 * b1 @ rng.normal(size=(2, per)), 10.0 * b2 @ rng.normal(size=(2, per))]
    )
    result = solve_lrr(LrrProblem(x=x, a=x, lam=0.3))
    aff = lrr_affinity(result.z)
    off = aff[:per, per:].sum() + aff[per:, :per].sum()
    assert off < 0.05 * aff.sum()
