import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apa.glm import (BetaMaps, DesignMatrix, HrfParams, NoiseModel, OnsetTable, RankDeficiencyError,
                     ar1_precision_apply, ar1_whiten, build_design_matrix, canonical_hrf, estimate_gls,
                     positive_mask)
from apa.volume import Volume3D, Volume4D
from oracles import dense_gls


def as_series(F, shape=None):
    N, n = F.shape
    shape = shape or (n, 1, 1)
    return Volume4D(F.reshape((N,) + shape), (1.0, 1.0, 1.0))


def betas_matrix(b: BetaMaps):
    return np.vstack([m.data.ravel() for m in b.maps])


def test_hrf_peak_near_delay():
    h = canonical_hrf(HrfParams(), dt=0.1)
    assert abs(np.argmax(h) * 0.1 - 6.0) <= 0.2
    assert h.max() == 1.0
    assert h.sum() > 0
    assert len(h) == 320


def test_hrf_without_undershoot_is_nonnegative():
    assert np.all(canonical_hrf(HrfParams(undershoot_ratio=0.0), 0.05) >= 0)


def test_hrf_sample_count_halves():
    a = len(canonical_hrf(HrfParams(), 0.1))
    b = len(canonical_hrf(HrfParams(), 0.2))
    assert abs(a - 2 * b) <= 1


def test_hrf_rejects_bad_dt():
    with pytest.raises(ValueError):
        canonical_hrf(HrfParams(), 0.0)


def test_hrf_params_validate():
    with pytest.raises(ValueError):
        HrfParams(peak_delay=-1.0)
    with pytest.raises(ValueError):
        HrfParams(length=10.0)


def test_impulse_kernel_gives_unit_impulse():
    onsets = OnsetTable([(0.0, 1.0, 0, 0)], 1)
    D = build_design_matrix(onsets, [1.0], n_scans=5, tr=1.0, oversampling=1)
    assert D.values[:, 0].tolist() == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_disjoint_categories_have_disjoint_support():
    onsets = OnsetTable([(0.0, 2.0, 0, 0), (4.0, 2.0, 1, 0)], 2)
    D = build_design_matrix(onsets, [1.0], n_scans=8, tr=1.0, oversampling=1).values
    assert not np.any((D[:, 0] != 0) & (D[:, 1] != 0))
    assert D[:, 0].tolist() == [1, 1, 0, 0, 0, 0, 0, 0]
    assert D[:, 1].tolist() == [0, 0, 0, 0, 1, 1, 0, 0]


def test_design_columns_match_direct_convolution():
    onsets = OnsetTable([(3.0, 4.0, 0, 0), (20.0, 2.0, 1, 0), (30.0, 4.0, 0, 1)], 2)
    tr, N, over = 2.0, 30, 8
    D = build_design_matrix(onsets, HrfParams(), N, tr, oversampling=over).values
    dt = tr / over
    h = canonical_hrf(HrfParams(), dt)
    # Riemann sum of the convolution integral at every scan time
    for p in range(2):
        for k in range(N):
            t = k * tr
            total = 0.0
            for e in onsets.events:
                if e.category != p:
                    continue
                for j, s in enumerate(np.arange(0, N * tr, dt)):
                    if e.onset - 1e-9 <= s < e.onset + e.duration - 1e-9 and 0 <= t - s:
                        m = int(round((t - s) / dt))
                        if m < len(h):
                            total += h[m] * dt
            assert abs(D[k, p] - total) < 1e-12


def test_event_outside_window_raises():
    onsets = OnsetTable([(18.0, 4.0, 0, 0)], 1)
    with pytest.raises(ValueError):
        build_design_matrix(onsets, HrfParams(), n_scans=10, tr=2.0)


def test_onset_table_validation_and_csv(tmp_path):
    t = OnsetTable([(10.0, 2.0, 1, 0), (0.0, 2.0, 0, 0), (5.0, 1.5, 0, 1)], 2)
    assert [e.onset for e in t.events] == [0.0, 5.0, 10.0]
    assert t.conditions_per_category() == [2, 1]
    t.to_csv(tmp_path / "o.csv")
    assert OnsetTable.from_csv(tmp_path / "o.csv", 2) == t
    with pytest.raises(ValueError):
        OnsetTable([(0.0, 1.0, 0, 0)], 2)
    with pytest.raises(ValueError):
        OnsetTable([(0.0, 1.0, 2, 0)], 2)
    with pytest.raises(ValueError):
        OnsetTable([(0.0, 1.0, 0, 0), (3.0, 1.0, 0, 0)], 1)
    with pytest.raises(ValueError):
        OnsetTable([(0.0, 0.0, 0, 0)], 1)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel("ar1", rho=1.0)
    with pytest.raises(ValueError):
        NoiseModel("ar2")
    with pytest.raises(ValueError):
        NoiseModel(sigma2=0.0)


def test_identity_noiseless_recovery():
    rng = np.random.default_rng(0)
    D = rng.normal(size=(30, 3))
    B = rng.normal(size=(3, 12))
    est = estimate_gls(as_series(D @ B), DesignMatrix(D))
    np.testing.assert_allclose(betas_matrix(est), B, rtol=1e-10, atol=1e-12)
    assert np.all(est.residual_variance.data >= 0)
    assert np.all(est.residual_variance.data < 1e-20)


def test_identity_matches_ols_oracle():
    rng = np.random.default_rng(1)
    D = rng.normal(size=(25, 4))
    F = rng.normal(size=(25, 7))
    est = estimate_gls(as_series(F), DesignMatrix(D))
    beta, resvar = dense_gls(D, F, np.eye(25))
    np.testing.assert_allclose(betas_matrix(est), beta, rtol=1e-8)
    np.testing.assert_allclose(est.residual_variance.data.ravel(), resvar, rtol=1e-8)


def test_ar1_matches_dense_oracle():
    rng = np.random.default_rng(2)
    D = rng.normal(size=(10, 2))
    F = rng.normal(size=(10, 5))
    noise = NoiseModel("ar1", rho=0.4)
    est = estimate_gls(as_series(F), DesignMatrix(D), noise)
    beta, resvar = dense_gls(D, F, noise.covariance(10))
    np.testing.assert_allclose(betas_matrix(est), beta, rtol=1e-8)
    np.testing.assert_allclose(est.residual_variance.data.ravel(), resvar, rtol=1e-8)


def test_ar1_whitening_factor():
    n, rho = 12, -0.7
    V = NoiseModel("ar1", rho).covariance(n)
    W = ar1_whiten(np.eye(n), rho)
    np.testing.assert_allclose(W.T @ W, np.linalg.inv(V), atol=1e-10)
    x = np.random.default_rng(3).normal(size=(n, 3))
    np.testing.assert_allclose(ar1_precision_apply(x, rho), np.linalg.solve(V, x), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 20), st.integers(1, 4), st.floats(-0.9, 0.9), st.integers(0, 2**32 - 1))
def test_gls_equals_ols_after_cholesky_whitening(N, P, rho, seed):
    if N <= P:
        N = P + 1
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(N, P))
    F = rng.normal(size=(N, 3))
    noise = NoiseModel("ar1", rho)
    L = np.linalg.cholesky(np.linalg.inv(noise.covariance(N)))
    W = L.T
    beta, *_ = np.linalg.lstsq(W @ D, W @ F, rcond=None)
    est = estimate_gls(as_series(F), DesignMatrix(D), noise)
    np.testing.assert_allclose(betas_matrix(est), beta, rtol=1e-7, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 15), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_noiseless_recovery_property(extra, P, seed):
    rng = np.random.default_rng(seed)
    N = P + extra
    D = rng.normal(size=(N, P)) + np.eye(N, P) * 3
    B = rng.normal(size=(P, 4))
    est = estimate_gls(as_series(D @ B), DesignMatrix(D))
    np.testing.assert_allclose(betas_matrix(est), B, rtol=1e-10, atol=1e-10)


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(4)
    D = rng.normal(size=(10, 3))
    D[:, 2] = D[:, 0] + D[:, 1]
    with pytest.raises(RankDeficiencyError) as err:
        estimate_gls(as_series(rng.normal(size=(10, 2))), DesignMatrix(D))
    assert len(err.value.columns) == 1
    assert err.value.columns[0] in (0, 1, 2)
    assert "rank deficient" in str(err.value)


def test_too_few_scans():
    D = np.ones((2, 2))
    with pytest.raises(ValueError):
        estimate_gls(as_series(np.ones((2, 1))), DesignMatrix(D))


def test_scan_count_mismatch():
    with pytest.raises(ValueError):
        estimate_gls(as_series(np.ones((5, 2))), DesignMatrix(np.ones((6, 1))))


def test_chunking_does_not_change_result():
    rng = np.random.default_rng(5)
    D = rng.normal(size=(20, 3))
    F = rng.normal(size=(20, 50))
    a = estimate_gls(as_series(F), DesignMatrix(D), NoiseModel("ar1", 0.3), chunk_voxels=7)
    b = estimate_gls(as_series(F), DesignMatrix(D), NoiseModel("ar1", 0.3))
    np.testing.assert_allclose(betas_matrix(a), betas_matrix(b), rtol=1e-13, atol=1e-14)


def _maps(values):
    return BetaMaps((Volume3D(np.asarray(values, dtype=float).reshape(-1, 1, 1)),),
                    Volume3D(np.zeros((len(values), 1, 1))))


def test_positive_mask_examples():
    assert positive_mask(_maps([-1.0, -2.0])).maps[0].data.ravel().tolist() == [0.0, 0.0]
    assert positive_mask(_maps([0.0, 1e-300])).maps[0].data.ravel().tolist() == [0.0, 1e-300]
    assert positive_mask(_maps([-1.0, 2.0])).maps[0].data.ravel().tolist() == [0.0, 2.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_positive_mask_idempotent_and_bounded(values):
    once = positive_mask(_maps(values))
    twice = positive_mask(BetaMaps(once.maps, Volume3D(np.zeros((len(values), 1, 1)))))
    assert once.maps[0] == twice.maps[0]
    out = once.maps[0].data.ravel()
    assert np.all(out >= 0)
    assert np.all(out <= np.abs(values))


def test_roundoff_level_coefficients_are_exact_zeros():
    rng = np.random.default_rng(6)
    D = np.abs(rng.normal(size=(30, 3)))
    B = np.array([[1.5, 0.0], [0.0, -0.5], [0.7, 2.0]])
    est = estimate_gls(as_series(D @ B), DesignMatrix(D))
    got = betas_matrix(est)
    assert got[1, 0] == 0.0 and got[0, 1] == 0.0
    assert positive_mask(est).maps[1].data.ravel().tolist() == [0.0, 0.0]
