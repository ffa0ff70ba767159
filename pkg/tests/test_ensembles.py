"""Ensemble kernels: anomalies, truncated SVD, GC taper, Latin hypercube."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chop_enkf.ensembles import (
    ensemble_mean_and_anomalies,
    gaspari_cohn,
    latin_hypercube,
    truncated_svd_99,
)
from chop_enkf.errors import DegenerateEnsembleError, DegenerateMatrixError, InvalidConfigError

# Coefficients of the two compactly supported quintic branches, highest power
# first, used as an independent polynomial oracle via np.polyval.
GC_NEAR = [-1 / 4, 1 / 2, 5 / 8, -5 / 3, 0, 1]
GC_FAR = [1 / 12, -1 / 2, 5 / 8, 5 / 3, -5, 4]  # plus the -2/(3z) tail


def gc_oracle(z):
    if z <= 1:
        return np.polyval(GC_NEAR, z)
    if z <= 2:
        return np.polyval(GC_FAR, z) - 2.0 / (3.0 * z)
    return 0.0


class TestMeanAndAnomalies:
    def test_identical_members(self):
        v = np.array([1.0, -2.0, 3.0])
        mean, anoms = ensemble_mean_and_anomalies(np.tile(v[:, None], (1, 5)))
        np.testing.assert_array_equal(mean, v)
        np.testing.assert_array_equal(anoms, np.zeros((3, 5)))

    def test_two_members(self):
        mean, anoms = ensemble_mean_and_anomalies(np.array([[0.0, 2.0]]))
        np.testing.assert_array_equal(mean, [1.0])
        np.testing.assert_array_equal(anoms, [[-1.0, 1.0]])

    def test_outer_product_is_sample_covariance(self, rng):
        ens = rng.normal(size=(5, 10))
        _, anoms = ensemble_mean_and_anomalies(ens)
        # textbook two-pass covariance
        mean = ens.mean(axis=1)
        cov = np.zeros((5, 5))
        for j in range(10):
            diff = ens[:, j] - mean
            cov += np.outer(diff, diff)
        cov /= 9
        np.testing.assert_allclose(anoms @ anoms.T, cov, atol=1e-12)

    def test_columns_sum_to_zero(self, rng):
        ens = rng.normal(size=(4, 7)) * 100
        _, anoms = ensemble_mean_and_anomalies(ens)
        np.testing.assert_allclose(anoms.sum(axis=1), 0.0, atol=1e-10 * np.abs(ens).max())

    def test_single_member_rejected(self):
        with pytest.raises(DegenerateEnsembleError):
            ensemble_mean_and_anomalies(np.ones((3, 1)))


class TestTruncatedSvd:
    def test_rank_one(self, rng):
        m = np.outer(rng.normal(size=6), rng.normal(size=4))
        svd = truncated_svd_99(m)
        assert svd.rank == 1
        recon = (svd.u * svd.singular_values) @ svd.v.T
        np.testing.assert_allclose(recon, m, atol=1e-10 * np.abs(m).max())

    def test_dominant_spectrum_keeps_one(self):
        # fractions 0.9804, 0.9902: the first already holds <= 99%, adding the next exceeds
        assert truncated_svd_99(np.diag([100.0, 1.0, 1.0])).rank == 1

    def test_boundary_is_inclusive(self):
        # cumulative fractions 0.50, 0.99, 1.0: exactly 99% keeps the second value
        assert truncated_svd_99(np.diag([50.0, 49.0, 1.0])).rank == 2

    def test_all_zero_rejected(self):
        with pytest.raises(DegenerateMatrixError):
            truncated_svd_99(np.zeros((3, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            truncated_svd_99(np.array([[np.nan, 1.0]]))

    @given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_truncation_rule_and_orthonormality(self, k, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(k + rng.integers(0, 4), k))
        svd = truncated_svd_99(m)
        s_full = np.linalg.svd(m, compute_uv=False)
        total = s_full.sum()
        fractions = np.cumsum(s_full) / total
        r = svd.rank
        assert r >= 1
        assert np.all(np.diff(svd.singular_values) <= 1e-12)
        assert np.all(svd.singular_values > 0)
        if r > 1:
            assert fractions[r - 1] <= 0.99 + 1e-9
        if r < s_full.size:
            assert fractions[r] > 0.99 - 1e-9
        np.testing.assert_allclose(svd.u.T @ svd.u, np.eye(r), atol=1e-8)
        np.testing.assert_allclose(svd.v.T @ svd.v, np.eye(r), atol=1e-8)
        recon = (svd.u * svd.singular_values) @ svd.v.T
        discarded = (1.0 - svd.energy_kept) * total
        assert np.linalg.norm(m - recon) <= discarded + 1e-9 * total


class TestGaspariCohn:
    def test_anchor_values(self):
        assert gaspari_cohn(0.0) == 1.0
        assert abs(gaspari_cohn(2.0)) < 1e-15
        assert gaspari_cohn(3.0) == 0.0

    def test_branch_agreement_at_one(self):
        near = np.polyval(GC_NEAR, 1.0)
        far = np.polyval(GC_FAR, 1.0) - 2.0 / 3.0
        assert abs(near - 5 / 24) < 1e-15
        assert abs(far - 5 / 24) < 1e-12
        assert abs(gaspari_cohn(1.0) - 5 / 24) < 1e-12

    def test_continuity_at_branch_points(self):
        for z0 in (1.0, 2.0):
            below = gaspari_cohn(z0 - 1e-9)
            above = gaspari_cohn(z0 + 1e-9)
            assert abs(below - above) < 1e-7  # slope ~1, so 2e-9 apart in z
            assert abs(gaspari_cohn(z0) - gc_oracle(z0)) < 1e-12

    @given(st.floats(min_value=0.0, max_value=4.0, allow_nan=False))
    @settings(max_examples=80, deadline=None)
    def test_matches_polynomial_oracle(self, z):
        assert abs(gaspari_cohn(z) - gc_oracle(z)) < 1e-12

    def test_non_increasing_and_bounded(self):
        grid = np.linspace(0.0, 2.0, 2001)
        values = gaspari_cohn(grid)
        assert np.all(np.diff(values) <= 1e-12)
        assert np.all(values >= 0.0) and np.all(values <= 1.0)

    def test_negative_argument_rejected(self):
        with pytest.raises(ValueError):
            gaspari_cohn(-0.1)


class TestLatinHypercube:
    def test_one_sample_per_quartile(self):
        samples = latin_hypercube([[0.0, 1.0]], 4, seed=0)[0]
        strata = np.sort(np.floor(samples * 4).astype(int))
        np.testing.assert_array_equal(strata, [0, 1, 2, 3])

    def test_bounds_and_strata_for_search_ranges(self):
        ranges = [[0.0, 2.0], [0.05, 1.0]]
        samples = latin_hypercube(ranges, 30, seed=3)
        for dim, (lo, hi) in enumerate(ranges):
            vals = samples[dim]
            assert np.all(vals >= lo) and np.all(vals <= hi)
            strata = np.floor((vals - lo) / (hi - lo) * 30).astype(int)
            strata = np.clip(strata, 0, 29)
            np.testing.assert_array_equal(np.bincount(strata, minlength=30), np.ones(30))

    def test_deterministic_and_seed_sensitive(self):
        a = latin_hypercube([[0.0, 1.0], [0.0, 1.0]], 8, seed=11)
        b = latin_hypercube([[0.0, 1.0], [0.0, 1.0]], 8, seed=11)
        np.testing.assert_array_equal(a, b)
        outputs = {latin_hypercube([[0.0, 1.0]], 8, seed=s).tobytes() for s in range(100)}
        assert len(outputs) == 100

    def test_invalid_ranges_rejected(self):
        with pytest.raises(InvalidConfigError):
            latin_hypercube([], 4, seed=0)
        with pytest.raises(InvalidConfigError):
            latin_hypercube([[1.0, 1.0]], 4, seed=0)
        with pytest.raises(InvalidConfigError):
            latin_hypercube([[0.0, 1.0]], 0, seed=0)

    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=1, max_value=40),
        st.integers(min_value=0, max_value=10_000),
    )
    @settings(max_examples=40, deadline=None)
    def test_marginal_stratification(self, h, n, seed):
        ranges = [[float(i), float(i) + 1.0 + i] for i in range(h)]
        samples = latin_hypercube(ranges, n, seed=seed)
        for dim, (lo, hi) in enumerate(ranges):
            strata = np.floor((samples[dim] - lo) / (hi - lo) * n).astype(int)
            strata = np.clip(strata, 0, n - 1)
            assert np.bincount(strata, minlength=n).max() == 1
