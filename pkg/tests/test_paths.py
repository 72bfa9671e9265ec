import numpy as np
import pytest
from scipy.stats import ks_2samp

from expfbm import kernel as kn
from expfbm import paths as pth
from expfbm.functional import functional_F


class TestIncrements:
    def test_deterministic(self, table64):
        a = pth.sample_bm_increments(table64.grid, 123, 4)
        b = pth.sample_bm_increments(table64.grid, 123, 4)
        assert np.array_equal(a, b)

    def test_prefix_stable_in_path_count(self, table64):
        a = pth.sample_bm_increments(table64.grid, 123, 100)
        b = pth.sample_bm_increments(table64.grid, 123, 10_000)
        assert np.array_equal(a, b[:100])

    def test_moments(self, table64):
        incr = pth.sample_bm_increments(table64.grid, 7, 100_000)
        one = incr[:, 3]
        sd = np.sqrt(table64.dt)
        assert abs(one.mean()) < 4.0 * sd / np.sqrt(len(one))
        z = incr[:, 10] / sd
        assert abs(z.var(ddof=1) - 1.0) < 0.02


class TestVolterraMap:
    def test_zero_increments_zero_path(self, table64):
        paths = pth.fbm_from_bm(table64, np.zeros((3, table64.n)))
        assert np.all(paths.values == 0.0)

    def test_dimension_mismatch(self, table64):
        with pytest.raises(ValueError):
            pth.fbm_from_bm(table64, np.zeros((2, table64.n + 5)))

    def test_starts_at_zero(self, table64):
        paths = pth.sample_fbm_volterra(table64, 10, seed=1)
        assert np.all(paths.values[:, 0] == 0.0)

    def test_covariance_against_closed_form(self, table64):
        paths = pth.sample_fbm_volterra(table64, 100_000, seed=5)
        i, j = table64.n, table64.n // 2
        prod = paths.values[:, i] * paths.values[:, j]
        se = prod.std(ddof=1) / np.sqrt(len(prod))
        target = kn.covariance(0.7, table64.grid[i], table64.grid[j])
        assert abs(prod.mean() - target) < 3.0 * se + 5e-3

    def test_terminal_variance(self, table64):
        paths = pth.sample_fbm_volterra(table64, 100_000, seed=6)
        v = paths.values[:, -1] ** 2
        se = v.std(ddof=1) / np.sqrt(len(v))
        assert abs(v.mean() - 1.0) < 3.0 * se + 5e-3


class TestCholesky:
    def test_factor_reproduces_variances(self, table64):
        L = pth.cholesky_factor(0.7, table64.grid)
        cov = L @ L.T
        assert np.allclose(np.diag(cov), table64.grid[1:] ** 1.4, rtol=1e-10)

    def test_seed_determinism(self, table64):
        a = pth.sample_fbm_cholesky(0.7, table64.grid, 5, seed=9)
        b = pth.sample_fbm_cholesky(0.7, table64.grid, 5, seed=9)
        assert np.array_equal(a.values, b.values)
        assert a.increments is None

    def test_size_limit(self):
        grid = np.linspace(0.0, 1.0, 5001)
        with pytest.raises(ValueError):
            pth.sample_fbm_cholesky(0.7, grid, 1, seed=0)

    def test_ks_against_volterra(self, table64):
        volt = pth.sample_fbm_volterra(table64, 10_000, seed=11)
        chol = pth.sample_fbm_cholesky(0.7, table64.grid, 10_000, seed=12)
        stat, _ = ks_2samp(volt.values[:, -1], chol.values[:, -1])
        crit = 1.6276 * np.sqrt(2.0 / 10_000)
        assert stat < crit


class TestConditionalLaw:
    def test_no_information(self, table64):
        paths = pth.sample_fbm_volterra(table64, 4, seed=3)
        law = pth.conditional_law(paths, table64, 0.0)
        assert np.all(law.means == 0.0)
        assert np.allclose(law.variances, table64.grid ** 1.4)

    def test_full_information(self, table64):
        paths = pth.sample_fbm_volterra(table64, 4, seed=3)
        law = pth.conditional_law(paths, table64, 1.0)
        assert np.allclose(law.means, paths.values, atol=1e-12)
        assert np.all(law.variances == 0.0)

    def test_tower_decomposition(self, table64):
        paths = pth.sample_fbm_volterra(table64, 100_000, seed=8)
        law = pth.conditional_law(paths, table64, 0.5)
        N = law.means[:, -1]
        se = N.std(ddof=1) / np.sqrt(len(N))
        assert abs(N.mean()) < 3.0 * se
        assert abs(N.var(ddof=1) + law.variances[-1] - 1.0) < 5e-3

    def test_rejects_cholesky_paths(self, table64):
        chol = pth.sample_fbm_cholesky(0.7, table64.grid, 2, seed=1)
        with pytest.raises(ValueError):
            pth.conditional_law(chol, table64, 0.5)


class TestResampleFuture:
    def test_shapes_and_frozen_past(self, table64):
        paths = pth.sample_fbm_volterra(table64, 3, seed=4)
        gen = np.random.Generator(np.random.Philox(1))
        k = 32
        inner = pth.resample_future(table64, paths, k, 8, gen)
        assert inner.shape == (3, 8, table64.n + 1)
        assert np.allclose(inner[:, :, :k], paths.values[:, None, :k], atol=1e-12)

    def test_conditional_moments(self, table64):
        paths = pth.sample_fbm_volterra(table64, 1, seed=4)
        gen = np.random.Generator(np.random.Philox(2))
        k = 32
        inner = pth.resample_future(table64, paths, k, 4000, gen)
        law = pth.conditional_law(paths, table64, table64.grid[k])
        term = inner[0, :, -1]
        # mean matches the conditional mean, variance the discrete map variance
        assert abs(term.mean() - law.means[0, -1]) < 4.0 * term.std() / np.sqrt(4000)
        disc_var = table64.map_variances[-1] - table64.partial_map_variances[-1, k]
        assert abs(term.var(ddof=1) / disc_var - 1.0) < 0.1


class TestMartingale:
    def test_terminal_equals_functional(self, table64, params):
        paths = pth.sample_fbm_volterra(table64, 50, seed=13)
        M = pth.martingale_M(paths, table64, params, 1.0)
        F = functional_F(paths, params)
        assert np.allclose(M, F, rtol=1e-14)

    def test_initial_equals_grid_mean(self, table64, params):
        paths = pth.sample_fbm_volterra(table64, 2, seed=13)
        M0 = pth.martingale_M(paths, table64, params, 0.0)
        tau = pth.trapezoid_weights(table64.grid)
        oracle = np.sum(tau * np.exp(0.5 * table64.grid ** 1.4))
        assert np.all(np.abs(M0 - oracle) < 1e-10)

    def test_martingale_property(self, table64, params):
        paths = pth.sample_fbm_volterra(table64, 100_000, seed=14)
        M = pth.martingale_M(paths, table64, params, 0.5)
        tau = pth.trapezoid_weights(table64.grid)
        M0 = np.sum(tau * np.exp(0.5 * table64.grid ** 1.4))
        se = M.std(ddof=1) / np.sqrt(len(M))
        assert abs(M.mean() - M0) < 3.0 * se

    def test_max_moment_stability(self, table128, table256, params):
        # E[max_r M_r^p] stable across grid refinement for p in {2, 4}
        ests = {}
        for table in (table128, table256):
            paths = pth.sample_fbm_volterra(table, 10_000, seed=15)
            maxM = np.zeros(paths.n_paths)
            for k in range(0, table.n + 1, max(1, table.n // 64)):
                M = pth.martingale_M(paths, table, params, table.grid[k])
                np.maximum(maxM, M, out=maxM)
            ests[table.n] = [np.mean(maxM ** p) for p in (2, 4)]
        for p_idx in (0, 1):
            a, b = ests[128][p_idx], ests[256][p_idx]
            assert abs(a - b) / b < 0.10


class TestCsvDump:
    def test_header_and_shape(self, table64, tmp_path):
        paths = pth.sample_fbm_volterra(table64, 2, seed=21)
        out = tmp_path / "paths.csv"
        pth.write_paths_csv(out, paths)
        text = out.read_text().splitlines()
        header_lines = [l for l in text if l.startswith("#")]
        assert any("seed=21" in l for l in header_lines)
        assert any("method=volterra" in l for l in header_lines)
        rows = [l for l in text if not l.startswith("#")]
        assert rows[0] == "path_id,t,dB,B_H"
        assert len(rows) == 1 + 2 * (table64.n + 1)
