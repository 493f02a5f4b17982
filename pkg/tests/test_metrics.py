import csv
import math
import tracemalloc

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vcae.copula import INDEPENDENCE, BivariateCopula, Family
from vcae.numerics import DomainError, NumericError, ShapeError
from vcae.vine import DVineModel, EmpiricalMarginal, LatentDensity, fit_dvine
from vcae.metrics import (GridSpec, MonteCarloSpec, entropy, fingerprint_score, grid_masses,
                          kl_divergence, latent_grid, pair_copula_density, pairwise_density_export)


class Tabulated:
    """Density on the unit cube given by a table of cell log-weights."""

    def __init__(self, logw, k):
        self.logw = np.asarray(logw, dtype=float)
        self.k = k
        self.dim = int(round(math.log(self.logw.size, k)))

    def log_density(self, pts):
        idx = np.minimum((pts * self.k).astype(int), self.k - 1)
        return self.logw[np.ravel_multi_index(idx.T, (self.k,) * self.dim)]


def independence_vine(n, seed=0):
    rng = np.random.default_rng(seed)
    marg = [EmpiricalMarginal(rng.normal(size=400)) for _ in range(n)]
    return DVineModel(list(range(n)), [[INDEPENDENCE] * (n - 1 - t) for t in range(n - 1)], marg)


def fitted_vine(n, seed, rows=800):
    rng = np.random.default_rng(seed)
    corr = np.full((n, n), 0.4) + 0.6 * np.eye(n)
    return fit_dvine(rng.multivariate_normal(np.zeros(n), corr, size=rows))


def collect(density, grid, chunk=4096):
    idx, mass = zip(*grid_masses(density, grid, chunk))
    return np.concatenate(idx), np.concatenate(mass)


class TestGridMasses:
    def test_uniform_square(self):
        _, mass = collect(independence_vine(2), GridSpec(10, 2))
        assert_allclose(mass, 0.01, rtol=0, atol=1e-15)

    def test_sum_to_one(self):
        idx, mass = collect(fitted_vine(3, 1), GridSpec(20, 3), chunk=1000)
        assert abs(mass.sum() - 1) <= 1e-9
        assert np.array_equal(idx, np.arange(8000))

    def test_chunk_size_irrelevant(self):
        vine = fitted_vine(3, 2)
        _, a = collect(vine, GridSpec(12, 3), chunk=7)
        _, b = collect(vine, GridSpec(12, 3), chunk=5000)
        assert_allclose(a, b, rtol=1e-12)

    def test_zero_density(self):
        with pytest.raises(NumericError):
            list(grid_masses(Tabulated(np.full(16, -np.inf), 4), GridSpec(4, 2)))

    def test_grid_spec_validation(self):
        with pytest.raises(DomainError):
            GridSpec(1, 2)
        with pytest.raises(DomainError):
            GridSpec(5, 2, scale="latent")
        g = GridSpec(4, 2, scale="latent", domain=[(0, 1), (-2, 2)])
        assert_allclose(g.points(0, 2), [[0.125, -1.5], [0.125, -0.5]])


class TestEntropy:
    def test_uniform_is_one(self):
        s = entropy(independence_vine(3), GridSpec(15, 3))
        assert abs(s.normalized - 1) <= 1e-9
        assert abs(s.raw - 3 * math.log(15)) <= 1e-9
        assert s.estimator == "grid" and s.size == 15

    def test_point_mass_is_zero(self):
        logw = np.full(64, -np.inf)
        logw[37] = 0.0
        assert entropy(Tabulated(logw, 8), GridSpec(8, 2)).normalized == 0.0

    def test_matches_direct_sum(self):
        vine = fitted_vine(3, 3)
        _, mass = collect(vine, GridSpec(10, 3))
        direct = -np.sum(mass * np.log(mass))
        s = entropy(vine, GridSpec(10, 3), chunk=333)
        assert abs(s.raw - direct) <= 1e-10
        assert abs(s.normalized - direct / math.log(1000)) <= 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        logw = rng.normal(size=400)
        a = entropy(Tabulated(logw, 20), GridSpec(20, 2), chunk=64)
        b = entropy(Tabulated(rng.permutation(logw), 20), GridSpec(20, 2), chunk=64)
        assert abs(a.raw - b.raw) <= 1e-12

    def test_in_unit_interval(self):
        for seed in range(3):
            s = entropy(fitted_vine(2, seed), GridSpec(30, 2))
            assert 0 <= s.normalized <= 1

    def test_thread_count_deterministic(self, monkeypatch):
        vine = fitted_vine(3, 5)
        monkeypatch.setenv("VCAE_THREADS", "1")
        a = entropy(vine, GridSpec(16, 3), chunk=256)
        mc_a = entropy(vine, MonteCarloSpec(3000, block=500), seed=2)
        monkeypatch.setenv("VCAE_THREADS", "3")
        b = entropy(vine, GridSpec(16, 3), chunk=256)
        mc_b = entropy(vine, MonteCarloSpec(3000, block=500), seed=2)
        assert a.raw == b.raw and mc_a.raw == mc_b.raw

    def test_monte_carlo_gaussian(self):
        rng = np.random.default_rng(6)
        vine = fit_dvine(rng.normal(size=(50_000, 2)))
        s = entropy(vine, MonteCarloSpec(20_000), seed=1)
        exact = math.log(2 * math.pi * math.e)
        assert s.normalized is None and s.estimator == "monte_carlo"
        assert abs(s.raw - exact) <= 0.05 * exact

    def test_monte_carlo_copula_scale(self):
        s = entropy(independence_vine(3), MonteCarloSpec(2000, scale="copula"))
        assert abs(s.raw) <= 1e-12

    @pytest.mark.slow
    def test_memory_bounded(self):
        vine = fitted_vine(5, 7, rows=1000)
        tracemalloc.start()
        entropy(vine, GridSpec(20, 5))
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert peak < 100 * 2**20


class TestKL:
    def test_self_is_zero(self):
        vine = fitted_vine(3, 8)
        assert kl_divergence(vine, vine, GridSpec(12, 3)) <= 1e-9
        assert kl_divergence(vine, vine, MonteCarloSpec(2000)) <= 1e-9

    def test_against_direct_sum(self):
        p, q = fitted_vine(2, 9), fitted_vine(2, 10)
        _, mp = collect(p, GridSpec(25, 2))
        _, mq = collect(q, GridSpec(25, 2))
        direct = np.sum(mp * np.log(mp / np.maximum(mq, 1e-12)))
        assert abs(kl_divergence(p, q, GridSpec(25, 2), chunk=100) - direct) <= 1e-10

    def test_disjoint_support_finite(self):
        a, b = np.full(16, -np.inf), np.full(16, -np.inf)
        a[:8], b[8:] = 0.0, 0.0
        kl = kl_divergence(Tabulated(a, 4), Tabulated(b, 4), GridSpec(4, 2))
        assert abs(kl - (-math.log(1e-12) + math.log(1 / 8))) <= 1e-9

    def test_gaussian_mean_shift(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(50_000, 2))
        b = rng.normal(size=(50_000, 2))
        b[:, 0] += 1.0
        kl = kl_divergence(fit_dvine(a), fit_dvine(b), MonteCarloSpec(20_000), seed=0)
        assert abs(kl - 0.5) <= 0.15 * 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            kl_divergence(fitted_vine(2, 0), fitted_vine(3, 0), GridSpec(4, 2))

    def test_latent_grid_union(self):
        p, q = fitted_vine(2, 11), fitted_vine(2, 12)
        g = latent_grid([p, q], 10)
        for d in range(2):
            lo = min(p.marginals[d].support[0], q.marginals[d].support[0])
            assert g.domain[d][0] == lo
        assert kl_divergence(p, q, g) > 0


class TestPairwise:
    def test_tree1_oracle(self, tmp_path):
        vine = fitted_vine(3, 13, rows=1500)
        k = 12
        files = pairwise_density_export(vine, k, tmp_path, samples=500)
        rows = np.loadtxt(tmp_path / "pair_0_1.csv", delimiter=",", skiprows=1)
        a, b = vine.order.index(0), vine.order.index(1)
        assert abs(a - b) == 1
        m0, m1 = vine.marginals[0], vine.marginals[1]
        cop = vine.pairs[0][min(a, b)]
        u0, u1 = m0.cdf(rows[:, 0]), m1.cdf(rows[:, 1])
        cu = cop.pdf(u0, u1) if a < b else cop.pdf(u1, u0)
        oracle = cu * np.exp(m0.logpdf(rows[:, 0]) + m1.logpdf(rows[:, 1]))
        assert np.max(np.abs(rows[:, 2] - oracle) / oracle) <= 1e-6
        assert len(files) == 3 + 3

    def test_row_count_and_header(self, tmp_path):
        pairwise_density_export(independence_vine(3), 7, tmp_path, scale="copula", samples=200)
        with open(tmp_path / "pair_0_2.csv", newline="") as fh:
            lines = list(csv.reader(fh))
        assert lines[0] == ["u1", "u2", "density"]
        assert len(lines) == 7 * 7 + 1
        assert b"\r" not in (tmp_path / "pair_0_2.csv").read_bytes()
        with open(tmp_path / "marginal_1.csv") as fh:
            assert fh.readline().strip() == "h_1,density"

    def test_independence_flat(self):
        vine = independence_vine(4)
        centres = (np.arange(20) + 0.5) / 20
        ua, ub = np.repeat(centres, 20), np.tile(centres, 20)
        for a, b in [(0, 1), (0, 2), (0, 3), (1, 3)]:
            dens = pair_copula_density(vine, a, b, ua, ub, samples=10_000)
            assert np.std(dens) / np.mean(dens) < 0.10

    def test_marginalized_gaussian(self):
        # Gaussian D-vine with independent tree 2: the (0, 2) margin is Gaussian(r1 * r2)
        g1 = BivariateCopula(Family.GAUSSIAN, (0.7,))
        g2 = BivariateCopula(Family.GAUSSIAN, (0.6,))
        vine = DVineModel([0, 1, 2], [[g1, g2], [INDEPENDENCE]], independence_vine(3).marginals)
        centres = (np.arange(6) + 0.5) / 6
        ua, ub = np.repeat(centres, 6), np.tile(centres, 6)
        dens = pair_copula_density(vine, 0, 2, ua, ub, samples=10_000)
        exact = BivariateCopula(Family.GAUSSIAN, (0.42,)).pdf(ua, ub)
        assert np.max(np.abs(dens - exact) / exact) < 0.1

    def test_k_bounds(self, tmp_path):
        with pytest.raises(DomainError):
            pairwise_density_export(independence_vine(2), 201, tmp_path)


class TestFingerprint:
    def test_identities(self):
        rng = np.random.default_rng(0)
        ref = rng.random((10, 16)) * 0.05
        mask = np.zeros(16, dtype=bool)
        mask[[3, 7]] = True
        assert fingerprint_score(ref, mask, ref) == 0.0
        forced = ref.copy()
        forced[:, mask] = 1.0
        assert abs(fingerprint_score(forced, mask, ref) - (1 - ref[:, mask].mean())) <= 1e-15
        assert fingerprint_score(forced, mask, np.zeros((3, 16))) == 1.0

    def test_empty_mask(self):
        with pytest.raises(DomainError):
            fingerprint_score(np.zeros((2, 4)), np.zeros(4, dtype=bool), np.zeros((2, 4)))

    def test_shape(self):
        with pytest.raises(ShapeError):
            fingerprint_score(np.zeros((2, 4)), np.ones(5, dtype=bool), np.zeros((2, 4)))


def test_latent_density_accepted():
    vine = fitted_vine(2, 14)
    assert entropy(LatentDensity(vine), GridSpec(10, 2)).raw == entropy(vine, GridSpec(10, 2)).raw
