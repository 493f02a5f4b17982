import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, special

from vcae import numerics as nx
from vcae.copula import BivariateCopula, Family, sample_pair


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        assert_array_equal(nx.matmul(np.eye(3), a), a)

    def test_hand_example(self):
        assert_array_equal(nx.matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])

    def test_triple_loop_oracle(self):
        rng = nx.make_rng(3)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        assert_allclose(nx.matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(nx.NumericError):
            nx.matmul([[np.inf]], [[1.0]])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_associativity(self, seed):
        rng = nx.make_rng(seed)
        a, b, c = rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3, 6))
        left = nx.matmul(nx.matmul(a, b), c)
        right = nx.matmul(a, nx.matmul(b, c))
        assert np.max(np.abs(left - right)) <= 1e-9 * max(1.0, np.max(np.abs(left)))


class TestNormal:
    def test_centre(self):
        assert nx.std_normal_cdf(0.0) == 0.5
        assert nx.std_normal_quantile(0.5) == 0.0

    def test_cdf_against_quadrature(self):
        pdf = lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
        ref = 0.5 + integrate.quad(pdf, 0.0, 1.959964, epsabs=1e-15)[0]
        assert abs(nx.std_normal_cdf(1.959964) - ref) <= 1e-12
        assert abs(ref - 0.975) < 1e-6

    def test_cdf_against_erf(self):
        x = np.linspace(-8, 8, 1601)
        ref = 0.5 * special.erfc(-x / math.sqrt(2))
        assert_allclose(nx.std_normal_cdf(x), ref, rtol=0, atol=1e-12)

    def test_symmetry(self):
        x = nx.make_rng(0).normal(size=200) * 3
        assert_allclose(nx.std_normal_cdf(-x), 1 - nx.std_normal_cdf(x), atol=1e-15)

    def test_quantile_against_bisection(self):
        lo, hi = 0.0, 5.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if nx.std_normal_cdf(mid) < 0.975:
                lo = mid
            else:
                hi = mid
        assert abs(nx.std_normal_quantile(0.975) - lo) <= 1e-12
        assert abs(lo - 1.959964) < 1e-6

    def test_round_trip_seeded(self):
        p = nx.make_rng(11).random(1000)
        assert np.max(np.abs(nx.std_normal_cdf(nx.std_normal_quantile(p)) - p)) <= 1e-9

    def test_round_trip_extreme(self):
        p = np.concatenate([np.logspace(-12, -1, 200), 1 - np.logspace(-12, -1, 200)])
        assert np.max(np.abs(nx.std_normal_cdf(nx.std_normal_quantile(p)) - p)) <= 1e-9

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, np.nan])
    def test_quantile_domain(self, p):
        with pytest.raises(nx.DomainError):
            nx.std_normal_quantile(p)


class TestStudentT:
    @pytest.mark.parametrize("nu", [0.5, 1, 3, 30])
    def test_centre(self, nu):
        assert nx.student_t_cdf(0.0, nu) == 0.5

    def test_normal_limit(self):
        for x in (-2.0, 0.0, 2.0):
            assert abs(nx.student_t_cdf(x, 1e6) - nx.std_normal_cdf(x)) <= 1e-4

    def test_cdf_against_density_quadrature(self):
        for nu in (1.5, 4.0, 11.0):
            pdf = lambda t: math.exp(nx.student_t_logpdf(t, nu))
            for x in (-3.0, -0.7, 1.2):
                ref = 0.5 + math.copysign(integrate.quad(pdf, 0, abs(x), epsabs=1e-14)[0], x)
                assert abs(nx.student_t_cdf(x, nu) - ref) < 1e-11

    def test_round_trip(self):
        x = np.linspace(-6, 6, 61)
        for nu in (1.0, 2.5, 7.0, 30.0):
            back = nx.student_t_quantile(nx.student_t_cdf(x, nu), nu)
            assert np.max(np.abs(back - x)) <= 1e-7

    def test_quantile_inverts_cdf(self):
        p = nx.make_rng(2).random(500)
        for nu in (2.0, 5.0):
            assert np.max(np.abs(nx.student_t_cdf(nx.student_t_quantile(p, nu), nu) - p)) <= 1e-8

    def test_domain_errors(self):
        with pytest.raises(nx.DomainError):
            nx.student_t_cdf(0.3, 0.0)
        with pytest.raises(nx.DomainError):
            nx.student_t_quantile(1.0, 3.0)

    @pytest.mark.parametrize("nu", [2, 3, 4, 6, 10, 20, 30, 31, 3.5])
    def test_fast_quantile_matches_cdf(self, nu):
        rng = nx.make_rng(5)
        p = np.concatenate([rng.random(2000), 10 ** -rng.uniform(1, 10, 500),
                            1 - 10 ** -rng.uniform(1, 10, 500)])
        q = nx.t_ppf(p, nu)
        lower = np.minimum(p, 1 - p)
        tail = special.stdtr(nu, -np.abs(q))
        assert np.max(np.abs(tail - lower) / lower) < 1e-12
        assert_allclose(q, special.stdtrit(nu, p), rtol=1e-9, atol=1e-9)
        assert nx.t_ppf(0.5, nu) == 0.0


class TestBrent:
    def test_quadratic(self):
        assert abs(nx.brent_minimize(lambda x: (x - 2) ** 2, 0, 5, tol=1e-8) - 2) <= 1e-8

    def test_constant(self):
        x = nx.brent_minimize(lambda x: 1.0, 0, 5)
        assert 0 <= x <= 5

    def test_non_finite(self):
        with pytest.raises(nx.NumericError):
            nx.brent_minimize(lambda x: math.inf if x > 1 else x, 0, 5)

    def test_empty_bracket(self):
        with pytest.raises(nx.DomainError):
            nx.brent_minimize(lambda x: x, 1, 1)

    def test_clayton_likelihood_against_grid_scan(self):
        uv = sample_pair(BivariateCopula(Family.CLAYTON, (2.0,)), 500, seed=4)

        def nll(theta):
            return -BivariateCopula(Family.CLAYTON, (theta,)).loglik(uv[:, 0], uv[:, 1])

        tol = 1e-6
        best = nx.brent_minimize(nll, 0.5, 5.0, tol=tol)
        # grid scan at step 1e-4 around the optimum, then parabola through the best three
        grid = np.arange(1.0, 4.0, 1e-4)
        vals = np.array([nll(t) for t in grid])
        i = int(np.argmin(vals))
        y0, y1, y2 = vals[i - 1:i + 2]
        vertex = grid[i] + 1e-4 * 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)
        assert abs(best - vertex) <= 2 * tol + 1e-6


def test_rng_reproducible():
    assert_array_equal(nx.make_rng(9).random(10), nx.make_rng(9).random(10))
    assert not np.array_equal(nx.make_rng(9).random(10), nx.make_rng(10).random(10))
