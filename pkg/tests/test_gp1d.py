#!/usr/bin/env python3
"""
Tests for the 1-D GP benchmark and its closed-form posterior
"""

import os
import sys
import unittest

import numpy as np
from scipy import integrate

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cmlrain.gp1d import (IntervalSet, RbfKernel1D, build_gp1d_problem, default_grid, default_intervals,
                          interval_operator, kernel_double_integral, kernel_interval_integral,
                          oracle_draws, oracle_posterior, prior_covariance_1d, sample_prior_1d)

SLOW = bool(os.environ.get("CMLRAIN_SLOW_TESTS"))


class TestKernelIntegrals(unittest.TestCase):
    """Closed-form kernel integrals against adaptive quadrature"""

    def setUp(self):
        np.random.seed(42)
        self.n_cases = 1000 if SLOW else 60

    def random_interval(self):
        a = np.random.uniform(-5, 4)
        return a, min(a + np.random.uniform(0.05, 3.0), 5.0)

    def test_single_integral(self):
        for _ in range(self.n_cases):
            kernel = RbfKernel1D(np.random.uniform(0.2, 2.0), np.random.uniform(0.5, 2.0))
            a, b = self.random_interval()
            s = np.random.uniform(-5, 5)
            exact, _ = integrate.quad(lambda t: kernel(s, t)[0, 0], a, b, epsabs=1e-12, epsrel=1e-12)
            self.assertAlmostEqual(float(kernel_interval_integral(kernel, (a, b), s)), exact, delta=1e-7)

    def test_double_integral(self):
        for _ in range(self.n_cases):
            kernel = RbfKernel1D(np.random.uniform(0.2, 2.0))
            first, second = self.random_interval(), self.random_interval()
            exact, _ = integrate.quad(lambda s: float(kernel_interval_integral(kernel, first, s)),
                                      second[0], second[1], epsabs=1e-12, epsrel=1e-12)
            self.assertAlmostEqual(kernel_double_integral(kernel, first, second), exact, delta=1e-7)

    def test_double_integral_is_symmetric(self):
        kernel = RbfKernel1D(0.6)
        self.assertAlmostEqual(kernel_double_integral(kernel, (-1.0, 0.5), (0.2, 2.0)),
                               kernel_double_integral(kernel, (0.2, 2.0), (-1.0, 0.5)), places=12)


class TestOraclePosterior(unittest.TestCase):
    """Test cases for the closed-form posterior"""

    def setUp(self):
        self.kernel = RbfKernel1D(0.6)
        self.grid = default_grid(50)
        self.intervals = IntervalSet(default_intervals(8, seed=3), 0.1)
        self.y = np.random.default_rng(1).normal(size=8)

    def test_matches_discretized_conjugate_posterior(self):
        post = oracle_posterior(self.kernel, self.intervals, self.y, self.grid)
        fine = np.linspace(-5, 5, 2000)
        A = interval_operator(fine, self.intervals)
        K_ff = prior_covariance_1d(self.kernel, fine)
        K_gf = self.kernel(self.grid, fine)
        S = A @ K_ff @ A.T + 0.01 * np.eye(8)
        G = K_gf @ A.T
        mean = G @ np.linalg.solve(S, self.y)
        cov = prior_covariance_1d(self.kernel, self.grid) - G @ np.linalg.solve(S, G.T)
        self.assertLess(np.max(np.abs(post.mean - mean)), 1e-3)
        self.assertLess(np.max(np.abs(post.cov - cov)), 1e-3)

    def test_covariance_is_symmetric_psd(self):
        post = oracle_posterior(self.kernel, self.intervals, self.y, self.grid)
        np.testing.assert_array_equal(post.cov, post.cov.T)
        self.assertGreater(np.linalg.eigvalsh(post.cov).min(), -1e-8)

    def test_far_interval_leaves_prior(self):
        intervals = IntervalSet([[4.0, 5.0]], 0.1)
        post = oracle_posterior(self.kernel, intervals, [3.0], self.grid)
        self.assertLess(abs(post.mean[0]), 1e-10)
        self.assertAlmostEqual(post.std[0], 1.0, places=8)

    def test_quantiles(self):
        post = oracle_posterior(self.kernel, self.intervals, self.y, self.grid)
        np.testing.assert_allclose(post.quantile(0.5), post.mean, atol=1e-12)
        np.testing.assert_allclose(post.quantile(0.95) - post.mean, 1.6448536 * post.std, rtol=1e-6)

    def test_wrong_observation_count(self):
        with self.assertRaises(ValueError):
            oracle_posterior(self.kernel, self.intervals, self.y[:3], self.grid)

    def test_oracle_draws_moments(self):
        post = oracle_posterior(self.kernel, self.intervals, self.y, self.grid)
        draws = oracle_draws(post, 20000, seed=0)
        self.assertEqual(draws.shape, (20000, 50))
        self.assertLess(np.max(np.abs(draws.mean(axis=0) - post.mean)), 0.05)
        self.assertLess(np.max(np.abs(np.cov(draws.T) - post.cov)), 0.08)


class TestBenchmarkSetup(unittest.TestCase):

    def test_default_intervals_layout(self):
        iv = default_intervals(8, (0.8, 2.0), seed=11)
        self.assertEqual(iv.shape, (8, 2))
        lengths = iv[:, 1] - iv[:, 0]
        self.assertTrue(np.all(lengths > 0))
        self.assertTrue(np.all(lengths <= 2.0 + 1e-12))
        self.assertTrue(np.all(iv[1:, 0] >= iv[:-1, 1] - 1e-12))
        self.assertTrue(np.all(iv >= -5.0) and np.all(iv <= 5.0))
        np.testing.assert_array_equal(iv, default_intervals(8, (0.8, 2.0), seed=11))

    def test_interval_operator_integrates_linear_functions(self):
        grid = default_grid(50)
        intervals = IntervalSet([[-4.3, -2.0], [0.1, 0.15], [3.0, 5.0]], 0.1)
        A = interval_operator(grid, intervals)
        f = 2.0 * grid + 1.0
        exact = [(b ** 2 - a ** 2) + (b - a) for a, b in intervals.intervals]
        np.testing.assert_allclose(A @ f, exact, rtol=1e-12, atol=1e-12)

    def test_prior_sample_is_seeded(self):
        kernel = RbfKernel1D(0.6)
        grid = default_grid(50)
        np.testing.assert_array_equal(sample_prior_1d(kernel, grid, 5), sample_prior_1d(kernel, grid, 5))

    def test_build_problem(self):
        p1 = build_gp1d_problem(seed=4)
        p2 = build_gp1d_problem(seed=4)
        self.assertEqual(p1.grid.size, 50)
        self.assertEqual(len(p1.intervals), 8)
        np.testing.assert_array_equal(p1.y, p2.y)
        self.assertEqual(p1.operator.shape, (8, 50))
        self.assertEqual(p1.to_dict()["lengthscale"], 0.6)

    def test_invalid_inputs(self):
        with self.assertRaises(ValueError):
            RbfKernel1D(0.0)
        with self.assertRaises(ValueError):
            IntervalSet([[1.0, 0.0]], 0.1)
        with self.assertRaises(ValueError):
            IntervalSet([[-6.0, 0.0]], 0.1)


if __name__ == "__main__":
    unittest.main()
