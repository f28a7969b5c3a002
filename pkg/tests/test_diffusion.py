#!/usr/bin/env python3
"""
Tests for noise schedules, bridge kernels and the Gaussian denoiser
"""

import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cmlrain.diffusion import (GaussianDenoiser, NoiseSchedule, ancestral_sample, bridge_mean_std, bridge_sample,
                               gaussian_denoise, karras_schedule, member_generators)


class TestSchedule(unittest.TestCase):
    """Test cases for the Karras ladder"""

    def test_endpoints_and_order(self):
        s = karras_schedule(50, 2e-3, 80.0, 7.0)
        self.assertEqual(s.T, 50)
        self.assertEqual(s.sigmas[0], 0.0)
        self.assertEqual(s.sigmas[1], 2e-3)
        self.assertEqual(s.sigmas[-1], 80.0)
        self.assertTrue(np.all(np.diff(s.sigmas) > 0))

    def test_single_level(self):
        s = karras_schedule(1, 2e-3, 100.0)
        np.testing.assert_array_equal(s.sigmas, [0.0, 100.0])

    def test_gamma(self):
        s = karras_schedule(10)
        self.assertEqual(s.gamma(0, 5), 0.0)
        self.assertAlmostEqual(s.gamma(4, 4), 1.0)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            karras_schedule(0)
        with self.assertRaises(ValueError):
            karras_schedule(10, sigma_min=5.0, sigma_max=1.0)
        with self.assertRaises(ValueError):
            NoiseSchedule(np.array([0.0, 2.0, 1.0]), 7.0, 1.0, 2.0)

    def test_schedule_is_read_only(self):
        s = karras_schedule(5)
        with self.assertRaises(ValueError):
            s.sigmas[2] = 1.0


class TestBridge(unittest.TestCase):

    def setUp(self):
        self.schedule = karras_schedule(20, 2e-3, 10.0)

    def test_bridge_to_zero_returns_prediction(self):
        x0 = np.array([1.0, 2.0])
        out = bridge_sample(self.schedule, 0, 7, x0, np.array([5.0, -3.0]), np.random.default_rng(0))
        np.testing.assert_array_equal(out, x0)

    def test_bridge_moments(self):
        l, t = 12, 15
        mean, std = bridge_mean_std(self.schedule, l, t, np.zeros(1), np.ones(1))
        gamma = self.schedule.gamma(l, t)
        np.testing.assert_allclose(mean, [gamma])
        self.assertAlmostEqual(std, self.schedule.sigmas[l] * np.sqrt(1.0 - gamma))
        draws = bridge_sample(self.schedule, l, t, np.zeros(20000), np.ones(20000), np.random.default_rng(1))
        self.assertAlmostEqual(draws.mean(), gamma, delta=4 * std / np.sqrt(20000))
        self.assertAlmostEqual(draws.std(), std, delta=0.03 * std)

    def test_invalid_levels(self):
        with self.assertRaises(ValueError):
            bridge_mean_std(self.schedule, 5, 5, 0.0, 0.0)
        with self.assertRaises(ValueError):
            bridge_mean_std(self.schedule, 3, 21, 0.0, 0.0)


class TestGaussianDenoiser(unittest.TestCase):
    """Test cases for the exact Gaussian denoiser"""

    def setUp(self):
        rng = np.random.default_rng(3)
        B = rng.normal(size=(4, 4))
        self.cov = B @ B.T + 0.1 * np.eye(4)
        self.mean = rng.normal(size=4)
        self.den = GaussianDenoiser(self.mean, self.cov)

    def test_tweedie_formula(self):
        x = np.array([0.5, -1.0, 2.0, 0.0])
        sigma = 0.7
        expected = self.mean + self.cov @ np.linalg.solve(self.cov + sigma ** 2 * np.eye(4), x - self.mean)
        np.testing.assert_allclose(gaussian_denoise(self.den, sigma, x), expected, rtol=1e-10, atol=1e-12)

    def test_identity_at_zero_noise(self):
        x = np.array([0.5, -1.0, 2.0, 0.0])
        np.testing.assert_array_equal(self.den(0.0, x), x)

    def test_score_matches_tweedie(self):
        x = np.array([[0.5, -1.0, 2.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
        sigma = 1.3
        score = self.den.score(sigma, x)
        np.testing.assert_allclose(score, (self.den(sigma, x) - x) / sigma ** 2, atol=1e-10)
        # central differences of the noised marginal density
        h = 1e-5
        for k in range(4):
            step = np.zeros(4)
            step[k] = h
            fd = (self.den.log_marginal(sigma, x + step) - self.den.log_marginal(sigma, x - step)) / (2 * h)
            np.testing.assert_allclose(fd, score[:, k], atol=1e-6)

    def test_vjp_is_transposed_jacobian(self):
        sigma = 0.4
        J = self.cov @ np.linalg.inv(self.cov + sigma ** 2 * np.eye(4))
        v = np.array([1.0, 0.0, -2.0, 0.5])
        np.testing.assert_allclose(self.den.vjp(sigma, np.zeros(4), v), J.T @ v, atol=1e-10)

    def test_nonnegative_output(self):
        den = GaussianDenoiser(-np.ones(4), self.cov, nonnegative=True)
        self.assertTrue(np.all(den(0.5, -3.0 * np.ones((5, 4))) >= 0.0))

    def test_rejects_bad_covariance(self):
        with self.assertRaises(ValueError):
            GaussianDenoiser(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with self.assertRaises(ValueError):
            GaussianDenoiser(np.zeros(2), -np.eye(2))
        with self.assertRaises(ValueError):
            GaussianDenoiser(np.zeros(3), np.eye(2))


class TestAncestralSampling(unittest.TestCase):

    def test_recovers_gaussian_prior(self):
        cov = np.array([[1.0, 0.6], [0.6, 0.8]])
        den = GaussianDenoiser(np.array([1.0, -0.5]), cov)
        samples = ancestral_sample(karras_schedule(500, 2e-3, 100.0), den, seed=0, batch=3000)
        self.assertEqual(samples.shape, (3000, 2))
        np.testing.assert_allclose(samples.mean(axis=0), [1.0, -0.5], atol=0.08)
        np.testing.assert_allclose(np.cov(samples.T), cov, atol=0.12)

    def test_members_do_not_depend_on_batch_size(self):
        den = GaussianDenoiser(np.zeros(3), np.eye(3))
        schedule = karras_schedule(30)
        a = ancestral_sample(schedule, den, seed=9, batch=2)
        b = ancestral_sample(schedule, den, seed=9, batch=5)
        np.testing.assert_array_equal(a, b[:2])

    def test_member_generators(self):
        a = member_generators(4, 3)
        b = member_generators(4, 3)
        self.assertEqual(len(a), 3)
        self.assertEqual(a[2].standard_normal(), b[2].standard_normal())
        with self.assertRaises(ValueError):
            ancestral_sample(karras_schedule(5), GaussianDenoiser(np.zeros(1), np.eye(1)), seed=0, batch=0)


if __name__ == "__main__":
    unittest.main()
