#!/usr/bin/env python3
"""
Tests for the IDW, GMZ and kriging baselines
"""

import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cmlrain.baselines import (IdwConfig, Variogram, VirtualGauge, empirical_variogram, fit_variogram_l1,
                               gauges_from_model, gmz_reconstruct, gmz_virtual_gauges, idw_interpolate,
                               idw_weights, invert_power_law, link_points, links_to_midpoint_gauges,
                               ordinary_krige)
from cmlrain.forward import PowerLawParams, Topology, build_observation_model
from cmlrain.geometry import GridSpec, LinkSegment


class TestPowerLawInversion(unittest.TestCase):

    def test_invert(self):
        rate = invert_power_law(np.array([0.4, -1.0]), np.array([0.2, 0.2]), np.array([2.0, 1.0]),
                                np.array([0.5, 3.0]))
        np.testing.assert_allclose(rate, [2.0, 0.0])
        with self.assertRaises(ValueError):
            invert_power_law([1.0], [0.2], [1.0], [0.0])

    def test_midpoint_gauges(self):
        links = [LinkSegment((0.0, 0.0), (4.0, 0.0)), LinkSegment((1.0, 1.0), (1.0, 3.0))]
        params = [PowerLawParams(0.5, 1.0), PowerLawParams(0.25, 1.0)]
        gauges = links_to_midpoint_gauges(links, [2.0, 1.0], params)
        self.assertEqual(gauges[0].position, (2.0, 0.0))
        self.assertAlmostEqual(gauges[0].value, 1.0)
        self.assertAlmostEqual(gauges[1].value, 2.0)
        with self.assertRaises(ValueError):
            links_to_midpoint_gauges(links, [2.0], params)

    def test_gauges_from_model_use_inside_length(self):
        grid = GridSpec(4, 4)
        topo = Topology(["A"], [LinkSegment((-4.5, 1.0), (3.5, 1.0))], [0.5], [1.0], [0.1])
        gauges = gauges_from_model(build_observation_model(grid, topo), [2.0])
        # 4 cells of the 8-cell path lie inside the grid
        self.assertAlmostEqual(gauges[0].value, 1.0)

    def test_gauge_validation(self):
        with self.assertRaises(ValueError):
            VirtualGauge((0.0, 0.0), -1.0)
        with self.assertRaises(ValueError):
            VirtualGauge((np.nan, 0.0), 1.0)


class TestIdw(unittest.TestCase):
    """Test cases for inverse distance weighting"""

    def setUp(self):
        self.grid = GridSpec(10, 10)
        self.gauges = [VirtualGauge((1.0, 1.0), 2.0), VirtualGauge((3.0, 2.0), 4.0), VirtualGauge((2.0, 4.0), 1.0)]

    def test_weights_normalized_where_covered(self):
        w, covered = idw_weights(np.array([g.position for g in self.gauges]), self.grid, IdwConfig(roi=4.0))
        np.testing.assert_allclose(w[covered].sum(axis=1), 1.0)
        self.assertTrue(np.all(w[~covered] == 0.0))
        self.assertFalse(covered[99])
        self.assertTrue(covered[0])

    def test_interpolation_honours_gauges(self):
        field_, covered = idw_interpolate(self.gauges, self.grid, IdwConfig(roi=4.0), return_coverage=True)
        self.assertAlmostEqual(field_.values[1, 1], 2.0, places=5)
        self.assertAlmostEqual(field_.values[2, 3], 4.0, places=5)
        self.assertEqual(field_.values[9, 9], 0.0)
        self.assertFalse(covered[9, 9])
        inside = field_.values[covered]
        self.assertTrue(np.all((inside >= 1.0 - 1e-12) & (inside <= 4.0 + 1e-12)))

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            IdwConfig(p=0.0)
        with self.assertRaises(ValueError):
            IdwConfig(roi=-1.0)
        with self.assertRaises(ValueError):
            idw_interpolate([], self.grid)


class TestGmz(unittest.TestCase):
    """Test cases for the GMZ virtual-gauge iteration"""

    def setUp(self):
        self.grid = GridSpec(12, 12)
        self.links = [LinkSegment((1.0, 1.0), (9.0, 4.0)), LinkSegment((2.0, 8.0), (10.0, 7.0)),
                      LinkSegment((5.0, 0.5), (6.0, 10.5))]
        self.params = [PowerLawParams(0.2, 1.2), PowerLawParams(0.3, 0.9), PowerLawParams(0.25, 1.0)]
        self.lengths = np.array([s.length for s in self.links])
        self.cfg = IdwConfig(roi=100.0)

    def test_link_points(self):
        pts = link_points(LinkSegment((0.0, 0.0), (4.0, 0.0)), 2)
        np.testing.assert_allclose(pts, [[1.0, 0.0], [3.0, 0.0]])
        with self.assertRaises(ValueError):
            link_points(self.links[0], 0)

    def test_constant_field_is_preserved(self):
        y = np.array([p.a * L * 2.0 ** p.b for p, L in zip(self.params, self.lengths)])
        gauges = gmz_virtual_gauges(self.links, y, self.params, self.grid, k_points=4, n_iters=5, idw_cfg=self.cfg)
        self.assertEqual(len(gauges), 12)
        np.testing.assert_allclose([g.value for g in gauges], 2.0, rtol=1e-9)
        recon = gmz_reconstruct(self.links, y, self.params, self.grid, k_points=4, n_iters=5, idw_cfg=self.cfg)
        np.testing.assert_allclose(recon.values, 2.0, rtol=1e-9)

    def test_gauges_reproduce_each_link(self):
        y = np.array([1.5, 0.4, 2.2])
        k = 5
        gauges = gmz_virtual_gauges(self.links, y, self.params, self.grid, k_points=k, n_iters=8, idw_cfg=self.cfg)
        rates = np.array([g.value for g in gauges]).reshape(3, k)
        for i, p in enumerate(self.params):
            self.assertAlmostEqual(np.mean(p.a * rates[i] ** p.b), y[i] / self.lengths[i], places=10)

    def test_negative_attenuation_gives_dry_link(self):
        y = np.array([-0.3, 0.4, 2.2])
        gauges = gmz_virtual_gauges(self.links, y, self.params, self.grid, k_points=3, n_iters=3, idw_cfg=self.cfg)
        self.assertTrue(all(g.value == 0.0 for g in gauges[:3]))


class TestKriging(unittest.TestCase):
    """Test cases for variogram fitting and ordinary kriging"""

    def setUp(self):
        self.grid = GridSpec(8, 8)
        rng = np.random.default_rng(0)
        cells = rng.choice(64, size=10, replace=False)
        self.gauges = [VirtualGauge((float(c % 8), float(c // 8)), float(v))
                       for c, v in zip(cells, rng.uniform(0.5, 3.0, size=10))]
        self.cells = cells
        self.variogram = Variogram(0.1, 1.0, 3.0)

    def test_variogram_model(self):
        self.assertAlmostEqual(float(self.variogram(0.0)), 0.1)
        self.assertAlmostEqual(float(self.variogram(1e6)), 1.1)
        with self.assertRaises(ValueError):
            Variogram(0.0, 1.0, 0.0)
        with self.assertRaises(ValueError):
            Variogram(0.0, 1.0, 1.0, model="spherical")

    def test_exact_at_gauges(self):
        res = ordinary_krige(self.gauges, self.grid, self.variogram)
        for c, g in zip(self.cells, self.gauges):
            self.assertAlmostEqual(res.raw.ravel()[c], g.value, places=8)
            self.assertAlmostEqual(res.variance.ravel()[c], 0.1, places=8)

    def test_weights_sum_to_one(self):
        res = ordinary_krige(self.gauges, self.grid, self.variogram)
        np.testing.assert_allclose(res.weight_sums, 1.0, atol=1e-8)
        self.assertTrue(np.all(res.field.values >= 0.0))
        self.assertTrue(np.all(res.variance >= 0.1 - 1e-8))

    def test_matches_gp_posterior_mean(self):
        """Without nugget, kriging is the GP posterior under exp(-h / range) with a GLS-estimated mean"""
        vg = Variogram(0.0, 1.3, 2.5)
        gauges = [VirtualGauge((g.position[0] + 0.3, g.position[1] - 0.2), g.value) for g in self.gauges]
        res = ordinary_krige(gauges, self.grid, vg)

        pos = np.array([g.position for g in gauges])
        z = np.array([g.value for g in gauges])
        centers = self.grid.cell_centers()
        dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        K = 1.3 * np.exp(-dist / 2.5)
        k0 = 1.3 * np.exp(-np.linalg.norm(pos[:, None, :] - centers[None, :, :], axis=-1) / 2.5)
        ones = np.ones(len(z))
        K_inv_1 = np.linalg.solve(K, ones)
        mean = K_inv_1 @ z / (K_inv_1 @ ones)
        post_mean = mean + k0.T @ np.linalg.solve(K, z - mean)
        np.testing.assert_allclose(res.raw.ravel(), post_mean, atol=1e-8)

        K_inv_k0 = np.linalg.solve(K, k0)
        post_var = 1.3 - np.sum(k0 * K_inv_k0, axis=0) + (1.0 - ones @ K_inv_k0) ** 2 / (K_inv_1 @ ones)
        np.testing.assert_allclose(res.variance.ravel(), post_var, atol=1e-8)


    def test_constant_values_with_flat_variogram(self):
        gauges = [VirtualGauge(g.position, 2.0) for g in self.gauges]
        vg = fit_variogram_l1(gauges)
        self.assertEqual((vg.nugget, vg.sill), (0.0, 0.0))
        with self.assertLogs("cmlrain.baselines", level="WARNING"):
            res = ordinary_krige(gauges, self.grid, vg)
        np.testing.assert_allclose(res.raw, 2.0, atol=1e-6)

    def test_fit_variogram_bounds(self):
        lags, gammas, max_lag = empirical_variogram(self.gauges)
        self.assertEqual(lags.size, gammas.size)
        self.assertTrue(np.all(lags <= max_lag))
        vg = fit_variogram_l1(self.gauges)
        self.assertGreaterEqual(vg.nugget, 0.0)
        self.assertLessEqual(vg.nugget, gammas.max() + 1e-12)
        self.assertTrue(1e-3 * max_lag - 1e-12 <= vg.range <= 3.0 * max_lag + 1e-12)

    def test_errors(self):
        with self.assertRaises(ValueError):
            fit_variogram_l1(self.gauges[:2])
        duplicate = self.gauges[:3] + [VirtualGauge(self.gauges[0].position, 1.0)]
        with self.assertRaises(ValueError):
            ordinary_krige(duplicate, self.grid, self.variogram)
        with self.assertRaises(ValueError):
            empirical_variogram([VirtualGauge((1.0, 1.0), 1.0), VirtualGauge((1.0, 1.0), 2.0)])


if __name__ == "__main__":
    unittest.main()
