#!/usr/bin/env python3
"""
Tests for grid geometry and link tracing
"""

import os
import sys
import unittest

import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cmlrain.geometry import (DegenerateSegmentError, GridSpec, LinkSegment, SegmentError,
                              build_network_weights, normalize_coordinates, segment_length_inside,
                              trace_segment, weights_matrix)

SLOW = bool(os.environ.get("CMLRAIN_SLOW_TESTS"))


class TestGridSpec(unittest.TestCase):
    """Test cases for GridSpec"""

    def test_cell_centers_are_integer_coordinates(self):
        grid = GridSpec(3, 4)
        centers = grid.cell_centers()
        self.assertEqual(centers.shape, (12, 2))
        # row-major: second entry is (x=1, y=0)
        np.testing.assert_allclose(centers[1], [1.0, 0.0])
        np.testing.assert_allclose(centers[4], [0.0, 1.0])

    def test_extent_and_diagonal(self):
        grid = GridSpec(3, 4)
        self.assertEqual(grid.extent(), (-0.5, 3.5, -0.5, 2.5))
        self.assertAlmostEqual(grid.diagonal(), 5.0)

    def test_index_coords(self):
        grid = GridSpec(4, 6)
        np.testing.assert_allclose(grid.to_index_coords([[2.0, 3.0]]), [[3.0, 2.0]])

    def test_validation(self):
        with self.assertRaises(ValueError):
            GridSpec(0, 4)
        with self.assertRaises(ValueError):
            GridSpec(3, 4, spacing=(0.0, 1.0))


class TestTracing(unittest.TestCase):
    """Test cases for trace_segment"""

    def setUp(self):
        self.grid = GridSpec(4, 6)
        np.random.seed(42)

    def test_horizontal_segment_inside_one_row(self):
        w = trace_segment(self.grid, LinkSegment((0.0, 1.0), (3.0, 1.0)))
        d = w.as_dict()
        self.assertEqual(set(d), {(1, 0), (1, 1), (1, 2), (1, 3)})
        self.assertAlmostEqual(d[(1, 0)], 0.5)
        self.assertAlmostEqual(d[(1, 1)], 1.0)
        self.assertAlmostEqual(d[(1, 3)], 0.5)
        self.assertAlmostEqual(w.total_inside, 3.0)

    def test_corner_crossing_layout(self):
        """30 degree path that passes just below a grid corner in row 3"""
        slope = np.tan(np.pi / 6)
        s0 = (0.24, 2.5 + slope * (1.52 - 0.24))
        s1 = (4.1, 2.5 - slope * (4.1 - 1.52))
        dense = trace_segment(self.grid, LinkSegment(s0, s1)).to_dense()
        expected = np.zeros((4, 6))
        expected[1, 3:5] = [0.3, 0.7]
        expected[2, 2:4] = [1.1, 0.9]
        expected[3, 0:2] = [0.3, 1.2]
        np.testing.assert_allclose(np.round(dense, 1), expected)
        # the full-width chord is the longest a 30 degree path can leave in one cell
        self.assertAlmostEqual(dense[3, 1], 1.0 / np.cos(np.pi / 6))
        self.assertTrue(0.0 < dense[3, 2] < 0.05)

    def test_exact_corner_collapses_duplicates(self):
        diag = trace_segment(self.grid, LinkSegment((-0.5, -0.5), (3.5, 3.5)))
        self.assertEqual(diag.nnz, 4)
        np.testing.assert_array_equal(diag.rows, diag.cols)
        np.testing.assert_allclose(diag.values, np.sqrt(2.0))

        # slope 1/2 hits the corners at x = 1.5 and x = 3.5
        w = trace_segment(self.grid, LinkSegment((-0.5, -0.5), (5.5, 2.5)))
        self.assertEqual(w.nnz, 6)
        self.assertEqual(w.as_dict().keys(), {(0, 0), (0, 1), (1, 2), (1, 3), (2, 4), (2, 5)})
        self.assertTrue(np.all(w.values > 0))
        np.testing.assert_allclose(w.values, np.sqrt(1.25), rtol=1e-12)
        self.assertAlmostEqual(w.total_inside, np.hypot(6.0, 3.0))

    def test_direction_invariance(self):
        seg = LinkSegment((-1.0, 0.3), (5.7, 2.9))
        a = trace_segment(self.grid, seg).to_dense()
        b = trace_segment(self.grid, seg.reversed()).to_dense()
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_outside_segment_is_empty(self):
        w = trace_segment(self.grid, LinkSegment((10.0, 10.0), (12.0, 11.0)))
        self.assertEqual(w.nnz, 0)
        self.assertEqual(w.total_inside, 0.0)

    def test_degenerate_segment(self):
        with self.assertRaises(DegenerateSegmentError):
            trace_segment(self.grid, LinkSegment((1.0, 1.0), (1.0, 1.0)))
        with self.assertRaises(DegenerateSegmentError):
            trace_segment(self.grid, LinkSegment((np.nan, 1.0), (2.0, 1.0)))

    def test_conservation_random_segments(self):
        """Sum of weights equals the clipped geometric length."""
        n = 100000 if SLOW else 2000
        pts = np.random.uniform([-2.0, -2.0] * 2, [7.0, 5.0] * 2, size=(n, 4))
        for x0, y0, x1, y1 in pts:
            seg = LinkSegment((x0, y0), (x1, y1))
            if seg.length == 0:
                continue
            w = trace_segment(self.grid, seg)
            clipped = segment_length_inside(self.grid, seg)
            self.assertTrue(np.all(w.values > 0))
            self.assertLessEqual(abs(w.total_inside - clipped), 1e-10 * max(clipped, 1.0))

    def test_cell_lengths_match_point_sampling(self):
        """Per-cell lengths agree with the share of 1e5 stratified points falling in each cell"""
        n = 100000
        for seg in (LinkSegment((-0.7, 0.2), (5.9, 3.1)), LinkSegment((0.3, 3.4), (4.8, -0.2)),
                    LinkSegment((5.2, 0.1), (1.1, 2.9))):
            t = (np.arange(n) + np.random.uniform(size=n)) / n
            pts = seg.point_at(t)
            cols = np.floor(pts[:, 0] + 0.5).astype(int)
            rows = np.floor(pts[:, 1] + 0.5).astype(int)
            inside = (cols >= 0) & (cols < 6) & (rows >= 0) & (rows < 4)
            sampled = np.zeros((4, 6))
            np.add.at(sampled, (rows[inside], cols[inside]), seg.length / n)
            np.testing.assert_allclose(trace_segment(self.grid, seg).to_dense(), sampled, atol=1e-3)


    def test_batch_tracing_reports_index(self):
        segs = [LinkSegment((0, 0), (2, 2)), LinkSegment((1, 1), (1, 1))]
        with self.assertRaises(SegmentError) as ctx:
            build_network_weights(self.grid, segs)
        self.assertEqual(ctx.exception.index, 1)

    def test_weights_matrix(self):
        segs = [LinkSegment((0.0, 1.0), (3.0, 1.0)), LinkSegment((2.0, 0.0), (2.0, 3.0))]
        M = weights_matrix(self.grid, build_network_weights(self.grid, segs))
        self.assertEqual(M.shape, (2, 24))
        np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), [3.0, 3.0])
        self.assertAlmostEqual(M[1, 1 * 6 + 2], 1.0)


class TestCoordinates(unittest.TestCase):

    def test_normalize_coordinates(self):
        out = normalize_coordinates([[100.0, 50.0], [102.0, 53.0]], x_ref=100.0, y_ref=50.0, dx=0.5, dy=1.5)
        np.testing.assert_allclose(out, [[0.0, 0.0], [4.0, 2.0]])
        with self.assertRaises(ValueError):
            normalize_coordinates([[0.0, 0.0]], 0.0, 0.0, 0.0, 1.0)


if __name__ == "__main__":
    unittest.main()
