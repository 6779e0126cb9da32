import itertools
import math

import numpy as np
from django.test import SimpleTestCase

from stefan.exceptions import ConfigurationError, DomainError, UndefinedDistanceError
from stefan.grid_service import make_grid
from stefan.models import BoundaryControl, MushyBand, MushyMask, SpaceTimeField, TargetSet
from stefan.mushy_service import (coverage, hausdorff_distance, holder_quotient, mushy_measures, mushy_set,
                                  mushy_set_for, target_as_mask, target_from_intervals)

from .factories import constant_source, desk_params, line, steps


def brute_force_hausdorff(a, b):
    centers = a.grid.centers
    u, v = centers[a.mask], centers[b.mask]

    def directed(p, q):
        return max(min(math.dist(x, y) for y in q) for x in p)

    return max(directed(u, v), directed(v, u))


class MushySetTests(SimpleTestCase):

    def setUp(self):
        self.grid, self.times = line(4), steps(4)

    def test_band_membership(self):
        y = constant_source(self.grid, self.times, [-0.1, 0.0, 0.5, 1.2])
        mask = mushy_set(y, self.times.horizon, (-0.05, 1.05))
        np.testing.assert_array_equal(mask.mask, [False, True, True, False])
        self.assertEqual(mask.level, 4)

    def test_band_edges_are_inclusive(self):
        y = constant_source(self.grid, self.times, [-0.05, 1.05, 1.0500001, -0.0500001])
        np.testing.assert_array_equal(mushy_set(y, 0.0, (-0.05, 1.05)).mask, [True, True, False, False])

    def test_off_grid_time_raises(self):
        y = constant_source(self.grid, self.times, np.zeros(4))
        with self.assertRaises(DomainError):
            mushy_set(y, 0.5 * self.times.dt, (-0.05, 1.05))

    def test_named_bands(self):
        params = desk_params()
        y = constant_source(self.grid, self.times, [-0.07, 0.5, 1.07, 2.0])
        narrow = mushy_set_for(y, 0.0, params, MushyBand.NARROW).mask
        wide = mushy_set_for(y, 0.0, params, MushyBand.WIDE).mask
        np.testing.assert_array_equal(narrow, [False, True, False, False])
        np.testing.assert_array_equal(wide, [True, True, True, False])

    def test_measures_per_level(self):
        values = np.array([[-1.0, 0.5, 0.5, 2.0]] * 5)
        values[-1] = 0.5
        y = SpaceTimeField(self.grid, self.times, values)
        measures = mushy_measures(y, (-0.05, 1.05))
        np.testing.assert_allclose(measures, [0.5, 0.5, 0.5, 0.5, 1.0])


class CoverageTests(SimpleTestCase):

    def test_half_covered(self):
        grid = line(4)
        target = TargetSet(grid, [True, True, False, False])
        mask = MushyMask(grid, 0, [True, False, True, True])
        self.assertEqual(coverage(target, mask), 0.5)

    def test_full_cover(self):
        grid = line(4)
        target = TargetSet(grid, [False, True, True, False])
        self.assertEqual(coverage(target, target_as_mask(target)), 1.0)

    def test_grid_mismatch(self):
        target = TargetSet(line(4), [True, False, False, False])
        with self.assertRaises(ConfigurationError):
            coverage(target, MushyMask(line(8), 0, np.ones(8, dtype=bool)))

    def test_empty_target_rejected(self):
        with self.assertRaises(ConfigurationError):
            TargetSet(line(4), np.zeros(4, dtype=bool))

    def test_target_from_intervals(self):
        grid = line(10)
        target = target_from_intervals(grid, [[0.0, 0.2], [0.7, 0.8]])
        np.testing.assert_array_equal(np.flatnonzero(target.mask), [0, 1, 7])

    def test_target_box_dimension_checked(self):
        grid = make_grid([1.0, 1.0], [4, 4])
        with self.assertRaises(ConfigurationError):
            target_from_intervals(grid, [[0.0, 0.5]])
        square = target_from_intervals(grid, [[[0.0, 0.5], [0.0, 0.5]]])
        self.assertEqual(square.mask.sum(), 4)


class HausdorffTests(SimpleTestCase):

    def test_identical_sets(self):
        grid = line(8)
        mask = MushyMask(grid, 0, [True, False, True] + [False] * 5)
        self.assertEqual(hausdorff_distance(mask, mask), 0.0)

    def test_one_empty_is_infinite(self):
        grid = line(8)
        empty = MushyMask(grid, 0, np.zeros(8, dtype=bool))
        full = MushyMask(grid, 0, np.ones(8, dtype=bool))
        self.assertEqual(hausdorff_distance(empty, full), float('inf'))

    def test_both_empty_undefined(self):
        grid = line(8)
        empty = MushyMask(grid, 0, np.zeros(8, dtype=bool))
        with self.assertRaises(UndefinedDistanceError):
            hausdorff_distance(empty, empty)

    def test_agrees_with_enumeration_on_small_grids(self):
        rng = np.random.default_rng(9)
        for grid in (line(16), make_grid([1.0, 1.0], [5, 6])):
            for _ in range(20):
                a = MushyMask(grid, 0, rng.random(grid.ncells) < 0.3)
                b = MushyMask(grid, 0, rng.random(grid.ncells) < 0.3)
                if not a.mask.any() or not b.mask.any():
                    continue
                self.assertAlmostEqual(hausdorff_distance(a, b), brute_force_hausdorff(a, b), places=12)

    def test_mushy_set_matches_enumeration(self):
        grid, times = line(6), steps(2)
        band = (-0.05, 1.05)
        for combo in itertools.product([-0.2, 0.0, 1.1], repeat=3):
            snapshot = np.array(combo * 2)
            mask = mushy_set(constant_source(grid, times, snapshot), 0.0, band).mask
            expected = [band[0] <= v <= band[1] for v in snapshot]
            np.testing.assert_array_equal(mask, expected)


class HolderQuotientTests(SimpleTestCase):

    def test_constant_field_has_zero_quotient(self):
        grid, times = line(16), steps(8)
        y = constant_source(grid, times, np.full(16, 0.3))
        quotient, normalizer = holder_quotient(y, 0.1, 200, np.random.default_rng(0))
        self.assertEqual(quotient, 0.0)
        self.assertIsNone(normalizer)

    def test_quotient_bounded_for_smooth_field(self):
        grid, times = line(32), steps(16)
        values = np.tile(grid.centers[:, 0], (17, 1))
        y = SpaceTimeField(grid, times, values)
        quotient, _ = holder_quotient(y, 0.1, 500, np.random.default_rng(1))
        self.assertLessEqual(quotient, 1.0 + 1e-12)
        self.assertGreater(quotient, 0.0)

    def test_normalizer_from_data(self):
        params = desk_params()
        grid, times = line(16), steps(8)
        y = constant_source(grid, times, np.ones(16))
        u = BoundaryControl.zeros(grid, times)
        _, normalizer = holder_quotient(y, 0.1, 10, np.random.default_rng(2), u=u, params=params)
        self.assertAlmostEqual(normalizer, params.lam ** (-6.5 * params.alpha))

    def test_margin_larger_than_domain(self):
        grid, times = line(8), steps(4)
        y = constant_source(grid, times, np.zeros(8))
        self.assertEqual(holder_quotient(y, 0.9, 10), (None, None))
