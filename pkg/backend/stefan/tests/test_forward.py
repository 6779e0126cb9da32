import numpy as np
from django.test import SimpleTestCase, tag

from stefan.exceptions import CoefficientBandError, PicardNonConvergence
from stefan.forward_service import (FrozenOperator, check_coefficient_band, classical_region_residual, energy_report,
                                    heat_truncation_residual, manufactured_error, mass_balance, observed_orders,
                                    relative_change, solve_frozen, solve_nonlinear)
from stefan.grid_service import control_from_function, l2_norm_space, make_grid
from stefan.models import (BoundaryControl, FrozenProblem, LinearSolver, PicardSettings, SolverOptions,
                           SpaceTimeField, TimeGrid)

from .factories import constant_source, desk_params, line, steps, two_phase

DIRECT = SolverOptions(linear_solver=LinearSolver.DIRECT)
PICARD = PicardSettings(max_iters=100)


class FrozenSolveTests(SimpleTestCase):

    def test_constant_state_is_preserved(self):
        params = desk_params()
        grid, times = line(32), steps(16)
        y0 = np.full(32, 0.7)
        prob = FrozenProblem(constant_source(grid, times, two_phase(grid)), BoundaryControl.zeros(grid, times),
                             y0, params, DIRECT)
        y = solve_frozen(prob)
        np.testing.assert_allclose(y.values, 0.7, atol=1e-13)

    def test_cg_and_direct_agree(self):
        grid, times = line(32), steps(16)
        y0 = np.cos(np.pi * grid.centers[:, 0])
        flux = np.full((16, 2), 0.3)
        direct = FrozenOperator.constant(grid, times, 1.5, DIRECT).forward(y0, flux)
        iterative = FrozenOperator.constant(grid, times, 1.5, SolverOptions(cg_rtol=1e-13)).forward(y0, flux)
        np.testing.assert_allclose(iterative, direct, atol=1e-10)

    def test_band_check_rejects_out_of_range_coefficients(self):
        params = desk_params()
        with self.assertRaises(CoefficientBandError) as ctx:
            check_coefficient_band(np.array([[params.width * 0.5, 1.0]]), params)
        self.assertAlmostEqual(ctx.exception.low, params.width * 0.5)


class ManufacturedSolutionTests(SimpleTestCase):

    def test_fine_grid_error_below_one_percent(self):
        self.assertLess(manufactured_error(256, 512, 0.1, 1.0), 0.01)

    def test_second_order_in_space(self):
        cells = [32, 64, 128]
        errors = [manufactured_error(n, 64, 0.1, 1.0, reference='space', options=DIRECT) for n in cells]
        self.assertTrue(all(order >= 1.8 for order in observed_orders(cells, errors)))

    def test_first_order_in_time(self):
        counts = [32, 64, 128]
        errors = [manufactured_error(64, n, 0.1, 1.0, reference='time', options=DIRECT) for n in counts]
        self.assertTrue(all(order >= 0.9 for order in observed_orders(counts, errors)))

    def test_truncation_residual_is_positive(self):
        self.assertGreater(heat_truncation_residual(line(64), steps(64), 2.0), 0.0)

    def test_observed_orders(self):
        orders = observed_orders([10, 20, 40], [1.0, 0.25, 0.0625])
        np.testing.assert_allclose(orders, [2.0, 2.0])


class NonlinearSolveTests(SimpleTestCase):

    def setUp(self):
        self.params = desk_params()
        self.grid, self.times = line(32), steps(32)
        self.y0 = two_phase(self.grid)

    def test_constant_initial_state_converges_at_once(self):
        u = BoundaryControl.zeros(self.grid, self.times)
        result = solve_nonlinear(u, np.full(32, 0.5), self.params, PICARD, DIRECT)
        self.assertEqual(result.iterations, 1)
        np.testing.assert_allclose(result.y.values, 0.5, atol=1e-13)

    def test_pure_solid_matches_heat_equation(self):
        y0 = -1.0 - 0.1 * np.cos(np.pi * self.grid.centers[:, 0])
        u = BoundaryControl.zeros(self.grid, self.times)
        result = solve_nonlinear(u, y0, self.params, PICARD, DIRECT)
        heat = FrozenOperator.constant(self.grid, self.times, self.params.k1, DIRECT)
        reference = heat.forward(y0, u.values)
        self.assertLessEqual(relative_change(result.y.values, reference, self.grid, self.times), 1e-8)

    def test_mass_balance_under_random_flux(self):
        rng = np.random.default_rng(7)
        for grid in (self.grid, make_grid([1.0, 1.0], [8, 8])):
            u = BoundaryControl(grid, self.times, rng.uniform(-1.0, 1.0, (32, grid.nfaces)))
            y0 = np.where(grid.centers[:, 0] > 0.5, 1.5, -0.3)
            result = solve_nonlinear(u, y0, self.params, PICARD, DIRECT)
            _, _, defect = mass_balance(result.y, u)
            self.assertLessEqual(np.abs(defect).max(), 1e-10)

    def test_picard_independent_of_initial_iterate(self):
        u = control_from_function(self.grid, self.times, lambda t, face: np.where(face == 0, 0.5, 0.0) + 0 * t)
        settings = PicardSettings(max_iters=100, tol_l2=1e-11)
        first = solve_nonlinear(u, self.y0, self.params, settings, DIRECT)
        other = SpaceTimeField.constant_in_time(self.grid, self.times, np.full(32, 2.0))
        second = solve_nonlinear(u, self.y0, self.params, settings, DIRECT, initial=other)
        self.assertLessEqual(relative_change(first.y.values, second.y.values, self.grid, self.times), 1e-8)

    def test_iteration_limit_raises(self):
        u = BoundaryControl.zeros(self.grid, self.times)
        with self.assertRaises(PicardNonConvergence) as ctx:
            solve_nonlinear(u, self.y0, self.params, PicardSettings(max_iters=1), DIRECT)
        self.assertEqual(len(ctx.exception.history), 1)
        self.assertGreater(ctx.exception.residual, 1e-8)

    def test_coefficients_stay_in_band(self):
        u = BoundaryControl.zeros(self.grid, self.times)
        result = solve_nonlinear(u, self.y0, self.params, PICARD, DIRECT)
        coefficients = result.operator.face_coefficients
        self.assertGreaterEqual(coefficients.min(), self.params.width - 1e-12)
        self.assertLessEqual(coefficients.max(), self.params.k_star + 1e-12)


class EnergyTests(SimpleTestCase):

    def test_zero_data_is_degenerate(self):
        grid, times = line(16), steps(8)
        y = SpaceTimeField(grid, times, np.zeros((9, 16)))
        report = energy_report(y, BoundaryControl.zeros(grid, times), desk_params())
        self.assertTrue(report.degenerate)
        self.assertIsNone(report.constant)

    def test_constant_state_ratio_at_least_one(self):
        grid, times = line(16), steps(8)
        y = SpaceTimeField(grid, times, np.ones((9, 16)))
        report = energy_report(y, BoundaryControl.zeros(grid, times), desk_params())
        self.assertGreaterEqual(report.constant, 1.0)
        self.assertAlmostEqual(report.derivative_ratio, 0.0)

    def test_dissipation_for_free_flow(self):
        params = desk_params()
        grid, times = line(32), steps(32)
        u = BoundaryControl.zeros(grid, times)
        y = solve_nonlinear(u, two_phase(grid), params, PICARD, DIRECT).y
        report = energy_report(y, u, params)
        self.assertTrue(np.isfinite(report.constant))
        self.assertTrue(np.isfinite(report.derivative_ratio))
        norms = [l2_norm_space(y.at(n), grid) for n in range(times.steps + 1)]
        self.assertTrue(all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:])))


class ClassicalRegionTests(SimpleTestCase):

    def test_pure_solid_has_zero_residual(self):
        params = desk_params()
        grid, times = line(16), steps(8)
        y = constant_source(grid, times, np.full(16, -1.0))
        residual = classical_region_residual(y, params, 0.1)
        self.assertEqual(residual.res_solid, 0.0)
        self.assertIsNone(residual.res_liquid)
        self.assertGreater(residual.count_solid, 0)

    def test_all_mushy_reports_empty_regions(self):
        params = desk_params()
        grid, times = line(16), steps(8)
        residual = classical_region_residual(constant_source(grid, times, np.full(16, 0.5)), params, 0.1)
        self.assertIsNone(residual.res_solid)
        self.assertIsNone(residual.res_liquid)

    @tag('slow')
    def test_small_alpha_residual_below_truncation_level(self):
        params = desk_params(alpha=0.03)
        grid, times = line(64), TimeGrid(0.05, 64)
        y0 = two_phase(grid, solid=-1.2, liquid=2.2)
        u = BoundaryControl.zeros(grid, times)
        y = solve_nonlinear(u, y0, params, PICARD, DIRECT).y
        residual = classical_region_residual(y, params, 0.05)
        self.assertTrue(residual.alpha_admissible)
        self.assertGreater(residual.count_solid, 0)
        baseline = heat_truncation_residual(grid, times, params.k1)
        self.assertLessEqual(residual.res_solid, 5.0 * baseline)
