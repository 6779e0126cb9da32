import numpy as np
from django.test import SimpleTestCase, override_settings

from stefan.adjoint_service import (boundary_pairing, duality_check, solve_backward, terminal_condition,
                                    transpose_probes)
from stefan.control_service import penalty_functional
from stefan.forward_service import FrozenOperator
from stefan.models import (BoundaryControl, LinearSolver, PenalizedProblem, SolverOptions, SpaceTimeField,
                           TargetSet, TerminalPenaltyData)

from .factories import constant_source, desk_params, line, steps, two_phase

DIRECT = SolverOptions(linear_solver=LinearSolver.DIRECT)


def penalty_data(grid, epsilon=0.5, mu=0.05, rho=1.0):
    return TerminalPenaltyData(epsilon, TargetSet(grid, np.ones(grid.ncells, dtype=bool)), mu, rho)


class TerminalConditionTests(SimpleTestCase):

    def setUp(self):
        self.grid = line(8)
        self.data = penalty_data(self.grid)

    def test_inside_band_is_zero(self):
        np.testing.assert_array_equal(terminal_condition(np.full(8, 0.5), self.data), 0.0)

    def test_below_band_pushes_up(self):
        value = terminal_condition(np.full(8, -0.15), self.data)
        np.testing.assert_allclose(value, 0.1 / 0.5)

    def test_above_band_pushes_down(self):
        value = terminal_condition(np.full(8, 1.25), self.data)
        np.testing.assert_allclose(value, -0.2 / 0.5)

    def test_outside_target_is_zero(self):
        mask = np.zeros(8, dtype=bool)
        mask[:4] = True
        data = TerminalPenaltyData(0.5, TargetSet(self.grid, mask), 0.05, 1.0)
        value = terminal_condition(np.full(8, -1.0), data)
        self.assertTrue(np.all(value[4:] == 0.0))
        self.assertTrue(np.all(value[:4] > 0.0))

    def test_matches_penalty_derivative(self):
        params = desk_params()
        grid, times = line(8), steps(4)
        y0, delta = np.full(8, -0.3), 1e-6
        z = constant_source(grid, times, y0)
        u = BoundaryControl.zeros(grid, times)
        base = PenalizedProblem(z, y0, self.data.target, 0.5, params, DIRECT)
        shifted = PenalizedProblem(z, y0 + delta, self.data.target, 0.5, params, DIRECT)
        slope = (penalty_functional(u, shifted) - penalty_functional(u, base)) / delta
        expected = -grid.cell_volume * terminal_condition(y0, self.data).sum()
        self.assertAlmostEqual(slope, expected, places=5)


class BackwardSolveTests(SimpleTestCase):

    def setUp(self):
        self.params = desk_params()
        self.grid, self.times = line(32), steps(32)
        self.z = constant_source(self.grid, self.times, two_phase(self.grid))

    def test_zero_terminal_gives_zero(self):
        p = solve_backward(self.z, np.zeros(32), self.params, DIRECT)
        np.testing.assert_array_equal(p.values, 0.0)

    def test_constant_terminal_is_preserved(self):
        p = solve_backward(self.z, np.full(32, 2.5), self.params, DIRECT)
        np.testing.assert_allclose(p.values, 2.5, atol=1e-12)

    def test_duality_for_random_data(self):
        rng = np.random.default_rng(11)
        operator = FrozenOperator.from_source(self.z, self.params, DIRECT)
        for _ in range(5):
            y0bar = rng.standard_normal(32)
            u = BoundaryControl(self.grid, self.times, rng.standard_normal((32, 2)))
            y = SpaceTimeField(self.grid, self.times, operator.forward(y0bar, u.values))
            p = solve_backward(self.z, rng.standard_normal(32), self.params, operator=operator)
            self.assertLessEqual(duality_check(y0bar, u, p, y), 1e-9)

    def test_transpose_probes(self):
        operator = FrozenOperator.from_source(self.z, self.params, DIRECT)
        self.assertLessEqual(transpose_probes(operator, np.random.default_rng(5)), 1e-10)

    def test_boundary_pairing_uses_earlier_level(self):
        u = BoundaryControl(self.grid, self.times, np.ones((32, 2)))
        values = np.zeros((33, 32))
        values[-1] = 100.0
        values[:-1, 0] = 1.0
        p = SpaceTimeField(self.grid, self.times, values)
        self.assertAlmostEqual(boundary_pairing(u, p), self.times.horizon)


class CorruptAdjointTests(SimpleTestCase):

    @override_settings(STEFAN_DEBUG_CORRUPT_ADJOINT=True)
    def test_explicit_backward_steps_break_duality(self):
        params = desk_params()
        grid, times = line(32), steps(16, 0.01)
        z = constant_source(grid, times, two_phase(grid))
        operator = FrozenOperator.from_source(z, params, DIRECT)
        self.assertFalse(operator.backward_is_transposed)
        rng = np.random.default_rng(2)
        y0bar = rng.standard_normal(32)
        u = BoundaryControl.zeros(grid, times)
        y = SpaceTimeField(grid, times, operator.forward(y0bar, u.values))
        p = solve_backward(z, rng.standard_normal(32), params, operator=operator)
        self.assertGreater(duality_check(y0bar, u, p, y), 1e-6)
        self.assertGreater(transpose_probes(operator, rng, count=3), 1e-6)
