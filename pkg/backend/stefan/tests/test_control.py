import numpy as np
from django.test import SimpleTestCase, tag

from stefan.control_service import (dense_penalized_solution, epsilon_continuation, gradient, outer_fixed_point,
                                    next_relaxation, penalty_functional, solve_penalized, violation_norms)
from stefan.forward_service import FrozenOperator
from stefan.models import (BoundaryControl, LinearSolver, OuterLoopSettings, PenalizedProblem, PicardSettings,
                           SolverOptions, TargetSet)
from stefan.mushy_service import target_from_intervals

from .factories import constant_source, desk_params, line, steps, two_phase

DIRECT = SolverOptions(linear_solver=LinearSolver.DIRECT)
PICARD = PicardSettings(max_iters=100)


def problem(cells=32, count=32, epsilon=1e-2, y0=None, target=None, mu=None, horizon=0.05):
    """Frozen instance whose uncontrolled terminal state is far below the band on the target."""
    params = desk_params()
    grid, times = line(cells), steps(count, horizon)
    y0 = two_phase(grid, solid=-1.0) if y0 is None else y0
    target = target or target_from_intervals(grid, [[0.1, 0.3]])
    return PenalizedProblem(constant_source(grid, times, y0), y0, target, epsilon, params, DIRECT, mu=mu)


class PenaltyFunctionalTests(SimpleTestCase):

    def test_instance_violates_band_without_control(self):
        prob = problem()
        free = FrozenOperator.from_source(prob.z, prob.params, DIRECT).forward(prob.y0, np.zeros((32, 2)))[-1]
        below, above = violation_norms(free, prob.penalty_data, prob.z.grid)
        self.assertGreater(below, 0.1)
        self.assertEqual(above, 0.0)

    def test_zero_when_terminal_state_satisfies_band(self):
        prob = problem(mu=10.0)
        u = BoundaryControl.zeros(prob.z.grid, prob.z.times)
        self.assertEqual(penalty_functional(u, prob), 0.0)
        np.testing.assert_array_equal(gradient(u, prob).values, 0.0)

    def test_uniform_violation(self):
        grid = line(32)
        y0 = np.full(32, -0.05 - 0.2)
        prob = problem(y0=y0, epsilon=0.5)
        u = BoundaryControl.zeros(grid, prob.z.times)
        expected = prob.target.measure * 0.2 ** 2 / (2 * 0.5)
        self.assertAlmostEqual(penalty_functional(u, prob), expected, places=12)

    def test_control_cost_is_half_squared_norm(self):
        prob = problem(mu=10.0)
        u = BoundaryControl(prob.z.grid, prob.z.times, np.full((32, 2), 0.1))
        self.assertAlmostEqual(penalty_functional(u, prob), 0.5 * u.norm() ** 2, places=12)

    def test_gradient_matches_finite_differences(self):
        prob = problem(cells=64, count=32, epsilon=1e-2)
        operator = FrozenOperator.from_source(prob.z, prob.params, DIRECT)
        rng = np.random.default_rng(4)
        u = BoundaryControl(prob.z.grid, prob.z.times, rng.standard_normal((32, 2)))
        g = gradient(u, prob, operator)
        h = 1e-6
        for _ in range(5):
            direction = BoundaryControl(u.grid, u.times, rng.standard_normal((32, 2)))
            plus = BoundaryControl(u.grid, u.times, u.values + h * direction.values)
            minus = BoundaryControl(u.grid, u.times, u.values - h * direction.values)
            fd = (penalty_functional(plus, prob, operator) - penalty_functional(minus, prob, operator)) / (2 * h)
            exact = g.inner(direction)
            self.assertLessEqual(abs(fd - exact) / max(abs(exact), 1e-12), 1e-6)


class SolvePenalizedTests(SimpleTestCase):

    def test_satisfied_target_needs_no_control(self):
        prob = problem(mu=10.0)
        result = solve_penalized(prob)
        np.testing.assert_array_equal(result.u.values, 0.0)
        self.assertEqual(result.J, 0.0)
        self.assertFalse(result.stagnated)

    def test_matches_dense_reference(self):
        prob = problem(cells=16, count=16, epsilon=1e-2)
        operator = FrozenOperator.from_source(prob.z, prob.params, DIRECT)
        self.assertGreater(penalty_functional(BoundaryControl.zeros(prob.z.grid, prob.z.times), prob, operator), 0.0)
        settings = OuterLoopSettings(tol_grad=1e-12)
        result = solve_penalized(prob, settings, operator=operator)
        reference = dense_penalized_solution(prob, operator)
        self.assertGreater(reference.norm(), 1e-3)
        gap = BoundaryControl(reference.grid, reference.times, result.u.values - reference.values).norm()
        self.assertLessEqual(gap / reference.norm(), 1e-8)
        self.assertFalse(result.stagnated)

    def test_optimality_residual(self):
        prob = problem(epsilon=1e-3)
        settings = OuterLoopSettings(tol_grad=1e-9)
        result = solve_penalized(prob, settings)
        self.assertLessEqual(result.grad_norm, 1e-9 * max(1.0, result.u.norm()))
        self.assertLess(result.J, penalty_functional(BoundaryControl.zeros(prob.z.grid, prob.z.times), prob))

    def test_warm_start_from_optimum_stops_at_once(self):
        prob = problem(epsilon=1e-2)
        operator = FrozenOperator.from_source(prob.z, prob.params, DIRECT)
        first = solve_penalized(prob, operator=operator)
        second = solve_penalized(prob, u0=first.u, operator=operator)
        self.assertEqual(second.iterations, 0)
        self.assertAlmostEqual(second.J, first.J, places=12)


class ContinuationTests(SimpleTestCase):

    def test_schedule_ends_at_floor(self):
        settings = OuterLoopSettings(eps0=1.0, eps_factor=0.25, eps_floor=1e-3)
        schedule = settings.eps_schedule
        self.assertEqual(schedule[0], 1.0)
        self.assertEqual(schedule[-1], 1e-3)
        self.assertTrue(all(b < a for a, b in zip(schedule, schedule[1:])))

    def test_violation_decreases_along_schedule(self):
        prob = problem()
        settings = OuterLoopSettings(eps_floor=1e-4, violation_tol=0.0)
        result = epsilon_continuation(prob, settings)
        violations = [stage.violation for stage in result.stages]
        self.assertGreater(violations[0], 0.0)
        self.assertEqual(len(result.stages), len(settings.eps_schedule))
        self.assertTrue(all(b <= a * 1.01 for a, b in zip(violations, violations[1:])))
        ratios = [stage.duality_ratio for stage in result.stages if stage.duality_ratio is not None]
        self.assertEqual(len(ratios), len(result.stages))
        self.assertTrue(all(r <= 1.05 for r in ratios))

    def test_stops_when_violation_vanishes(self):
        prob = problem(mu=10.0)
        result = epsilon_continuation(prob, OuterLoopSettings(eps_floor=1e-4))
        self.assertEqual(len(result.stages), 1)
        self.assertTrue(result.stopped_early)

    def test_final_violation_small(self):
        prob = problem()
        settings = OuterLoopSettings(eps_floor=1e-5, violation_tol=0.0)
        result = epsilon_continuation(prob, settings)
        below, above = violation_norms(result.y.final, prob.penalty_data, prob.z.grid)
        free = FrozenOperator.from_source(prob.z, prob.params, DIRECT).forward(prob.y0, np.zeros((32, 2)))[-1]
        initial_below, initial_above = violation_norms(free, prob.penalty_data, prob.z.grid)
        self.assertLess(max(below, above), 0.1 * max(initial_below, initial_above))


    def test_violation_at_floor_within_limit(self):
        prob = problem()
        settings = OuterLoopSettings(eps_floor=1e-6, violation_tol=0.0)
        result = epsilon_continuation(prob, settings)
        self.assertEqual(result.stages[-1].epsilon, 1e-6)
        limit = 1e-3 * np.sqrt(prob.target.measure)
        self.assertLessEqual(result.stages[-1].violation_sum, limit)
        norms = [stage.u_norm for stage in result.stages]
        self.assertLessEqual(max(norms), 2.0 * norms[-1])


class RelaxationTests(SimpleTestCase):

    def test_single_increase_halves_relaxation(self):
        self.assertEqual(next_relaxation([0.05, 0.02, 0.03], 1.0), 0.5)

    def test_decrease_keeps_relaxation(self):
        self.assertEqual(next_relaxation([0.05, 0.03, 0.01], 0.5), 0.5)
        self.assertEqual(next_relaxation([0.05], 1.0), 1.0)

    def test_alternating_changes_keep_halving_to_floor(self):
        changes, relaxation = [], 1.0
        for change in [0.05, 0.01, 0.04, 0.015, 0.03, 0.01, 0.025]:
            changes.append(change)
            relaxation = next_relaxation(changes, relaxation)
        self.assertEqual(relaxation, 0.25)

    def test_default_iteration_budget(self):
        self.assertEqual(OuterLoopSettings().max_outer, 30)


class OuterFixedPointTests(SimpleTestCase):

    def test_covered_target_returns_zero_control(self):
        params = desk_params()
        grid, times = line(32), steps(16)
        target = TargetSet(grid, np.ones(32, dtype=bool))
        u, y, report = outer_fixed_point(np.full(32, 0.5), target, params, options=DIRECT, picard=PICARD,
                                         grid_times=(grid, times))
        np.testing.assert_array_equal(u.values, 0.0)
        self.assertTrue(report.success)
        self.assertTrue(report.precheck_covered)
        self.assertEqual(report.outer_iterations, 1)

    def test_penalty_tolerance_sits_inside_band(self):
        params = desk_params()
        grid, times = line(32), steps(32)
        target = target_from_intervals(grid, [[0.4, 0.6]])
        settings = OuterLoopSettings(max_outer=1, eps_floor=1e-2)
        _, _, report = outer_fixed_point(two_phase(grid), target, params, settings, DIRECT, PICARD,
                                         grid_times=(grid, times))
        self.assertAlmostEqual(report.penalty_mu, 0.05 * 0.8)
        self.assertEqual(report.band, (-0.05, 1.05))
        self.assertFalse(report.precheck_covered)
        self.assertTrue(report.log)

    @tag('slow')
    def test_relaxation_does_not_change_verdict(self):
        params = desk_params()
        grid, times = line(32), steps(32)
        target = target_from_intervals(grid, [[0.4, 0.6]])
        verdicts = []
        for relaxation in (1.0, 0.5):
            settings = OuterLoopSettings(eps_floor=1e-4, relaxation=relaxation, max_outer=20)
            _, _, report = outer_fixed_point(two_phase(grid), target, params, settings, DIRECT, PICARD,
                                             grid_times=(grid, times))
            verdicts.append(report.success)
        self.assertEqual(verdicts[0], verdicts[1])
