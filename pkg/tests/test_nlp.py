"""Augmented-Lagrangian solver on small problems with known answers"""

import math
import time
from typing import Dict

import numpy as np
import pytest

import nlp
import transcribe
from nlp import FunctionProblem, SolveOutcome, SolverConfig, Status, classify, solve_problem


def _equality_toy() -> FunctionProblem:
    """min (x1-1)^2 + (x2-2)^2 s.t. x1 + x2 = 1; optimum (0, 1), J = 2"""
    return FunctionProblem(
        f=lambda x: (x[0] - 1) ** 2 + (x[1] - 2) ** 2,
        grad_f=lambda x: np.array([2 * (x[0] - 1), 2 * (x[1] - 2)]),
        lower=[-10.0, -10.0],
        upper=[10.0, 10.0],
        c=lambda x: np.array([x[0] + x[1] - 1.0]),
        jac_c=lambda x: np.array([[1.0, 1.0]]),
    )


def _square(lower: float) -> Dict:
    return dict(f=lambda x: x[0] ** 2, grad_f=lambda x: np.array([2 * x[0]]), lower=[lower], upper=[10.0])


def test_equality_constrained_quadratic():
    outcome = solve_problem(_equality_toy(), [5.0, 5.0])
    assert outcome.status is Status.OPTIMAL
    assert outcome.reason == "converged"
    assert outcome.x_final == pytest.approx([0.0, 1.0], abs=1e-4)
    assert outcome.objective == pytest.approx(2.0, abs=1e-4)
    assert outcome.check_invariants(SolverConfig()) == []


def test_active_lower_bound():
    outcome = solve_problem(FunctionProblem(**_square(2.0)), [7.0])
    assert outcome.status is Status.OPTIMAL
    assert outcome.x_final[0] == pytest.approx(2.0, abs=1e-6)


def test_active_inequality():
    problem = FunctionProblem(
        **_square(-10.0),
        g=lambda x: np.array([2.0 - x[0]]),
        jac_g=lambda x: np.array([[-1.0]]),
    )
    outcome = solve_problem(problem, [7.0])
    assert outcome.status is Status.OPTIMAL
    assert outcome.x_final[0] == pytest.approx(2.0, abs=1e-4)


def test_initial_guess_clipped_into_box():
    outcome = solve_problem(FunctionProblem(**_square(2.0)), [50.0])
    assert outcome.x_final[0] == pytest.approx(2.0, abs=1e-6)


def test_infeasible_problem_fails():
    problem = FunctionProblem(
        **_square(-10.0),
        c=lambda x: np.array([x[0] ** 2 + 1.0]),
        jac_c=lambda x: np.array([[2 * x[0]]]),
    )
    outcome = solve_problem(problem, [3.0], SolverConfig(max_outer_iterations=5))
    assert outcome.status is Status.FAILED
    assert outcome.reason == "outer iteration cap"
    assert outcome.feas_residual >= 1.0
    assert len(outcome.feas_trace) == 5


def test_penalty_grows_monotonically():
    problem = FunctionProblem(
        **_square(-10.0),
        c=lambda x: np.array([x[0] ** 2 + 1.0]),
        jac_c=lambda x: np.array([[2 * x[0]]]),
    )
    outcome = solve_problem(problem, [3.0], SolverConfig(max_outer_iterations=4))
    trace = outcome.penalty_trace
    assert all(b >= a for a, b in zip(trace, trace[1:]))
    assert trace[-1] > trace[0]


def test_wall_time_cap():
    outcome = solve_problem(_equality_toy(), [5.0, 5.0], SolverConfig(max_wall_time_s=1e-9))
    assert outcome.reason == "wall-time cap"
    assert outcome.iterations == 1
    assert outcome.status is Status.FAILED


def test_evaluation_failure_at_start():
    def broken(x):
        raise transcribe.EvaluationError("forward", 2, "integration failed")

    problem = FunctionProblem(f=broken, grad_f=broken, lower=[0.0], upper=[1.0])
    outcome = solve_problem(problem, [0.5])
    assert outcome.status is Status.FAILED
    assert outcome.reason.startswith("evaluation failed")
    assert math.isnan(outcome.objective)


def test_non_finite_initial_guess():
    outcome = solve_problem(FunctionProblem(**_square(2.0)), [float("nan")])
    assert outcome.status is Status.FAILED
    assert outcome.reason == "non-finite initial guess"


def _outcome(feas: float, kkt: float, objective: float = 1.0) -> SolveOutcome:
    return SolveOutcome(Status.FAILED, np.zeros(1), objective, kkt, feas, 1, 0.1)


@pytest.mark.parametrize("feas,kkt,objective,expected", [
    (1e-7, 1e-6, 1.0, Status.OPTIMAL),
    (1e-7, 1e-3, 1.0, Status.FEASIBLE),
    (1e-7, math.inf, 1.0, Status.FEASIBLE),
    (1e-3, 1e-9, 1.0, Status.FAILED),
    (1e-7, 1e-9, math.nan, Status.FAILED),
    (math.inf, 1e-9, 1.0, Status.FAILED),
])
def test_classify(feas, kkt, objective, expected):
    assert classify(_outcome(feas, kkt, objective), SolverConfig()) is expected


def test_outcome_json_drops_non_finite():
    record = nlp.failed_outcome(np.zeros(2), "x", 0.0).to_json(seed=3, method="uniform")
    assert record["objective"] is None
    assert record["feas_residual"] is None
    assert record["seed"] == 3
    assert record["status"] == "failed"


def test_solver_config_invariants():
    assert SolverConfig().check_invariants() == []
    assert SolverConfig(max_wall_time_s=0).check_invariants()
    assert SolverConfig(penalty_growth=1.0).check_invariants()


def test_feasibility_residual_counts_bounds():
    problem = _equality_toy()
    assert nlp.feasibility_residual(problem, [0.0, 1.0]) == pytest.approx(0.0)
    assert nlp.feasibility_residual(problem, [12.0, -11.0]) == pytest.approx(2.0)


@pytest.mark.slow
def test_trajectory_solve_respects_wall_time(params):
    spec = transcribe.ProblemSpec(n_segments=4)
    lower, upper = spec.bounds(params)
    x0 = lower + 0.5 * (upper - lower)
    outcome = nlp.solve(x0, spec, SolverConfig(max_wall_time_s=1e-9), params)
    assert outcome.check_invariants(SolverConfig()) == []
    assert outcome.x_final.shape == (spec.dim,)


def _rosenbrock(values, calls, slow_after):
    def f(x):
        calls.append(1)
        if len(calls) >= slow_after:
            time.sleep(0.2)
        value = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2
        values.append(value)
        return value

    def grad(x):
        return np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]), 200.0 * (x[1] - x[0] ** 2)])

    return FunctionProblem(f=f, grad_f=grad, lower=[-5.0, -5.0], upper=[5.0, 5.0])


def test_wall_time_cap_keeps_lowest_point_of_inner_solve():
    values, calls = [], []
    problem = _rosenbrock(values, calls, slow_after=6)
    outcome = solve_problem(problem, [-1.2, 1.0], SolverConfig(max_wall_time_s=0.3))
    assert outcome.reason == "wall-time cap"
    assert len(values) > 2
    assert outcome.objective <= values[0] + 1e-12
    assert outcome.objective == pytest.approx(min(values))


def test_converges_around_region_that_cannot_be_evaluated():
    def f(x):
        if x[0] > 2.0:
            raise transcribe.EvaluationError("forward", 0, "integration failed")
        return (x[0] - 1.5) ** 2 + (x[1] - 1.0) ** 2

    def grad(x):
        return np.array([2 * (x[0] - 1.5), 2 * (x[1] - 1.0)])

    problem = FunctionProblem(f=f, grad_f=grad, lower=[-10.0, -10.0], upper=[10.0, 10.0])
    outcome = solve_problem(problem, [0.0, 0.0])
    assert outcome.status is Status.OPTIMAL
    assert outcome.x_final == pytest.approx([1.5, 1.0], abs=1e-4)


def test_failure_model_value_matches_gradient():
    z_good = np.array([0.2, 0.4])
    grad_good = np.array([1.5, -0.5])
    z = np.array([0.25, 0.38])
    value, grad = nlp._failure_model(z, z_good, grad_good, ceiling=3.0)
    assert value > 3.0
    h = 1e-7
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (nlp._failure_model(z + e, z_good, grad_good, 3.0)[0] - nlp._failure_model(z - e, z_good, grad_good, 3.0)[0]) / (2 * h)
        assert fd == pytest.approx(grad[j], rel=1e-6)
