"""Forward-backward shooting transcription"""

import numpy as np
import pytest

import cr3bp
import transcribe
from cr3bp import ControlSegment
from transcribe import DecisionVector, InvalidDecisionError, ProblemSpec, Variant

N = 4


@pytest.fixture
def spec() -> ProblemSpec:
    return ProblemSpec(n_segments=N, alpha=0.3)


def _controls():
    return np.array([
        [0.6, 0.2, 0.0],
        [0.3, -0.5, 0.1],
        [-0.2, 0.4, 0.3],
        [0.0, 0.0, 0.8],
    ])


@pytest.fixture
def matched(spec, params, monkeypatch):
    """Decision vector whose backward leg retraces the forward leg exactly"""
    dv = DecisionVector(tau_s=2.0, tau_i=0.5, tau_f=0.3, m_f=700.0, u=_controls())
    forward_end = transcribe._forward_leg(dv, spec, params, transcribe.DEFAULT_EVAL_TOL).final
    dt = dv.tau_s / N
    rest = [ControlSegment(dt, tuple(u)) for u in dv.u[N // 2:]]
    target = cr3bp.propagate(forward_end, rest, dv.tau_f, params, tol=1e-12).final
    dv.m_f = float(target[6])
    monkeypatch.setattr(transcribe, "terminal_state", lambda *args, **kwargs: target[:6].copy())
    return dv.pack()


def test_spiral_end_mass(params):
    s = transcribe.initial_boundary(params)
    assert s[6] == pytest.approx(1000.0 - 2592000.0 / 9806.65, rel=1e-9)
    traj = transcribe.spiral_trajectory(params)
    assert traj.times[-1] == pytest.approx(30 * 86400 / params.time_unit_s)


def test_spiral_energy_increases(params):
    traj = transcribe.spiral_trajectory(params)
    e = np.array([cr3bp.energy(s, params) for s in traj.states])
    assert np.all(np.diff(e) > 0)


def test_dimensions():
    hybrid = ProblemSpec(n_segments=N)
    variable = ProblemSpec(n_segments=N, variant=Variant.VARIABLE_TERMINAL)
    assert hybrid.dim == 3 * N + 4
    assert variable.dim == 3 * N + 6
    assert hybrid.mass_index == 3
    assert variable.mass_index == 5
    assert variable.omega == 1.0
    assert ProblemSpec(alpha=0.25).omega == 0.25


def test_spec_invariants():
    assert ProblemSpec().check_invariants() == []
    assert ProblemSpec(n_segments=3).check_invariants()
    assert ProblemSpec(alpha=1.2).check_invariants()
    with pytest.raises(transcribe.TranscriptionError):
        ProblemSpec(dry_mass_kg=2000.0).validate()


def test_header_round_trip():
    spec = ProblemSpec(variant=Variant.VARIABLE_TERMINAL, alpha=0.75, n_segments=6)
    assert ProblemSpec.from_header(spec.to_header()) == spec
    assert spec.with_alpha(0.25).alpha == 0.25
    assert spec.with_alpha(0.25).n_segments == 6


def test_decision_vector_pack_unpack(spec):
    x = np.arange(spec.dim, dtype=float) / 10.0
    dv = DecisionVector.unpack(x, spec)
    assert dv.m_f == x[3]
    assert dv.u.shape == (N, 3)
    assert np.array_equal(dv.pack(), x)
    assert dv.time_of_flight == pytest.approx(x[0] + x[1] + x[2])
    with pytest.raises(InvalidDecisionError):
        DecisionVector.unpack(x[:-1], spec)


def test_bounds_hybrid(spec, params):
    lower, upper = spec.bounds(params)
    assert lower.shape == upper.shape == (spec.dim,)
    assert lower[3] > spec.dry_mass_kg
    assert lower[3] == pytest.approx(spec.dry_mass_kg, rel=1e-15)
    assert upper[3] == spec.initial_mass_kg
    assert np.all(upper[4:] == params.thrust_max_newtons)


def test_cost_and_gradient(spec):
    x = np.zeros(spec.dim)
    x[:3] = [2.0, 1.0, 1.0]
    x[3] = 800.0
    fuel = ProblemSpec(n_segments=N, alpha=1.0)
    time = ProblemSpec(n_segments=N, alpha=0.0)
    assert transcribe.hybrid_cost(x, fuel) == pytest.approx(-0.8)
    assert transcribe.hybrid_cost(x, time) == pytest.approx(4.0 / 20.0)
    g = transcribe.cost_gradient(x, fuel)
    assert g[3] == pytest.approx(-1.0 / 1000.0)
    assert np.all(g[:3] == 0.0)
    assert np.all(g[4:] == 0.0)
    g = transcribe.cost_gradient(x, spec)
    assert g[0] == pytest.approx(0.7 / 20.0)


def test_thrust_constraints(spec, params):
    x = np.zeros(spec.dim)
    x[4:] = _controls().ravel()
    x[4:7] = [1.0, 0.0, 0.0]
    c = transcribe.thrust_constraints(x, spec, params)
    assert c[0] == pytest.approx(0.0)
    assert np.all(c[1:] < 0)
    J = transcribe.thrust_constraint_jacobian(x, spec)
    assert J.shape == (N, spec.dim)
    assert np.array_equal(J[0, 4:7], [2.0, 0.0, 0.0])
    assert np.all(J[0, 7:] == 0.0)


def test_legs_touched(spec):
    assert transcribe._legs_touched(0, spec) == (True, True)
    assert transcribe._legs_touched(1, spec) == (True, False)
    assert transcribe._legs_touched(2, spec) == (False, True)
    assert transcribe._legs_touched(3, spec) == (False, True)
    assert transcribe._legs_touched(spec.thrust_offset, spec) == (True, False)
    assert transcribe._legs_touched(spec.dim - 1, spec) == (False, True)


def test_invalid_decisions_rejected(spec, params):
    x = np.zeros(spec.dim)
    x[:4] = [-1.0, 0.5, 0.5, 700.0]
    with pytest.raises(InvalidDecisionError):
        transcribe.evaluate(x, spec, params)
    x[:4] = [1.0, 0.5, 0.5, 0.0]
    with pytest.raises(InvalidDecisionError):
        transcribe.evaluate(x, spec, params)


def test_matched_legs_close(matched, spec, params):
    report = transcribe.evaluate(matched, spec, params)
    assert np.max(np.abs(report.residuals)) < 1e-7
    assert report.cost == pytest.approx(transcribe.hybrid_cost(matched, spec))
    assert report.check_invariants() == []
    assert np.allclose(report.throttles, np.linalg.norm(_controls(), axis=1))


def test_stitched_trajectory(matched, spec, params, tmp_path):
    report = transcribe.evaluate(matched, spec, params)
    traj = transcribe.stitched_trajectory(report)
    assert np.all(np.diff(traj.times) >= 0)
    assert traj.times[-1] == pytest.approx(2.0 + 0.5 + 0.3)
    path = tmp_path / "solution.csv"
    transcribe.write_solution_csv(path, report)
    assert path.read_text().startswith("t,q1,q2,q3,v1,v2,v3,m")


def test_residual_moves_with_perturbation(matched, spec, params):
    x = matched.copy()
    x[spec.thrust_offset] += 0.05
    report = transcribe.evaluate(x, spec, params)
    assert np.max(np.abs(report.residuals[3:6])) > 1e-6


@pytest.mark.slow
def test_jacobian_stable_under_step_halving(matched, spec, params):
    grad, J = transcribe.jacobian(matched, spec, params)
    _, J_half = transcribe.jacobian(matched, spec, params, steps=transcribe.step_sizes(spec) / 2)
    assert J.shape == (7, spec.dim)
    assert np.array_equal(grad, transcribe.cost_gradient(matched, spec))
    assert np.linalg.norm(J - J_half) / np.linalg.norm(J) < 1e-3


@pytest.mark.slow
def test_coast_time_column_matches_richardson_estimate(matched, spec, params):
    _, J = transcribe.jacobian(matched, spec, params)
    _, J_half = transcribe.jacobian(matched, spec, params, steps=transcribe.step_sizes(spec) / 2)
    col, col_half = J[:, 1], J_half[:, 1]
    extrapolated = (4.0 * col_half - col) / 3.0
    assert np.linalg.norm(col - extrapolated) / np.linalg.norm(extrapolated) < 1e-5


@pytest.mark.slow
def test_jacobian_one_sided_at_zero_time(matched, spec, params):
    x = matched.copy()
    x[1] = 0.0
    _, J = transcribe.jacobian(x, spec, params)
    assert np.all(np.isfinite(J))
    assert np.linalg.norm(J[:, 1]) > 0


def test_zero_thrust_mass_residual(matched, spec, params):
    x = matched.copy()
    x[spec.thrust_offset:] = 0.0
    report = transcribe.evaluate(x, spec, params)
    spiral_end_mass = transcribe.initial_boundary(params)[6]
    assert report.residuals[6] == pytest.approx(spiral_end_mass - x[spec.mass_index], rel=1e-12)


def test_swapping_segment_thrust_changes_residual(matched, spec, params):
    x = matched.copy()
    first = slice(spec.thrust_offset, spec.thrust_offset + 3)
    second = slice(spec.thrust_offset + 3, spec.thrust_offset + 6)
    x[first], x[second] = matched[second].copy(), matched[first].copy()
    base = transcribe.evaluate(matched, spec, params).residuals
    swapped = transcribe.evaluate(x, spec, params).residuals
    assert np.max(np.abs(swapped[:6] - base[:6])) > 1e-6


def test_matched_solution_equals_single_shooting(matched, spec, params):
    dv = DecisionVector.unpack(matched, spec)
    dt = dv.tau_s / N
    schedule = [ControlSegment(dv.tau_i)] + [ControlSegment(dt, tuple(u)) for u in dv.u]
    single = cr3bp.propagate(transcribe.initial_boundary(params), schedule, dv.tau_f, params, tol=1e-12)
    report = transcribe.evaluate(matched, spec, params)
    target = report.backward.states[0]
    assert np.max(np.abs(single.final[:6] - target[:6])) < 1e-7
    assert single.final[6] == pytest.approx(dv.m_f, rel=1e-9)
    assert np.max(np.abs(report.forward.final - report.backward.final)) < 1e-7
