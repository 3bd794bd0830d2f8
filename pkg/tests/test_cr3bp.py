"""Dynamics, energy, Lagrange points and propagation"""

import math

import numpy as np
import pytest

import cr3bp
from cr3bp import (
    ControlSegment,
    MassFloorError,
    SingularityError,
    SystemParams,
    ThrustBoundError,
    eom_controlled,
    eom_natural,
    energy,
    energy_gradient,
    lagrange_points,
    mirror,
    propagate,
    propagate_stm,
)


def test_l1_energy(params):
    l1 = np.concatenate([lagrange_points(params)[0], np.zeros(3)])
    assert energy(l1, params) == pytest.approx(-1.594, abs=1e-3)


def test_lagrange_points_are_equilibria(params):
    points = lagrange_points(params)
    for q in points:
        deriv = eom_natural(np.concatenate([q, np.zeros(3)]), params)
        assert np.max(np.abs(deriv)) < 1e-10
    mu = params.mu
    assert points[3] == pytest.approx([0.5 - mu, math.sqrt(3) / 2, 0.0])
    assert points[4] == pytest.approx([0.5 - mu, -math.sqrt(3) / 2, 0.0])
    assert points[2, 0] < -mu < points[0, 0] < 1 - mu < points[1, 0]


def test_lagrange_points_reject_bad_mu():
    with pytest.raises(ValueError):
        lagrange_points(SystemParams(mu=0.7))


def test_energy_gradient_matches_finite_differences(params):
    s = np.array([0.5, 0.3, 0.1, 0.02, -0.01, 0.03])
    grad = energy_gradient(s, params)
    h = 1e-5
    fd = np.zeros(6)
    for i in range(6):
        sp, sm = s.copy(), s.copy()
        sp[i] += h
        sm[i] -= h
        fd[i] = (energy(sp, params) - energy(sm, params)) / (2 * h)
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-8


def test_thrust_acceleration_and_mass_flow(params):
    s = np.array([0.8, 0.0, 0.05, 0.0, 0.1, 0.0, 1000.0])
    natural = eom_natural(s, params)
    thrusting = eom_controlled(s, (1.0, 0.0, 0.0), params)
    accel_m_s2 = (thrusting[3] - natural[3]) * params.accel_unit_m_s2
    assert accel_m_s2 == pytest.approx(1e-3, rel=1e-12)
    flow_kg_s = -thrusting[6] / params.time_unit_s
    assert flow_kg_s == pytest.approx(1.0 / 9806.65, rel=1e-12)
    assert natural[6] == 0.0


def test_eom_errors(params):
    s = np.array([0.8, 0.0, 0.05, 0.0, 0.1, 0.0, 1000.0])
    with pytest.raises(ThrustBoundError):
        eom_controlled(s, (1.0, 1.0, 0.0), params)
    light = s.copy()
    light[6] = params.dry_mass_kg - 1.0
    with pytest.raises(MassFloorError):
        eom_controlled(light, (0.0, 0.0, 0.0), params)
    at_moon = np.array([1 - params.mu, 0.0, 0.0, 0.0, 0.0, 0.0])
    with pytest.raises(SingularityError):
        eom_natural(at_moon, params)


def test_backward_propagation_reverses_forward(params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 1000.0])
    schedule = [ControlSegment(0.3, (0.5, 0.2, 0.0)), ControlSegment(0.4, (0.0, -0.6, 0.3))]
    fwd = propagate(s0, schedule, 0.0, params)
    assert fwd.final[6] < s0[6]
    bwd = propagate(fwd.final, list(reversed(schedule)), 0.0, params, direction="backward")
    assert np.max(np.abs(bwd.final - s0)) < 1e-8
    assert bwd.times[-1] == pytest.approx(-0.7)


def test_energy_conserved_near_l4(params):
    q = lagrange_points(params)[3]
    s0 = np.array([q[0] + 1e-3, q[1], 0.0, 0.0, 1e-3, 0.0])
    traj = propagate(s0, [], 10.0, params)
    e = np.array([energy(s, params) for s in traj.states])
    assert np.max(np.abs(e - e[0])) < 1e-9


def test_stm_matches_finite_differences(params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0])
    elapsed = 1.0
    _, phi = propagate_stm(s0, elapsed, params, tol=1e-13)
    delta = 1e-6
    fd = np.zeros((6, 6))
    for j in range(6):
        sp, sm = s0.copy(), s0.copy()
        sp[j] += delta
        sm[j] -= delta
        fp, _ = propagate_stm(sp, elapsed, params, tol=1e-13)
        fm, _ = propagate_stm(sm, elapsed, params, tol=1e-13)
        fd[:, j] = (fp - fm) / (2 * delta)
    assert np.linalg.norm(fd - phi) / np.linalg.norm(phi) < 1e-5


def test_stm_zero_elapsed_is_identity(params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 900.0])
    final, phi = propagate_stm(s0, 0.0, params)
    assert np.array_equal(final, s0)
    assert np.array_equal(phi, np.eye(6))


def test_mirror_symmetry(params):
    s0 = np.array([0.84, 0.01, 0.02, 0.01, 0.12, -0.02, 1000.0])
    fwd = propagate(s0, [], 1.5, params)
    bwd = propagate(mirror(s0), [], 1.5, params, direction="backward")
    assert np.max(np.abs(bwd.final - mirror(fwd.final))) < 1e-8


@pytest.mark.parametrize("tol", [1e-14, 1e-5])
def test_tolerance_outside_range_rejected(params, tol):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 1000.0])
    with pytest.raises(ValueError):
        propagate(s0, [], 1.0, params, tol=tol)


def test_schedule_violations_rejected(params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 1000.0])
    with pytest.raises(ValueError):
        propagate(s0, [ControlSegment(-0.1)], 1.0, params)
    with pytest.raises(ValueError):
        propagate(s0, [ControlSegment(0.1, (2.0, 0.0, 0.0))], 0.0, params)


def test_trajectory_csv(tmp_path, params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 1000.0])
    traj = propagate(s0, [ControlSegment(0.2, (0.5, 0.0, 0.0))], 0.3, params)
    path = tmp_path / "traj.csv"
    cr3bp.write_trajectory_csv(path, traj)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,q1,q2,q3,v1,v2,v3,m"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (traj.times.size, 8)
    assert data[0, 7] == pytest.approx(1000.0)
    assert traj.segment_ends[-1] == traj.times.size - 1


def test_mass_floor_reached_exactly(params):
    s = np.array([0.8, 0.0, 0.05, 0.0, 0.1, 0.0, params.dry_mass_kg])
    with pytest.raises(MassFloorError):
        eom_controlled(s, (0.5, 0.0, 0.0), params)
    s[6] = params.dry_mass_kg + 1e-6
    assert eom_controlled(s, (0.5, 0.0, 0.0), params)[6] < 0.0


def test_mass_non_increasing_under_thrust(params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 1000.0])
    schedule = [
        ControlSegment(0.4, (0.6, 0.0, 0.0)),
        ControlSegment(0.2),
        ControlSegment(0.5, (0.0, 0.3, -0.4)),
    ]
    traj = propagate(s0, schedule, 0.3, params)
    assert np.all(np.diff(traj.states[:, 6]) <= 0.0)
    assert traj.final[6] < s0[6]
    coast = traj.states[traj.segment_ends[0]:traj.segment_ends[1] + 1, 6]
    assert np.all(coast == coast[0])


def test_empty_schedule_without_coast_returns_start(params):
    s0 = np.array([0.82, 0.0, 0.03, 0.0, 0.15, 0.0, 1000.0])
    traj = propagate(s0, [], 0.0, params)
    assert np.array_equal(traj.final, s0)
    assert traj.times.size == 1


@pytest.mark.slow
def test_relative_energy_drift_on_halo_arc(small_halo, params):
    traj = propagate(small_halo.crossing_state[:6], [], 10.0, params)
    e = np.array([energy(s, params) for s in traj.states])
    assert np.max(np.abs(e - e[0])) / abs(e[0]) < 1e-9


def test_stm_matches_finite_differences_on_random_states(params):
    rng = np.random.default_rng(7)
    l1 = lagrange_points(params)[0]
    delta = 1e-6
    for _ in range(10):
        s0 = np.concatenate([l1 + rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.05, 0.05, 3)])
        _, phi = propagate_stm(s0, 0.5, params, tol=1e-13)
        fd = np.zeros((6, 6))
        for j in range(6):
            sp, sm = s0.copy(), s0.copy()
            sp[j] += delta
            sm[j] -= delta
            fp, _ = propagate_stm(sp, 0.5, params, tol=1e-13)
            fm, _ = propagate_stm(sm, 0.5, params, tol=1e-13)
            fd[:, j] = (fp - fm) / (2 * delta)
        assert np.linalg.norm(fd - phi) / np.linalg.norm(phi) < 1e-5


@pytest.mark.slow
def test_stm_determinant_over_full_period(small_halo, params):
    _, phi = propagate_stm(small_halo.crossing_state[:6], small_halo.period, params)
    assert np.linalg.det(phi) == pytest.approx(1.0, abs=1e-6)
