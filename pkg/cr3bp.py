"""
cr3bp.py - Normalized Earth-Moon circular restricted three-body dynamics

Provides:
1. Natural and thrust-perturbed equations of motion (position, velocity, mass)
2. Rotating-frame energy and the five Lagrange points
3. Segment-by-segment adaptive propagation (DOP853) forwards or backwards
4. State-transition matrices from the variational equations

All positions are in units of the Earth-Moon distance, times in units of
1/n (the inverse mean motion), velocities accordingly. Mass is carried in
kilograms; thrust in Newtons is converted to normalized acceleration at
evaluation.

Usage:
    from cr3bp import SystemParams, propagate, ControlSegment
    p = SystemParams()
    traj = propagate(s0, [ControlSegment(0.5, (1.0, 0.0, 0.0))], 2.0, p)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

# Earth-Moon system
EARTH_MOON_MU = 0.0121505856
LENGTH_UNIT_KM = 384400.0
TIME_UNIT_S = 375190.25852
MASS_UNIT_KG = 6.0458e24
STANDARD_GRAVITY = 9.80665

TOL_MIN = 1e-13
TOL_MAX = 1e-6
DEFAULT_TOL = 1e-12

TRAJECTORY_CSV_HEADER = "t,q1,q2,q3,v1,v2,v3,m"


# ============================================================================
# ERRORS
# ============================================================================

class Cr3bpError(Exception):
    """Base class for dynamics failures"""


class SingularityError(Cr3bpError):
    """Spacecraft came within the singularity floor of a primary"""

    def __init__(self, rho1: float, rho2: float, floor: float):
        super().__init__(f"distance to primary below floor {floor:g} (rho1={rho1:.3e}, rho2={rho2:.3e})")
        self.rho1 = rho1
        self.rho2 = rho2


class ThrustBoundError(Cr3bpError):
    """Thrust magnitude exceeds the engine limit"""


class MassFloorError(Cr3bpError):
    """Mass dropped to or below the dry-mass floor"""


class PropagationError(Cr3bpError):
    """Integrator failure (step-size underflow or a wrapped dynamics error)"""

    def __init__(self, message: str, segment_index: Optional[int] = None):
        super().__init__(message)
        self.segment_index = segment_index


class RootFindingError(Cr3bpError):
    """Collinear Lagrange point search did not converge"""

    def __init__(self, name: str, bracket: Tuple[float, float], residual: float):
        super().__init__(f"{name}: no root to tolerance in bracket [{bracket[0]:.6f}, {bracket[1]:.6f}] (residual {residual:.2e})")
        self.bracket = bracket


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class SystemParams:
    """Physical constants and normalization scales"""
    mu: float = EARTH_MOON_MU
    isp_seconds: float = 1000.0
    g0: float = STANDARD_GRAVITY
    thrust_max_newtons: float = 1.0
    length_unit_km: float = LENGTH_UNIT_KM
    time_unit_s: float = TIME_UNIT_S
    mass_unit_kg: float = MASS_UNIT_KG
    dry_mass_kg: float = 300.0
    rho_min: float = 1e-9

    def check_invariants(self) -> List[str]:
        violations = []
        if not 0.0 < self.mu < 0.5:
            violations.append(f"mu={self.mu} outside (0, 1/2)")
        if self.isp_seconds <= 0:
            violations.append(f"isp_seconds={self.isp_seconds} must be positive")
        if self.thrust_max_newtons <= 0:
            violations.append(f"thrust_max_newtons={self.thrust_max_newtons} must be positive")
        for name in ("g0", "length_unit_km", "time_unit_s", "mass_unit_kg"):
            if getattr(self, name) <= 0:
                violations.append(f"{name} must be positive")
        if self.dry_mass_kg < 0:
            violations.append("dry_mass_kg must be non-negative")
        return violations

    def validate(self) -> "SystemParams":
        violations = self.check_invariants()
        if violations:
            raise ValueError("; ".join(violations))
        return self

    @property
    def accel_unit_m_s2(self) -> float:
        """Normalized acceleration unit in m/s^2"""
        return self.length_unit_km * 1000.0 / self.time_unit_s ** 2

    @property
    def velocity_unit_km_s(self) -> float:
        return self.length_unit_km / self.time_unit_s

    def thrust_accel(self, thrust_newtons: float, mass_kg: float) -> float:
        """Thrust acceleration magnitude in normalized units"""
        return thrust_newtons / mass_kg / self.accel_unit_m_s2

    def mass_flow(self, thrust_newtons: float) -> float:
        """Fuel consumption in kg per normalized time unit (positive number)"""
        return thrust_newtons / (self.isp_seconds * self.g0) * self.time_unit_s


@dataclass(frozen=True)
class State7:
    """Position, velocity (normalized) and mass (kg) in the rotating frame"""
    q: Tuple[float, float, float]
    v: Tuple[float, float, float]
    m: float

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "State7":
        arr = np.asarray(arr, dtype=float)
        return cls(tuple(arr[0:3]), tuple(arr[3:6]), float(arr[6]))

    def to_array(self) -> np.ndarray:
        return np.array([*self.q, *self.v, self.m], dtype=float)

    def check_invariants(self) -> List[str]:
        violations = []
        if not self.m > 0:
            violations.append(f"mass {self.m} must be positive")
        if not np.all(np.isfinite(self.to_array())):
            violations.append("non-finite state entry")
        return violations


@dataclass(frozen=True)
class ControlSegment:
    """Constant thrust held for a duration (normalized time)"""
    duration: float
    u: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def magnitude(self) -> float:
        return math.sqrt(self.u[0] ** 2 + self.u[1] ** 2 + self.u[2] ** 2)


ControlSchedule = List[ControlSegment]


@dataclass
class Trajectory:
    """Dense samples of a propagated arc; times are signed elapsed times"""
    times: np.ndarray
    states: np.ndarray
    segment_ends: List[int] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1].copy()

    @property
    def initial(self) -> np.ndarray:
        return self.states[0].copy()


def check_schedule(schedule: Sequence[ControlSegment], p: SystemParams, check_bounds: bool = True) -> List[str]:
    violations = []
    for i, seg in enumerate(schedule):
        if seg.duration < 0:
            violations.append(f"segment {i}: negative duration {seg.duration}")
        if check_bounds and seg.magnitude > p.thrust_max_newtons * (1.0 + 1e-12):
            violations.append(f"segment {i}: |u|={seg.magnitude:.6g} N exceeds {p.thrust_max_newtons} N")
    return violations


# ============================================================================
# EQUATIONS OF MOTION
# ============================================================================

def _distances(x: float, y: float, z: float, mu: float) -> Tuple[float, float]:
    rho1 = math.sqrt((x + mu) ** 2 + y * y + z * z)
    rho2 = math.sqrt((x - 1.0 + mu) ** 2 + y * y + z * z)
    return rho1, rho2


def _gravity(x: float, y: float, z: float, p: SystemParams) -> Tuple[float, float, float]:
    """Gradient of the effective potential (gravity + centrifugal)"""
    mu = p.mu
    rho1, rho2 = _distances(x, y, z, mu)
    if rho1 < p.rho_min or rho2 < p.rho_min:
        raise SingularityError(rho1, rho2, p.rho_min)
    c1 = (1.0 - mu) / rho1 ** 3
    c2 = mu / rho2 ** 3
    ax = x - c1 * (x + mu) - c2 * (x - 1.0 + mu)
    ay = y - c1 * y - c2 * y
    az = -c1 * z - c2 * z
    return ax, ay, az


def eom_natural(s: Sequence[float], p: SystemParams) -> np.ndarray:
    """
    Ballistic rotating-frame dynamics.

    Accepts a 6- or 7-element state; for 7 elements the mass derivative is
    exactly zero.
    """
    x, y, z, vx, vy, vz = s[0], s[1], s[2], s[3], s[4], s[5]
    gx, gy, gz = _gravity(x, y, z, p)
    deriv = [vx, vy, vz, gx + 2.0 * vy, gy - 2.0 * vx, gz]
    if len(s) > 6:
        deriv.append(0.0)
    return np.array(deriv)


def eom_controlled(s: Sequence[float], u: Sequence[float], p: SystemParams, check_bounds: bool = True) -> np.ndarray:
    """
    Thrust-perturbed dynamics with fuel depletion.

    Args:
        s: 7-element state (normalized position/velocity, mass in kg)
        u: thrust vector in Newtons
        p: system parameters
        check_bounds: raise on thrust above the engine limit (the transcription
            turns this off and carries the norm bound as an NLP constraint)

    Returns:
        7-element derivative; mass derivative in kg per normalized time unit
    """
    m = s[6]
    if m <= p.dry_mass_kg:
        raise MassFloorError(f"mass {m:.6f} kg at or below dry-mass floor {p.dry_mass_kg} kg")
    ux, uy, uz = u[0], u[1], u[2]
    thrust = math.sqrt(ux * ux + uy * uy + uz * uz)
    if check_bounds and thrust > p.thrust_max_newtons * (1.0 + 1e-12):
        raise ThrustBoundError(f"|u|={thrust:.6g} N exceeds {p.thrust_max_newtons} N")
    deriv = eom_natural(s, p)
    if thrust > 0.0:
        scale = 1.0 / (m * p.accel_unit_m_s2)
        deriv[3] += ux * scale
        deriv[4] += uy * scale
        deriv[5] += uz * scale
        deriv[6] = -p.mass_flow(thrust)
    return deriv


def energy(s: Sequence[float], p: SystemParams) -> float:
    """Rotating-frame energy, e = |v|^2/2 - U(q), with e(L1) = -1.594 for Earth-Moon"""
    mu = p.mu
    x, y, z = s[0], s[1], s[2]
    rho1, rho2 = _distances(x, y, z, mu)
    if rho1 < p.rho_min or rho2 < p.rho_min:
        raise SingularityError(rho1, rho2, p.rho_min)
    kinetic = 0.5 * (s[3] ** 2 + s[4] ** 2 + s[5] ** 2)
    potential = 0.5 * (x * x + y * y) + (1.0 - mu) / rho1 + mu / rho2 + 0.5 * mu * (1.0 - mu)
    return kinetic - potential


def energy_gradient(s: Sequence[float], p: SystemParams) -> np.ndarray:
    """Partials of energy with respect to (q, v)"""
    gx, gy, gz = _gravity(s[0], s[1], s[2], p)
    return np.array([-gx, -gy, -gz, s[3], s[4], s[5]])


def lagrange_points(p: SystemParams) -> np.ndarray:
    """
    The five libration points as a (5, 3) array in L1..L5 order.

    Collinear points are bracketed roots of the q1-axis force balance.
    """
    mu = p.mu
    if not 0.0 < mu < 0.5:
        raise ValueError(f"mu={mu} outside (0, 1/2)")

    def axis_force(x: float) -> float:
        r1 = x + mu
        r2 = x - 1.0 + mu
        return x - (1.0 - mu) * r1 / abs(r1) ** 3 - mu * r2 / abs(r2) ** 3

    gap = 1e-6
    brackets = {
        "L1": (-mu + gap, 1.0 - mu - gap),
        "L2": (1.0 - mu + gap, 2.0),
        "L3": (-2.0, -mu - gap),
    }
    points = np.zeros((5, 3))
    for i, (name, bracket) in enumerate(brackets.items()):
        try:
            root = brentq(axis_force, *bracket, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
        except (ValueError, RuntimeError) as e:
            raise RootFindingError(name, bracket, float("nan")) from e
        residual = abs(axis_force(root))
        if residual > 1e-12:
            raise RootFindingError(name, bracket, residual)
        points[i, 0] = root
    points[3] = (0.5 - mu, math.sqrt(3.0) / 2.0, 0.0)
    points[4] = (0.5 - mu, -math.sqrt(3.0) / 2.0, 0.0)
    return points


def _system_matrix(s: Sequence[float], p: SystemParams) -> np.ndarray:
    """Jacobian of the ballistic 6-state vector field"""
    mu = p.mu
    x, y, z = s[0], s[1], s[2]
    rho1, rho2 = _distances(x, y, z, mu)
    if rho1 < p.rho_min or rho2 < p.rho_min:
        raise SingularityError(rho1, rho2, p.rho_min)
    r1_3, r2_3 = rho1 ** 3, rho2 ** 3
    r1_5, r2_5 = rho1 ** 5, rho2 ** 5
    dx1, dx2 = x + mu, x - 1.0 + mu
    a1, a2 = 1.0 - mu, mu

    uxx = 1.0 - a1 / r1_3 - a2 / r2_3 + 3 * a1 * dx1 ** 2 / r1_5 + 3 * a2 * dx2 ** 2 / r2_5
    uyy = 1.0 - a1 / r1_3 - a2 / r2_3 + 3 * a1 * y * y / r1_5 + 3 * a2 * y * y / r2_5
    uzz = -a1 / r1_3 - a2 / r2_3 + 3 * a1 * z * z / r1_5 + 3 * a2 * z * z / r2_5
    uxy = 3 * a1 * dx1 * y / r1_5 + 3 * a2 * dx2 * y / r2_5
    uxz = 3 * a1 * dx1 * z / r1_5 + 3 * a2 * dx2 * z / r2_5
    uyz = 3 * a1 * y * z / r1_5 + 3 * a2 * y * z / r2_5

    A = np.zeros((6, 6))
    A[0, 3] = A[1, 4] = A[2, 5] = 1.0
    A[3:6, 0:3] = [[uxx, uxy, uxz], [uxy, uyy, uyz], [uxz, uyz, uzz]]
    A[3, 4] = 2.0
    A[4, 3] = -2.0
    return A


# ============================================================================
# PROPAGATION
# ============================================================================

def _check_tol(tol: float):
    if not TOL_MIN <= tol <= TOL_MAX:
        raise ValueError(f"tolerance {tol:g} outside [{TOL_MIN:g}, {TOL_MAX:g}]")


def integrate(rhs, y0: np.ndarray, t_end: float, tol: float, segment_index: Optional[int] = None, **kwargs):
    try:
        sol = solve_ivp(rhs, (0.0, t_end), y0, method="DOP853", rtol=tol, atol=tol, **kwargs)
    except Cr3bpError as e:
        raise PropagationError(f"{type(e).__name__}: {e}", segment_index) from e
    if sol.status == -1:
        raise PropagationError(f"integration failed: {sol.message}", segment_index)
    return sol


def propagate(
    s0: Sequence[float],
    schedule: Sequence[ControlSegment],
    coast_after: float,
    p: SystemParams,
    tol: float = DEFAULT_TOL,
    direction: str = "forward",
    check_bounds: bool = True,
) -> Trajectory:
    """
    Integrate a controlled arc segment by segment, then coast.

    Segments are applied in the order given along the chosen time direction;
    backward propagation integrates with negated time, so mass grows back
    through thrust arcs.

    Args:
        s0: 7-element initial state
        schedule: constant-thrust segments (empty means a ballistic arc)
        coast_after: ballistic time appended after the schedule
        p: system parameters
        tol: relative and absolute integrator tolerance
        direction: "forward" or "backward"
        check_bounds: validate thrust magnitudes against the engine limit

    Returns:
        Trajectory with signed elapsed times and (k, 7) states
    """
    _check_tol(tol)
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    violations = check_schedule(schedule, p, check_bounds)
    if coast_after < 0:
        violations.append(f"negative coast time {coast_after}")
    if violations:
        raise ValueError("; ".join(violations))

    sign = 1.0 if direction == "forward" else -1.0
    state = np.asarray(s0, dtype=float).copy()
    times: List[np.ndarray] = [np.array([0.0])]
    states: List[np.ndarray] = [state[None, :]]
    segment_ends: List[int] = []
    elapsed = 0.0
    count = 1

    legs = [(seg.duration, seg.u) for seg in schedule]
    if coast_after > 0:
        legs.append((coast_after, (0.0, 0.0, 0.0)))

    for index, (duration, u) in enumerate(legs):
        if duration > 0:
            if u[0] == 0.0 and u[1] == 0.0 and u[2] == 0.0:
                rhs = lambda t, y: eom_natural(y, p)
            else:
                rhs = lambda t, y, u=u: eom_controlled(y, u, p, check_bounds=check_bounds)
            sol = integrate(rhs, state, sign * duration, tol, segment_index=index)
            times.append(elapsed + sol.t[1:])
            states.append(sol.y[:, 1:].T)
            count += sol.t.size - 1
            elapsed += sign * duration
            state = sol.y[:, -1].copy()
        segment_ends.append(count - 1)

    return Trajectory(np.concatenate(times), np.vstack(states), segment_ends)


def _variational_rhs(p: SystemParams):
    def rhs(t, y):
        deriv = np.empty(42)
        deriv[:6] = eom_natural(y[:6], p)
        phi = y[6:].reshape(6, 6)
        deriv[6:] = (_system_matrix(y, p) @ phi).ravel()
        return deriv
    return rhs


def propagate_stm(s0: Sequence[float], elapsed: float, p: SystemParams, tol: float = DEFAULT_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ballistic propagation with the 6x6 state-transition matrix.

    Negative elapsed time integrates backwards. Mass, when present, is carried
    through unchanged.

    Returns:
        (final state with the same length as s0, Stm)
    """
    _check_tol(tol)
    s0 = np.asarray(s0, dtype=float)
    if elapsed == 0.0:
        return s0.copy(), np.eye(6)
    y0 = np.concatenate([s0[:6], np.eye(6).ravel()])
    sol = integrate(_variational_rhs(p), y0, elapsed, tol)
    final = s0.copy()
    final[:6] = sol.y[:6, -1]
    return final, sol.y[6:, -1].reshape(6, 6)


def propagate_stm_to_xz_crossing(
    s0: Sequence[float],
    p: SystemParams,
    tol: float = DEFAULT_TOL,
    max_time: float = 10.0,
    direction: int = -1,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Propagate with the Stm until the next q2 = 0 crossing in the given
    direction (-1: q2 decreasing through zero).

    Returns:
        (crossing time, 6-state at the crossing, Stm at the crossing)
    """
    _check_tol(tol)
    s0 = np.asarray(s0, dtype=float)[:6]

    def crossing(t, y):
        return y[1]

    crossing.terminal = True
    crossing.direction = direction

    y0 = np.concatenate([s0, np.eye(6).ravel()])
    sol = integrate(_variational_rhs(p), y0, max_time, tol, events=crossing)
    if sol.t_events[0].size == 0:
        raise PropagationError(f"no q1q3-plane crossing within {max_time} time units")
    y_event = sol.y_events[0][0]
    return float(sol.t_events[0][0]), y_event[:6].copy(), y_event[6:].reshape(6, 6)


def mirror(s: Sequence[float]) -> np.ndarray:
    """Image under the CR3BP symmetry (q2, v1, v3, t) -> (-q2, -v1, -v3, -t)"""
    out = np.array(s, dtype=float)
    out[1] = -out[1]
    out[3] = -out[3]
    out[5] = -out[5]
    return out


# ============================================================================
# EXPORT
# ============================================================================

def write_trajectory_csv(path, traj: Trajectory):
    """Write a trajectory as CSV: t,q1,q2,q3,v1,v2,v3,m (mass column in kg)"""
    states = traj.states
    if states.shape[1] == 6:
        states = np.hstack([states, np.full((states.shape[0], 1), np.nan)])
    data = np.column_stack([traj.times, states])
    np.savetxt(path, data, delimiter=",", header=TRAJECTORY_CSV_HEADER, comments="", fmt="%.16e")
    logger.debug("wrote %d trajectory samples to %s", data.shape[0], path)
