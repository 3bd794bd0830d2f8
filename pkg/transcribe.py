"""
transcribe.py - Forward-backward shooting transcription of the transfer problems

Two problem variants share one transcription:

    hybrid-cost        fixed terminal point on the stable manifold
                       (t1 = 0.2 T, t2 = 8 on the e_pert = 0.01 halo),
                       cost weight omega = alpha
    variable-terminal  (t1, t2) join the decision vector, the halo energy
                       follows alpha, cost weight omega = 1 (minimum fuel)

Decision vector layout (flat array):

    [tau_s, tau_i, tau_f, (t1, t2,) m_f, u_1x, u_1y, u_1z, ..., u_Nz]

The forward leg starts at the end of a tangential GTO spiral, coasts tau_i and
flies u_1..u_{N/2}; the backward leg starts at the manifold point with mass
m_f, coasts back tau_f and flies u_N..u_{N/2+1} in reverse. The match-point
residual is forward end minus backward end (position, velocity, mass in kg).
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import cr3bp
import halo
from cr3bp import ControlSegment, SystemParams, Trajectory

logger = logging.getLogger(__name__)

DEFAULT_EVAL_TOL = 1e-10
JACOBIAN_TOL = 1e-12
TIME_STEP = 1e-4
MASS_STEP_KG = 1e-4
THRUST_STEP_N = 1e-7
SECONDS_PER_DAY = 86400.0


class TranscriptionError(Exception):
    """Base class for transcription failures"""


class InvalidDecisionError(TranscriptionError):
    """Decision vector outside the loose validity box"""


class EvaluationError(TranscriptionError):
    """Propagation failure inside one shooting leg"""

    def __init__(self, leg: str, segment_index: Optional[int], message: str):
        super().__init__(f"{leg} leg failed at segment {segment_index}: {message}")
        self.leg = leg
        self.segment_index = segment_index


class Variant(Enum):
    HYBRID_COST = "hybrid-cost"
    VARIABLE_TERMINAL = "variable-terminal"


# ============================================================================
# INITIAL BOUNDARY (GTO SPIRAL)
# ============================================================================

@dataclass(frozen=True)
class SpiralConfig:
    """Geostationary transfer orbit and the tangential thrust arc that leaves it"""
    perigee_altitude_km: float = 400.0
    apogee_radius_km: float = 42164.0
    thrust_newtons: float = 1.0
    duration_days: float = 30.0
    earth_radius_km: float = 6378.137
    earth_mu_km3_s2: float = 398600.4418
    initial_mass_kg: float = 1000.0
    tol: float = 1e-10

    def check_invariants(self) -> List[str]:
        violations = []
        rp = self.earth_radius_km + self.perigee_altitude_km
        if not rp < self.apogee_radius_km:
            violations.append(f"perigee radius {rp} km not below apogee radius {self.apogee_radius_km} km")
        if self.thrust_newtons < 0:
            violations.append("spiral thrust must be non-negative")
        if self.duration_days <= 0:
            violations.append("spiral duration must be positive")
        if self.initial_mass_kg <= 0:
            violations.append("initial mass must be positive")
        return violations


def gto_state(p: SystemParams, cfg: SpiralConfig) -> np.ndarray:
    """GTO perigee on the +q1 side of Earth in the rotating frame at zero phase"""
    rp = cfg.earth_radius_km + cfg.perigee_altitude_km
    ra = cfg.apogee_radius_km
    vp = math.sqrt(cfg.earth_mu_km3_s2 * (2.0 / rp - 2.0 / (rp + ra)))
    rp_n = rp / p.length_unit_km
    vp_n = vp / p.velocity_unit_km_s
    return np.array([-p.mu + rp_n, 0.0, 0.0, 0.0, vp_n - rp_n, 0.0, cfg.initial_mass_kg])


@lru_cache(maxsize=8)
def spiral_trajectory(p: SystemParams = SystemParams(), cfg: SpiralConfig = SpiralConfig()) -> Trajectory:
    """
    Fixed-time spiral with thrust along the rotating-frame velocity.

    The result is cached; callers must not modify the returned arrays.
    """
    duration = cfg.duration_days * SECONDS_PER_DAY / p.time_unit_s

    def rhs(t, y):
        v = y[3:6]
        u = cfg.thrust_newtons * v / np.linalg.norm(v)
        return cr3bp.eom_controlled(y, u, p)

    s0 = gto_state(p, cfg)
    sol = cr3bp.integrate(rhs, s0, duration, cfg.tol)
    logger.info("GTO spiral: %.3f TU, end mass %.3f kg", duration, sol.y[6, -1])
    return Trajectory(sol.t.copy(), sol.y.T.copy(), [sol.t.size - 1])


def initial_boundary(p: SystemParams = SystemParams(), cfg: SpiralConfig = SpiralConfig()) -> np.ndarray:
    """End state of the GTO spiral (position, velocity, mass in kg)"""
    return spiral_trajectory(p, cfg).final


# ============================================================================
# PROBLEM DEFINITION
# ============================================================================

@dataclass(frozen=True)
class ProblemSpec:
    """One parameterized transfer problem; alpha is the conditional parameter"""
    variant: Variant = Variant.HYBRID_COST
    alpha: float = 0.5
    n_segments: int = 20
    tau_s_bounds: Tuple[float, float] = (0.5, 10.0)
    tau_i_bounds: Tuple[float, float] = (0.0, 5.0)
    tau_f_bounds: Tuple[float, float] = (0.0, 5.0)
    t2_bounds: Tuple[float, float] = (halo.T2_MIN, halo.T2_MAX)
    fixed_t1_fraction: float = 0.2
    fixed_t2: float = 8.0
    fixed_e_pert: float = 0.01
    initial_mass_kg: float = 1000.0
    dry_mass_kg: float = 300.0
    eps_mag: float = 1e-6
    branch_sign: int = 1
    spiral: SpiralConfig = field(default_factory=SpiralConfig)

    def check_invariants(self) -> List[str]:
        violations = []
        if not 0.0 <= self.alpha <= 1.0:
            violations.append(f"alpha={self.alpha} outside [0, 1]")
        if self.n_segments < 2 or self.n_segments % 2:
            violations.append(f"n_segments={self.n_segments} must be even and at least 2")
        for name in ("tau_s_bounds", "tau_i_bounds", "tau_f_bounds", "t2_bounds"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                violations.append(f"{name}={lo, hi} inconsistent")
        if not 0.0 < self.dry_mass_kg < self.initial_mass_kg:
            violations.append("dry mass must lie strictly between 0 and the initial mass")
        if self.branch_sign not in (-1, 1):
            violations.append("branch_sign must be +1 or -1")
        violations.extend(self.spiral.check_invariants())
        return violations

    def validate(self) -> "ProblemSpec":
        violations = self.check_invariants()
        if violations:
            raise TranscriptionError("; ".join(violations))
        return self

    @property
    def omega(self) -> float:
        """Cost weight between final mass and time of flight"""
        return self.alpha if self.variant is Variant.HYBRID_COST else 1.0

    @property
    def halo_energy(self) -> float:
        if self.variant is Variant.HYBRID_COST:
            return halo.E_L1 + self.fixed_e_pert
        return halo.energy_from_alpha(self.alpha)

    @property
    def has_terminal_params(self) -> bool:
        return self.variant is Variant.VARIABLE_TERMINAL

    @property
    def dim(self) -> int:
        return 3 * self.n_segments + (6 if self.has_terminal_params else 4)

    @property
    def mass_index(self) -> int:
        return 5 if self.has_terminal_params else 3

    @property
    def thrust_offset(self) -> int:
        return self.mass_index + 1

    @property
    def tof_max(self) -> float:
        return self.tau_s_bounds[1] + self.tau_i_bounds[1] + self.tau_f_bounds[1]

    def orbit(self, p: SystemParams = SystemParams()) -> halo.HaloOrbit:
        return halo.solve_halo(self.halo_energy, p)

    def with_alpha(self, alpha: float) -> "ProblemSpec":
        return ProblemSpec(**{**self._fields(), "alpha": float(alpha)})

    def _fields(self) -> Dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def bounds(self, p: SystemParams = SystemParams()) -> Tuple[np.ndarray, np.ndarray]:
        """Lower and upper bound arrays of the decision box"""
        lower = [self.tau_s_bounds[0], self.tau_i_bounds[0], self.tau_f_bounds[0]]
        upper = [self.tau_s_bounds[1], self.tau_i_bounds[1], self.tau_f_bounds[1]]
        if self.has_terminal_params:
            lower += [0.0, self.t2_bounds[0]]
            upper += [self.orbit(p).period, self.t2_bounds[1]]
        lower.append(float(np.nextafter(self.dry_mass_kg, np.inf)))  # strictly above the dry-mass floor
        upper.append(self.initial_mass_kg)
        t_max = p.thrust_max_newtons
        lower += [-t_max] * (3 * self.n_segments)
        upper += [t_max] * (3 * self.n_segments)
        return np.array(lower), np.array(upper)

    def to_header(self) -> Dict:
        d = self._fields()
        d["variant"] = self.variant.value
        d["spiral"] = asdict(self.spiral)
        for name in ("tau_s_bounds", "tau_i_bounds", "tau_f_bounds", "t2_bounds"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_header(cls, d: Dict) -> "ProblemSpec":
        d = dict(d)
        d["variant"] = Variant(d["variant"])
        d["spiral"] = SpiralConfig(**d.get("spiral", {}))
        for name in ("tau_s_bounds", "tau_i_bounds", "tau_f_bounds", "t2_bounds"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass
class DecisionVector:
    """Unpacked view of the flat NLP unknown"""
    tau_s: float
    tau_i: float
    tau_f: float
    m_f: float
    u: np.ndarray
    t1: Optional[float] = None
    t2: Optional[float] = None

    @classmethod
    def unpack(cls, x: Sequence[float], spec: ProblemSpec) -> "DecisionVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (spec.dim,):
            raise InvalidDecisionError(f"decision vector has shape {x.shape}, expected ({spec.dim},)")
        t1 = t2 = None
        if spec.has_terminal_params:
            t1, t2 = float(x[3]), float(x[4])
        return cls(
            tau_s=float(x[0]),
            tau_i=float(x[1]),
            tau_f=float(x[2]),
            m_f=float(x[spec.mass_index]),
            u=x[spec.thrust_offset:].reshape(spec.n_segments, 3).copy(),
            t1=t1,
            t2=t2,
        )

    def pack(self) -> np.ndarray:
        head = [self.tau_s, self.tau_i, self.tau_f]
        if self.t1 is not None:
            head += [self.t1, self.t2]
        head.append(self.m_f)
        return np.concatenate([np.array(head, dtype=float), np.asarray(self.u, dtype=float).ravel()])

    @property
    def time_of_flight(self) -> float:
        return self.tau_s + self.tau_i + self.tau_f

    def check_invariants(self, spec: ProblemSpec, p: SystemParams = SystemParams()) -> List[str]:
        lower, upper = spec.bounds(p)
        x = self.pack()
        violations = []
        if x.size != spec.dim:
            violations.append(f"dimension {x.size} != {spec.dim}")
            return violations
        below = np.nonzero(x < lower - 1e-12)[0]
        above = np.nonzero(x > upper + 1e-12)[0]
        for i in below:
            violations.append(f"entry {i}={x[i]:.6g} below {lower[i]:.6g}")
        for i in above:
            violations.append(f"entry {i}={x[i]:.6g} above {upper[i]:.6g}")
        norms = np.linalg.norm(self.u, axis=1)
        for i in np.nonzero(norms > p.thrust_max_newtons * (1 + 1e-9))[0]:
            violations.append(f"|u_{i + 1}|={norms[i]:.6g} N exceeds the engine limit")
        return violations


@dataclass
class EvalReport:
    """Cost, match-point residuals and both legs of one evaluation"""
    cost: float
    residuals: np.ndarray
    forward: Trajectory
    backward: Trajectory
    throttles: np.ndarray

    def check_invariants(self, slack: float = 1e-6) -> List[str]:
        violations = []
        if self.residuals.shape != (7,):
            violations.append(f"residual shape {self.residuals.shape} != (7,)")
        if np.any(self.throttles < 0) or np.any(self.throttles > 1.0 + slack):
            violations.append("throttle outside [0, 1]")
        return violations


# ============================================================================
# EVALUATION
# ============================================================================

def _check_valid(dv: DecisionVector):
    times = [dv.tau_s, dv.tau_i, dv.tau_f] + ([dv.t1, dv.t2] if dv.t1 is not None else [])
    if any(not np.isfinite(t) or t < 0 for t in times):
        raise InvalidDecisionError(f"negative or non-finite time in {times}")
    if not dv.m_f > 0 or not np.all(np.isfinite(dv.u)):
        raise InvalidDecisionError("final mass must be positive and controls finite")


@lru_cache(maxsize=512)
def _terminal_state_cached(energy: float, t1: float, t2: float, eps_mag: float, branch_sign: int, p: SystemParams, tol: float) -> Tuple[float, ...]:
    orbit = halo.solve_halo(energy, p)
    arc = halo.ManifoldArcSpec(t1=t1, t2=t2, eps_mag=eps_mag, branch_sign=branch_sign)
    return tuple(halo.manifold_terminal_state(orbit, arc, p, tol=tol, check=False))


def terminal_state(dv: DecisionVector, spec: ProblemSpec, p: SystemParams, tol: float) -> np.ndarray:
    """Manifold point targeted by the backward leg (6-state, before mass)"""
    if spec.has_terminal_params:
        t1, t2 = dv.t1, dv.t2
    else:
        t1 = spec.fixed_t1_fraction * spec.orbit(p).period
        t2 = spec.fixed_t2
    try:
        return np.array(_terminal_state_cached(spec.halo_energy, float(t1), float(t2), spec.eps_mag, spec.branch_sign, p, tol))
    except cr3bp.Cr3bpError as e:
        raise EvaluationError("terminal", None, str(e)) from e


def _forward_leg(dv: DecisionVector, spec: ProblemSpec, p: SystemParams, tol: float) -> Trajectory:
    half = spec.n_segments // 2
    dt = dv.tau_s / spec.n_segments
    schedule = [ControlSegment(dv.tau_i)] + [ControlSegment(dt, tuple(u)) for u in dv.u[:half]]
    try:
        return cr3bp.propagate(initial_boundary(p, spec.spiral), schedule, 0.0, p, tol=tol, check_bounds=False)
    except cr3bp.PropagationError as e:
        raise EvaluationError("forward", e.segment_index, str(e)) from e


def _backward_leg(dv: DecisionVector, spec: ProblemSpec, p: SystemParams, tol: float) -> Trajectory:
    half = spec.n_segments // 2
    dt = dv.tau_s / spec.n_segments
    start = np.append(terminal_state(dv, spec, p, tol), dv.m_f)
    schedule = [ControlSegment(dv.tau_f)] + [ControlSegment(dt, tuple(u)) for u in dv.u[:half - 1:-1]]
    try:
        return cr3bp.propagate(start, schedule, 0.0, p, tol=tol, direction="backward", check_bounds=False)
    except cr3bp.PropagationError as e:
        raise EvaluationError("backward", e.segment_index, str(e)) from e


def evaluate(x: Sequence[float], spec: ProblemSpec, p: SystemParams = SystemParams(), tol: float = DEFAULT_EVAL_TOL) -> EvalReport:
    """
    Propagate both legs and form the match-point residual.

    Bound violations are not rejected; only negative times or a non-positive
    final mass are.

    Raises:
        InvalidDecisionError: outside the loose validity box
        EvaluationError: propagation failure (leg and segment index attached)
    """
    dv = DecisionVector.unpack(x, spec)
    _check_valid(dv)
    fwd = _forward_leg(dv, spec, p, tol)
    bwd = _backward_leg(dv, spec, p, tol)
    residuals = fwd.final - bwd.final
    throttles = np.linalg.norm(dv.u, axis=1) / p.thrust_max_newtons
    return EvalReport(hybrid_cost(x, spec), residuals, fwd, bwd, throttles)


def hybrid_cost(x: Sequence[float], spec: ProblemSpec) -> float:
    """J = omega * (-m_f / m_i) + (1 - omega) * (tau_s + tau_i + tau_f) / tof_max"""
    x = np.asarray(x, dtype=float)
    w = spec.omega
    tof = x[0] + x[1] + x[2]
    return w * (-x[spec.mass_index] / spec.initial_mass_kg) + (1.0 - w) * tof / spec.tof_max


def cost_gradient(x: Sequence[float], spec: ProblemSpec) -> np.ndarray:
    grad = np.zeros(spec.dim)
    w = spec.omega
    grad[0:3] = (1.0 - w) / spec.tof_max
    grad[spec.mass_index] = -w / spec.initial_mass_kg
    return grad


def thrust_constraints(x: Sequence[float], spec: ProblemSpec, p: SystemParams = SystemParams()) -> np.ndarray:
    """Smooth norm bounds |u_i|^2 - T_max^2 <= 0, one per segment"""
    u = np.asarray(x, dtype=float)[spec.thrust_offset:].reshape(spec.n_segments, 3)
    return np.sum(u * u, axis=1) - p.thrust_max_newtons ** 2


def thrust_constraint_jacobian(x: Sequence[float], spec: ProblemSpec) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    jac = np.zeros((spec.n_segments, spec.dim))
    for i in range(spec.n_segments):
        cols = slice(spec.thrust_offset + 3 * i, spec.thrust_offset + 3 * i + 3)
        jac[i, cols] = 2.0 * x[cols]
    return jac


def step_sizes(spec: ProblemSpec) -> np.ndarray:
    steps = np.full(spec.dim, THRUST_STEP_N)
    steps[:spec.mass_index] = TIME_STEP
    steps[spec.mass_index] = MASS_STEP_KG
    return steps


def _legs_touched(j: int, spec: ProblemSpec) -> Tuple[bool, bool]:
    """Which legs (forward, backward) depend on decision entry j"""
    if j == 0:
        return True, True
    if j == 1:
        return True, False
    if j < spec.thrust_offset:
        return False, True
    segment = (j - spec.thrust_offset) // 3
    return segment < spec.n_segments // 2, segment >= spec.n_segments // 2


def jacobian(
    x: Sequence[float],
    spec: ProblemSpec,
    p: SystemParams = SystemParams(),
    tol: float = JACOBIAN_TOL,
    steps: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic cost gradient and the 7 x dim finite-difference residual Jacobian.

    Central differences, except one-sided second-order stencils for time
    entries whose backward step would turn negative. Each column re-propagates
    only the leg(s) that depend on it.
    """
    x = np.asarray(x, dtype=float)
    dv = DecisionVector.unpack(x, spec)
    _check_valid(dv)
    h = step_sizes(spec) if steps is None else np.asarray(steps, dtype=float)

    fwd0 = _forward_leg(dv, spec, p, tol).final
    bwd0 = _backward_leg(dv, spec, p, tol).final

    def residual_at(xp: np.ndarray, fwd_needed: bool, bwd_needed: bool) -> np.ndarray:
        d = DecisionVector.unpack(xp, spec)
        f = _forward_leg(d, spec, p, tol).final if fwd_needed else fwd0
        b = _backward_leg(d, spec, p, tol).final if bwd_needed else bwd0
        return f - b

    jac = np.zeros((7, spec.dim))
    for j in range(spec.dim):
        fwd_needed, bwd_needed = _legs_touched(j, spec)
        e = np.zeros(spec.dim)
        e[j] = h[j]
        if j < spec.mass_index and x[j] - h[j] < 0:
            c0 = fwd0 - bwd0
            c1 = residual_at(x + e, fwd_needed, bwd_needed)
            c2 = residual_at(x + 2 * e, fwd_needed, bwd_needed)
            jac[:, j] = (-3 * c0 + 4 * c1 - c2) / (2 * h[j])
        else:
            jac[:, j] = (residual_at(x + e, fwd_needed, bwd_needed) - residual_at(x - e, fwd_needed, bwd_needed)) / (2 * h[j])
    return cost_gradient(x, spec), jac


# ============================================================================
# EXPORT
# ============================================================================

def stitched_trajectory(report: EvalReport) -> Trajectory:
    """Forward leg followed by the time-reversed backward leg on one clock"""
    fwd, bwd = report.forward, report.backward
    t_match = fwd.times[-1]
    total = t_match - bwd.times[-1]
    back_times = total + bwd.times[::-1]
    times = np.concatenate([fwd.times, back_times])
    states = np.vstack([fwd.states, bwd.states[::-1]])
    return Trajectory(times, states, [fwd.times.size - 1, times.size - 1])


def write_solution_csv(path, report: EvalReport):
    cr3bp.write_trajectory_csv(path, stitched_trajectory(report))
