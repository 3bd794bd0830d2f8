"""
halo.py - L1 halo family, monodromy analysis and stable-manifold terminal states

Builds northern L1 halo orbits by differential correction on the q1q3-plane
crossing and natural-parameter continuation in energy, then maps the manifold
parameters (t1, t2) to the terminal state of a transfer:

    1. coast on the halo for t1 from the Earth-side crossing
    2. add a small perturbation along the transported stable eigenvector
    3. integrate backwards for t2 along the stable manifold

Energies follow e = e_L1 + e_pert,min + alpha * (e_pert,max - e_pert,min).
"""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import cr3bp
from cr3bp import SystemParams

logger = logging.getLogger(__name__)

E_L1 = -1.594  # rounded anchor; energy(L1) for the default mu is within 1e-3
E_PERT_MIN = 0.008
E_PERT_MAX = 0.095
T2_MIN = 5.0
T2_MAX = 11.0

HALO_CSV_HEADER = "alpha,e,period,q1,q3,v2"


class HaloError(Exception):
    """Base class for halo family failures"""


class CorrectionError(HaloError):
    """Differential correction did not converge"""


class ContinuationStall(HaloError):
    """Continuation step shrank below the minimum without progress"""


class EigenstructureError(HaloError):
    """Monodromy matrix has no real stable multiplier"""


class ManifoldSpecError(HaloError):
    """Manifold arc parameters outside their admissible ranges"""


@dataclass(frozen=True)
class HaloSettings:
    """Numerical settings for correction and continuation"""
    az_seed: float = 0.1
    continuation_step: float = 0.002
    min_step: float = 1e-6
    max_iterations: int = 50
    newton_tol: float = 1e-12
    integrator_tol: float = 1e-12
    max_continuation_steps: int = 2000


@dataclass(frozen=True)
class HaloOrbit:
    """Corrected periodic orbit with its monodromy data"""
    energy: float
    period: float
    crossing_state: np.ndarray
    monodromy: np.ndarray
    stable_eigval: float
    stable_eigvec: np.ndarray

    @property
    def amplitude(self) -> float:
        """Out-of-plane extent at the Earth-side crossing"""
        return abs(float(self.crossing_state[2]))

    def check_invariants(self, p: SystemParams, tol: float = 1e-9) -> List[str]:
        violations = []
        s0 = self.crossing_state
        if abs(s0[1]) > 1e-12:
            violations.append(f"crossing state q2={s0[1]:.3e} is not on the q1q3-plane")
        x_l1 = cr3bp.lagrange_points(p)[0, 0]
        if not s0[0] < x_l1:
            violations.append(f"crossing q1={s0[0]:.6f} is not Earth-side of L1 ({x_l1:.6f})")
        if not abs(self.stable_eigval) < 1.0:
            violations.append(f"stable multiplier {self.stable_eigval:.6g} not inside the unit circle")
        e = cr3bp.energy(s0, p)
        if abs(e - self.energy) > 1e-10:
            violations.append(f"energy mismatch {e - self.energy:.2e}")
        final, _ = cr3bp.propagate_stm(s0, self.period, p)
        mismatch = float(np.max(np.abs(final - s0)))
        if mismatch > tol:
            violations.append(f"periodicity mismatch {mismatch:.2e}")
        return violations


@dataclass(frozen=True)
class ManifoldArcSpec:
    """Location (t1) and coast time (t2) of a stable-manifold terminal arc"""
    t1: float
    t2: float
    eps_mag: float = 1e-6
    branch_sign: int = 1
    t2_min: float = T2_MIN
    t2_max: float = T2_MAX

    def check_invariants(self, period: float) -> List[str]:
        violations = []
        if not 0.0 <= self.t1 < period:
            violations.append(f"t1={self.t1} outside [0, {period})")
        if not self.t2_min <= self.t2 <= self.t2_max:
            violations.append(f"t2={self.t2} outside [{self.t2_min}, {self.t2_max}]")
        if self.branch_sign not in (-1, 1):
            violations.append(f"branch_sign must be +1 or -1, got {self.branch_sign}")
        if self.eps_mag < 0:
            violations.append("eps_mag must be non-negative")
        return violations


# ============================================================================
# ENERGY PARAMETERIZATION
# ============================================================================

def energy_from_alpha(alpha: float) -> float:
    """Halo energy for the conditional parameter alpha in [0, 1]"""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    return E_L1 + E_PERT_MIN + alpha * (E_PERT_MAX - E_PERT_MIN)


# ============================================================================
# DIFFERENTIAL CORRECTION
# ============================================================================

def richardson_seed(az: float, p: SystemParams) -> np.ndarray:
    """
    Third-order analytic approximation of a northern L1 halo at its Earth-side
    q1q3-plane crossing.

    Args:
        az: out-of-plane amplitude in units of the L1-Moon distance
    """
    mu = p.mu
    x_l1 = cr3bp.lagrange_points(p)[0, 0]
    gamma = 1.0 - mu - x_l1
    c2 = (mu + (1 - mu) * gamma ** 3 / (1 - gamma) ** 3) / gamma ** 3
    c3 = (mu - (1 - mu) * gamma ** 4 / (1 - gamma) ** 4) / gamma ** 3
    c4 = (mu + (1 - mu) * gamma ** 5 / (1 - gamma) ** 5) / gamma ** 3

    lam = math.sqrt(((2 - c2) + math.sqrt((c2 - 2) ** 2 + 4 * (c2 - 1) * (1 + 2 * c2))) / 2)
    k = 2 * lam / (lam ** 2 + 1 - c2)
    delta = lam ** 2 - c2

    d1 = 3 * lam ** 2 / k * (k * (6 * lam ** 2 - 1) - 2 * lam)
    d2 = 8 * lam ** 2 / k * (k * (11 * lam ** 2 - 1) - 2 * lam)

    a21 = 3 * c3 * (k ** 2 - 2) / (4 * (1 + 2 * c2))
    a22 = 3 * c3 / (4 * (1 + 2 * c2))
    a23 = -3 * c3 * lam / (4 * k * d1) * (3 * k ** 3 * lam - 6 * k * (k - lam) + 4)
    a24 = -3 * c3 * lam / (4 * k * d1) * (2 + 3 * k * lam)
    b21 = -3 * c3 * lam / (2 * d1) * (3 * k * lam - 4)
    b22 = 3 * c3 * lam / d1
    d21 = -c3 / (2 * lam ** 2)

    a31 = (-9 * lam / (4 * d2) * (4 * c3 * (k * a23 - b21) + k * c4 * (4 + k ** 2))
           + (9 * lam ** 2 + 1 - c2) / (2 * d2) * (3 * c3 * (2 * a23 - k * b21) + c4 * (2 + 3 * k ** 2)))
    a32 = -1 / d2 * (9 * lam / 4 * (4 * c3 * (k * a24 - b22) + k * c4)
                     + 1.5 * (9 * lam ** 2 + 1 - c2) * (c3 * (k * b22 + d21 - 2 * a24) - c4))
    b31 = 3 / (8 * d2) * (8 * lam * (3 * c3 * (k * b21 - 2 * a23) - c4 * (2 + 3 * k ** 2))
                          + (9 * lam ** 2 + 1 + 2 * c2) * (4 * c3 * (k * a23 - b21) + k * c4 * (4 + k ** 2)))
    b32 = 1 / d2 * (9 * lam * (3 * c3 * (k * b22 + d21 - 2 * a24) - c4)
                    + 3.0 / 8 * (9 * lam ** 2 + 1 + 2 * c2) * (4 * c3 * (k * a24 - b22) + k * c4))
    d31 = 3 / (64 * lam ** 2) * (4 * c3 * a24 + c4)
    d32 = 3 / (64 * lam ** 2) * (4 * c3 * (a23 - d21) + c4 * (4 + k ** 2))

    s1 = ((1.5 * c3 * (2 * a21 * (k ** 2 - 2) - a23 * (k ** 2 + 2) - 2 * k * b21)
           - 3.0 / 8 * c4 * (3 * k ** 4 - 8 * k ** 2 + 8)) / (2 * lam * (lam * (1 + k ** 2) - 2 * k)))
    s2 = ((1.5 * c3 * (2 * a22 * (k ** 2 - 2) + a24 * (k ** 2 + 2) + 2 * k * b22 + 5 * d21)
           + 3.0 / 8 * c4 * (12 - k ** 2)) / (2 * lam * (lam * (1 + k ** 2) - 2 * k)))
    l1 = -1.5 * c3 * (2 * a21 + a23 + 5 * d21) - 3.0 / 8 * c4 * (12 - k ** 2) + 2 * lam ** 2 * s1
    l2 = 1.5 * c3 * (a24 - 2 * a22) + 9.0 / 8 * c4 + 2 * lam ** 2 * s2

    ax_sq = -(l2 * az ** 2 + delta) / l1
    if ax_sq <= 0:
        raise CorrectionError(f"no halo seed for az={az}: in-plane amplitude is imaginary")
    ax = math.sqrt(ax_sq)
    omega = 1 + s1 * ax ** 2 + s2 * az ** 2

    x = a21 * ax ** 2 + a22 * az ** 2 - ax + (a23 * ax ** 2 - a24 * az ** 2) + (a31 * ax ** 3 - a32 * ax * az ** 2)
    z = az + d21 * ax * az * (1 - 3) + (d32 * az * ax ** 2 - d31 * az ** 3)
    vy = lam * omega * (k * ax + 2 * (b21 * ax ** 2 - b22 * az ** 2) + 3 * (b31 * ax ** 3 - b32 * ax * az ** 2))

    return np.array([x_l1 + gamma * x, 0.0, gamma * z, 0.0, gamma * vy, 0.0])


def _half_period(s0: np.ndarray, p: SystemParams, tol: float) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    direction = -1 if s0[4] > 0 else 1
    t_half, s_half, stm = cr3bp.propagate_stm_to_xz_crossing(s0, p, tol=tol, direction=direction)
    f_half = cr3bp.eom_natural(s_half, p)
    return t_half, s_half, stm, f_half


def _crossing_jacobian(stm: np.ndarray, f_half: np.ndarray, columns: Sequence[int]) -> np.ndarray:
    """Sensitivity of (v1, v3) at the free-time crossing to the chosen initial entries"""
    cols = list(columns)
    rows = [3, 5]
    return stm[np.ix_(rows, cols)] - np.outer(f_half[rows], stm[1, cols]) / f_half[1]


def correct_fixed_z(s0: Sequence[float], p: SystemParams, settings: HaloSettings = HaloSettings()) -> Tuple[np.ndarray, float]:
    """
    Correct (q1, v2) with q3 held fixed until v1 = v3 = 0 at the half-period crossing.

    Returns:
        (corrected crossing state, period)
    """
    s = np.array(s0, dtype=float)
    best = math.inf
    for iteration in range(settings.max_iterations):
        t_half, s_half, stm, f_half = _half_period(s, p, settings.integrator_tol)
        residual = np.array([s_half[3], s_half[5]])
        err = float(np.max(np.abs(residual)))
        logger.debug("fixed-z correction iter %d: |r|=%.3e", iteration, err)
        if err < settings.newton_tol or (err < 1e-10 and err >= best):
            return s, 2.0 * t_half
        best = min(best, err)
        step = np.linalg.solve(_crossing_jacobian(stm, f_half, (0, 4)), -residual)
        s[0] += step[0]
        s[4] += step[1]
    raise CorrectionError(f"fixed-z correction did not converge in {settings.max_iterations} iterations (|r|={best:.2e})")


def correct_fixed_energy(
    s0: Sequence[float],
    target_e: float,
    p: SystemParams,
    settings: HaloSettings = HaloSettings(),
) -> Tuple[np.ndarray, float]:
    """
    Newton iteration on (q1, q3, v2) enforcing v1 = v3 = 0 at the half-period
    crossing and energy = target_e.

    Returns:
        (corrected crossing state, period)
    """
    s = np.array(s0, dtype=float)
    best = math.inf
    for iteration in range(settings.max_iterations):
        try:
            t_half, s_half, stm, f_half = _half_period(s, p, settings.integrator_tol)
        except cr3bp.Cr3bpError as e:
            raise CorrectionError(f"propagation failed during correction: {e}") from e
        residual = np.array([s_half[3], s_half[5], cr3bp.energy(s, p) - target_e])
        err = float(np.max(np.abs(residual)))
        logger.debug("fixed-energy correction iter %d: |r|=%.3e", iteration, err)
        if not np.isfinite(err):
            break
        if err < settings.newton_tol or (err < 1e-10 and err >= best):
            return s, 2.0 * t_half
        best = min(best, err)
        jac = np.zeros((3, 3))
        jac[0:2] = _crossing_jacobian(stm, f_half, (0, 2, 4))
        jac[2] = cr3bp.energy_gradient(s, p)[[0, 2, 4]]
        step = np.linalg.lstsq(jac, -residual, rcond=None)[0]
        s[[0, 2, 4]] += step
    raise CorrectionError(f"fixed-energy correction did not converge to e={target_e:.10f} (|r|={best:.2e})")


# ============================================================================
# FAMILY CONSTRUCTION
# ============================================================================

_FAMILY_CACHE: Dict[Tuple[SystemParams, HaloSettings], Dict[float, HaloOrbit]] = {}
_CACHE_LOCK = threading.Lock()


def _quantize(e: float) -> float:
    return round(e, 10)


def _build_orbit(s0: np.ndarray, period: float, target_e: float, p: SystemParams, settings: HaloSettings) -> HaloOrbit:
    _, monodromy = cr3bp.propagate_stm(s0, period, p, tol=settings.integrator_tol)
    eigval, eigvec = _stable_pair(monodromy)
    return HaloOrbit(
        energy=target_e,
        period=period,
        crossing_state=s0.copy(),
        monodromy=monodromy,
        stable_eigval=eigval,
        stable_eigvec=eigvec,
    )


def solve_halo(target_e: float, p: SystemParams = SystemParams(), settings: HaloSettings = HaloSettings()) -> HaloOrbit:
    """
    Corrected northern L1 halo at the requested energy.

    Continuation starts from the nearest orbit already in the family cache (or
    from a Richardson seed) and steps in energy, halving the step whenever the
    corrector fails.
    """
    key = _quantize(target_e)
    with _CACHE_LOCK:
        family = _FAMILY_CACHE.setdefault((p, settings), {})
        cached = family.get(key)
        anchors = dict(family)
    if cached is not None:
        return cached

    if anchors:
        nearest = min(anchors, key=lambda e: abs(e - target_e))
        s = anchors[nearest].crossing_state.copy()
        e = anchors[nearest].energy
        period = anchors[nearest].period
    else:
        seed = richardson_seed(settings.az_seed, p)
        s, period = correct_fixed_z(seed, p, settings)
        e = cr3bp.energy(s, p)
        logger.info("halo seed corrected: e=%.6f period=%.6f", e, period)

    previous: Optional[Tuple[float, np.ndarray]] = None
    step = settings.continuation_step
    steps = 0
    while e != target_e:
        steps += 1
        if steps > settings.max_continuation_steps:
            raise ContinuationStall(f"continuation exceeded {settings.max_continuation_steps} steps toward e={target_e}")
        remaining = target_e - e
        e_next = target_e if abs(remaining) <= step else e + math.copysign(step, remaining)
        guess = s.copy()
        if previous is not None and previous[0] != e:
            guess = s + (s - previous[1]) * (e_next - e) / (e - previous[0])
        try:
            s_next, period = correct_fixed_energy(guess, e_next, p, settings)
        except CorrectionError:
            step /= 2.0
            logger.debug("continuation step halved to %.3e at e=%.6f", step, e)
            if step < settings.min_step:
                raise ContinuationStall(f"continuation stalled at e={e:.8f} toward e={target_e:.8f}")
            continue
        previous = (e, s)
        s, e = s_next, e_next
        step = min(step * 1.5, settings.continuation_step)

    orbit = _build_orbit(s, period, target_e, p, settings)
    with _CACHE_LOCK:
        _FAMILY_CACHE[(p, settings)][key] = orbit
    logger.info("halo solved: e=%.6f period=%.6f q1=%.6f q3=%.6f", target_e, period, s[0], s[2])
    return orbit


def halo_for_alpha(alpha: float, p: SystemParams = SystemParams(), settings: HaloSettings = HaloSettings()) -> HaloOrbit:
    return solve_halo(energy_from_alpha(alpha), p, settings)


def family_sweep(alphas: Sequence[float], p: SystemParams = SystemParams(), settings: HaloSettings = HaloSettings()) -> List[Tuple[float, HaloOrbit]]:
    """Orbits for a list of alpha values, solved in increasing energy order"""
    ordered = sorted(set(float(a) for a in alphas))
    solved = {a: halo_for_alpha(a, p, settings) for a in ordered}
    return [(float(a), solved[float(a)]) for a in alphas]


def write_family_csv(path, family: Sequence[Tuple[float, HaloOrbit]]):
    rows = [[alpha, h.energy, h.period, h.crossing_state[0], h.crossing_state[2], h.crossing_state[4]] for alpha, h in family]
    np.savetxt(path, np.array(rows, dtype=float).reshape(-1, 6), delimiter=",", header=HALO_CSV_HEADER, comments="", fmt="%.16e")


# ============================================================================
# MONODROMY
# ============================================================================

def _stable_pair(monodromy: np.ndarray) -> Tuple[float, np.ndarray]:
    values, vectors = np.linalg.eig(monodromy)
    candidates = [
        i for i in range(6)
        if abs(values[i].imag) < 1e-8 * max(1.0, abs(values[i])) and abs(values[i]) < 1.0 - 1e-6
    ]
    if not candidates:
        raise EigenstructureError(f"no real multiplier inside the unit circle: {np.round(values, 6)}")
    i = min(candidates, key=lambda j: abs(values[j]))
    vec = np.real(vectors[:, i])
    vec = vec / np.linalg.norm(vec)
    if vec[0] > 0:
        vec = -vec
    return float(values[i].real), vec


def stable_direction(h: HaloOrbit) -> Tuple[float, np.ndarray]:
    """Smallest real multiplier (|lambda| < 1) of the monodromy matrix and its unit eigenvector"""
    return _stable_pair(h.monodromy)


# ============================================================================
# MANIFOLD TERMINAL STATES
# ============================================================================

def _insertion_state(h: HaloOrbit, spec: ManifoldArcSpec, p: SystemParams, tol: float) -> np.ndarray:
    on_orbit, stm = cr3bp.propagate_stm(h.crossing_state, spec.t1, p, tol=tol)
    direction = stm @ h.stable_eigvec
    direction /= np.linalg.norm(direction)
    return on_orbit + spec.eps_mag * spec.branch_sign * direction


def _manifold_coast(h: HaloOrbit, spec: ManifoldArcSpec, p: SystemParams, tol: float, check: bool = True) -> cr3bp.Trajectory:
    if check:
        violations = spec.check_invariants(h.period)
        if violations:
            raise ManifoldSpecError("; ".join(violations))
    start = _insertion_state(h, spec, p, tol)
    return cr3bp.propagate(start, [], spec.t2, p, tol=tol, direction="backward")


def manifold_terminal_state(h: HaloOrbit, spec: ManifoldArcSpec, p: SystemParams = SystemParams(), tol: float = cr3bp.DEFAULT_TOL, check: bool = True) -> np.ndarray:
    """
    Terminal boundary state on the stable manifold for (t1, t2).

    Args:
        check: enforce the admissible (t1, t2) ranges; the solver evaluates
            slightly out-of-box iterates with check=False
    """
    return _manifold_coast(h, spec, p, tol, check).final


def manifold_arc(h: HaloOrbit, spec: ManifoldArcSpec, n_samples: int, p: SystemParams = SystemParams(), tol: float = cr3bp.DEFAULT_TOL) -> np.ndarray:
    """
    Polyline of the backward coast from the insertion point, (n_samples, 6).

    The first row is the perturbed insertion state and the last row equals
    manifold_terminal_state exactly.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    traj = _manifold_coast(h, spec, p, tol)
    if n_samples == 2:
        return np.vstack([traj.initial, traj.final])
    grid = np.linspace(0.0, traj.times[-1], n_samples)
    samples = np.empty((n_samples, 6))
    for j in range(6):
        samples[:, j] = np.interp(-grid, -traj.times, traj.states[:, j])
    samples[0] = traj.initial
    samples[-1] = traj.final
    return samples


def orbit_samples(h: HaloOrbit, p: SystemParams = SystemParams(), n_samples: int = 400) -> np.ndarray:
    """States along one period of the orbit, (k, 6)"""
    traj = cr3bp.propagate(h.crossing_state, [], h.period, p)
    if traj.states.shape[0] >= n_samples:
        return traj.states
    grid = np.linspace(0.0, h.period, n_samples)
    return np.column_stack([np.interp(grid, traj.times, traj.states[:, j]) for j in range(6)])


def distance_to_orbit(state: Sequence[float], h: HaloOrbit, p: SystemParams = SystemParams(), n_samples: int = 2000) -> float:
    """Smallest position distance from state to a densely sampled copy of the orbit"""
    samples = orbit_samples(h, p, n_samples)
    return float(np.min(np.linalg.norm(samples[:, :3] - np.asarray(state)[:3], axis=1)))
