"""
nlp.py - Augmented-Lagrangian NLP solver and outcome classification

Solves
    min f(x)  s.t.  c(x) = 0,  g(x) <= 0,  lower <= x <= upper

with a Powell-Hestenes-Rockafellar augmented Lagrangian outer loop and scipy's
bound-constrained L-BFGS-B as the inner minimizer. Variables are scaled to the
unit box where both bounds are finite. Each outcome is classified as failed,
feasible (constraints met) or optimal (constraints met and projected KKT
residual small).

Usage:
    from nlp import SolverConfig, solve
    outcome = solve(x0, spec, SolverConfig(max_wall_time_s=60))
    print(outcome.status, outcome.objective)
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

import cr3bp
import transcribe
from cr3bp import SystemParams
from transcribe import ProblemSpec

logger = logging.getLogger(__name__)

FAILED_EVALUATION_CURVATURE = 1e8


class NlpError(Exception):
    """Base class for solver failures"""


class _WallTimeExceeded(NlpError):
    pass


class Status(Enum):
    FAILED = "failed"
    FEASIBLE = "feasible"
    OPTIMAL = "optimal"


@dataclass(frozen=True)
class SolverConfig:
    max_wall_time_s: float = 60.0
    max_outer_iterations: int = 30
    max_inner_iterations: int = 200
    tol_feas: float = 1e-6
    tol_opt: float = 1e-5
    initial_penalty: float = 10.0
    penalty_growth: float = 10.0
    max_penalty: float = 1e9
    feasibility_decrease: float = 0.25
    memory: int = 10
    integrator_tol: float = transcribe.JACOBIAN_TOL

    def check_invariants(self) -> List[str]:
        violations = []
        if self.max_wall_time_s <= 0:
            violations.append("max_wall_time_s must be positive")
        if self.tol_feas <= 0 or self.tol_opt <= 0:
            violations.append("tolerances must be positive")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            violations.append("iteration caps must be at least 1")
        if self.penalty_growth <= 1 or self.initial_penalty <= 0:
            violations.append("penalty schedule must start positive and grow")
        return violations


@dataclass
class SolveOutcome:
    status: Status
    x_final: np.ndarray
    objective: float
    kkt_residual: float
    feas_residual: float
    iterations: int
    wall_time_s: float
    reason: str = ""
    feas_trace: List[float] = field(default_factory=list)
    penalty_trace: List[float] = field(default_factory=list)

    def check_invariants(self, cfg: SolverConfig) -> List[str]:
        violations = []
        if self.status is Status.OPTIMAL and not (self.feas_residual <= cfg.tol_feas and self.kkt_residual <= cfg.tol_opt):
            violations.append("optimal status without both residuals within tolerance")
        if self.status is Status.FEASIBLE and not self.feas_residual <= cfg.tol_feas:
            violations.append("feasible status with feasibility residual above tolerance")
        if self.wall_time_s < 0:
            violations.append("negative wall time")
        return violations

    def to_json(self, seed: Optional[int] = None, method: Optional[str] = None) -> Dict:
        return {
            "status": self.status.value,
            "x_final": [float(v) for v in self.x_final],
            "objective": _finite_or_none(self.objective),
            "kkt_residual": _finite_or_none(self.kkt_residual),
            "feas_residual": _finite_or_none(self.feas_residual),
            "iterations": self.iterations,
            "wall_time_s": self.wall_time_s,
            "reason": self.reason,
            "seed": seed,
            "method": method,
        }


def _finite_or_none(v: float) -> Optional[float]:
    return float(v) if math.isfinite(v) else None


def classify(outcome: SolveOutcome, cfg: SolverConfig) -> Status:
    """Failed / feasible / optimal by the configured tolerances"""
    feas, kkt = outcome.feas_residual, outcome.kkt_residual
    if not math.isfinite(feas) or not math.isfinite(outcome.objective) or feas > cfg.tol_feas:
        return Status.FAILED
    if math.isfinite(kkt) and kkt <= cfg.tol_opt:
        return Status.OPTIMAL
    return Status.FEASIBLE


# ============================================================================
# PROBLEM INTERFACE
# ============================================================================

@dataclass
class ProblemValues:
    f: float
    c: np.ndarray
    g: np.ndarray
    grad_f: Optional[np.ndarray] = None
    jac_c: Optional[np.ndarray] = None
    jac_g: Optional[np.ndarray] = None


class NlpProblem:
    """Smooth NLP with bounds; subclasses supply values and first derivatives"""

    lower: np.ndarray
    upper: np.ndarray

    def values(self, x: np.ndarray, derivatives: bool) -> ProblemValues:
        raise NotImplementedError


class FunctionProblem(NlpProblem):
    """NLP assembled from plain callables with analytic derivatives"""

    def __init__(
        self,
        f: Callable,
        grad_f: Callable,
        lower: Sequence[float],
        upper: Sequence[float],
        c: Optional[Callable] = None,
        jac_c: Optional[Callable] = None,
        g: Optional[Callable] = None,
        jac_g: Optional[Callable] = None,
    ):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        n = self.lower.size
        self._f, self._grad_f = f, grad_f
        self._c = c or (lambda x: np.zeros(0))
        self._jac_c = jac_c or (lambda x: np.zeros((0, n)))
        self._g = g or (lambda x: np.zeros(0))
        self._jac_g = jac_g or (lambda x: np.zeros((0, n)))

    def values(self, x: np.ndarray, derivatives: bool) -> ProblemValues:
        out = ProblemValues(float(self._f(x)), np.atleast_1d(self._c(x)).astype(float), np.atleast_1d(self._g(x)).astype(float))
        if derivatives:
            out.grad_f = np.asarray(self._grad_f(x), dtype=float)
            out.jac_c = np.atleast_2d(self._jac_c(x)).astype(float)
            out.jac_g = np.atleast_2d(self._jac_g(x)).astype(float)
        return out


class TrajectoryProblem(NlpProblem):
    """
    Transcribed transfer problem.

    Match-point residuals are scaled so the mass entry is a fraction of the
    initial mass; thrust-norm inequalities are divided by T_max^2.
    """

    def __init__(self, spec: ProblemSpec, p: SystemParams = SystemParams(), tol: float = transcribe.JACOBIAN_TOL):
        self.spec = spec
        self.p = p
        self.tol = tol
        self.lower, self.upper = spec.bounds(p)
        self.c_scale = np.ones(7)
        self.c_scale[6] = 1.0 / spec.initial_mass_kg
        self.g_scale = 1.0 / p.thrust_max_newtons ** 2

    def values(self, x: np.ndarray, derivatives: bool) -> ProblemValues:
        report = transcribe.evaluate(x, self.spec, self.p, self.tol)
        out = ProblemValues(
            report.cost,
            report.residuals * self.c_scale,
            transcribe.thrust_constraints(x, self.spec, self.p) * self.g_scale,
        )
        if derivatives:
            grad, jac = transcribe.jacobian(x, self.spec, self.p, self.tol)
            out.grad_f = grad
            out.jac_c = jac * self.c_scale[:, None]
            out.jac_g = transcribe.thrust_constraint_jacobian(x, self.spec) * self.g_scale
        return out


def feasibility_residual(problem: NlpProblem, x: Sequence[float], values: Optional[ProblemValues] = None) -> float:
    """max of |c|, positive part of g and bound violation (problem scaling)"""
    x = np.asarray(x, dtype=float)
    v = values if values is not None else problem.values(x, derivatives=False)
    parts = [0.0]
    if v.c.size:
        parts.append(float(np.max(np.abs(v.c))))
    if v.g.size:
        parts.append(float(np.max(np.maximum(v.g, 0.0))))
    parts.append(float(np.max(np.maximum(problem.lower - x, 0.0), initial=0.0)))
    parts.append(float(np.max(np.maximum(x - problem.upper, 0.0), initial=0.0)))
    return max(parts)


# ============================================================================
# SOLVER
# ============================================================================

class _Scaling:
    """Affine map x = offset + span * z onto the unit box where bounds are finite"""

    def __init__(self, lower: np.ndarray, upper: np.ndarray):
        finite = np.isfinite(lower) & np.isfinite(upper) & (upper > lower)
        self.offset = np.where(finite, lower, 0.0)
        self.span = np.where(finite, upper - lower, 1.0)
        self.z_lower = (lower - self.offset) / self.span
        self.z_upper = (upper - self.offset) / self.span

    def to_x(self, z: np.ndarray) -> np.ndarray:
        return self.offset + self.span * z

    def to_z(self, x: np.ndarray) -> np.ndarray:
        return (x - self.offset) / self.span

    def scipy_bounds(self) -> List[Tuple[Optional[float], Optional[float]]]:
        return [
            (None if not np.isfinite(lo) else float(lo), None if not np.isfinite(hi) else float(hi))
            for lo, hi in zip(self.z_lower, self.z_upper)
        ]

    def project(self, z: np.ndarray) -> np.ndarray:
        return np.clip(z, self.z_lower, self.z_upper)


def _lagrangian_gradient(v: ProblemValues, lam: np.ndarray, nu: np.ndarray) -> np.ndarray:
    grad = v.grad_f.copy()
    if v.c.size:
        grad += v.jac_c.T @ lam
    if v.g.size:
        grad += v.jac_g.T @ nu
    return grad


def kkt_residual(problem: NlpProblem, x: np.ndarray, v: ProblemValues, lam: np.ndarray, nu: np.ndarray) -> float:
    """Projected-gradient residual ||z - P(z - grad_z L)||_inf in scaled variables"""
    scaling = _Scaling(problem.lower, problem.upper)
    z = scaling.to_z(x)
    grad_z = scaling.span * _lagrangian_gradient(v, lam, nu)
    return float(np.max(np.abs(z - scaling.project(z - grad_z)), initial=0.0))


def solve_problem(problem: NlpProblem, x0: Sequence[float], cfg: SolverConfig = SolverConfig()) -> SolveOutcome:
    """
    Augmented-Lagrangian solve from x0 (clipped into the bound box).

    Terminates on optimality, iteration cap or wall-time cap; the penalty grows
    whenever the feasibility residual fails to shrink by cfg.feasibility_decrease.
    """
    start = time.perf_counter()
    scaling = _Scaling(problem.lower, problem.upper)
    x0 = np.clip(np.asarray(x0, dtype=float), problem.lower, problem.upper)
    if not np.all(np.isfinite(x0)):
        return failed_outcome(x0, "non-finite initial guess", start)

    try:
        v0 = problem.values(x0, derivatives=True)
    except (transcribe.TranscriptionError, cr3bp.Cr3bpError) as e:
        return failed_outcome(x0, f"evaluation failed at x0: {e}", start)
    if not _finite_values(v0):
        return failed_outcome(x0, "non-finite cost or residual at x0", start)

    lam = np.zeros(v0.c.size)
    nu = np.zeros(v0.g.size)
    rho = cfg.initial_penalty
    cache: Dict[bytes, ProblemValues] = {x0.tobytes(): v0}
    # ceiling and best are reset at each inner solve
    last_good = {"z": scaling.to_z(x0), "grad": np.zeros_like(x0)}
    ceiling = {"value": -math.inf}
    best = {"x": x0, "value": math.inf}

    def evaluate(x: np.ndarray) -> Optional[ProblemValues]:
        key = x.tobytes()
        if key in cache:
            return cache[key]
        try:
            v = problem.values(x, derivatives=True)
        except (transcribe.TranscriptionError, cr3bp.Cr3bpError) as e:
            logger.debug("evaluation failed during line search: %s", e)
            return None
        if not _finite_values(v):
            return None
        if len(cache) > 8:
            cache.clear()
        cache[key] = v
        return v

    def augmented(z: np.ndarray) -> Tuple[float, np.ndarray]:
        if time.perf_counter() - start > cfg.max_wall_time_s:
            raise _WallTimeExceeded()
        x = scaling.to_x(z)
        v = evaluate(x)
        if v is None:
            return _failure_model(z, last_good["z"], last_good["grad"], ceiling["value"])
        value = v.f
        grad = v.grad_f.copy()
        if v.c.size:
            value += float(lam @ v.c) + 0.5 * rho * float(v.c @ v.c)
            grad += v.jac_c.T @ (lam + rho * v.c)
        if v.g.size:
            shifted = np.maximum(0.0, nu + rho * v.g)
            value += float((shifted @ shifted - nu @ nu) / (2.0 * rho))
            grad += v.jac_g.T @ shifted
        grad_z = scaling.span * grad
        last_good["z"] = z.copy()
        last_good["grad"] = grad_z
        ceiling["value"] = max(ceiling["value"], value)
        if value < best["value"]:
            best["x"], best["value"] = x, value
        return value, grad_z

    z = scaling.project(scaling.to_z(x0))
    feas_trace: List[float] = []
    penalty_trace: List[float] = []
    feas_prev = feasibility_residual(problem, x0, v0)
    reason = "outer iteration cap"
    iterations = 0
    kkt = math.inf

    for iterations in range(1, cfg.max_outer_iterations + 1):
        inner_gtol = max(0.1 * cfg.tol_opt, min(1e-2, 1.0 / rho) * 0.1 ** (iterations - 1))
        best["x"], best["value"] = scaling.to_x(z), math.inf
        ceiling["value"] = -math.inf
        try:
            result = minimize(
                augmented,
                z,
                jac=True,
                method="L-BFGS-B",
                bounds=scaling.scipy_bounds(),
                options={"maxiter": cfg.max_inner_iterations, "maxcor": cfg.memory, "gtol": inner_gtol, "ftol": 1e-15},
            )
            z = scaling.project(result.x)
        except _WallTimeExceeded:
            z = scaling.project(scaling.to_z(best["x"]))
            reason = "wall-time cap"
            logger.debug("wall-time cap hit in outer iteration %d", iterations)

        x = scaling.to_x(z)
        v = evaluate(x)
        if v is None:
            return failed_outcome(x, "evaluation failed at the inner solution", start, iterations, feas_trace, penalty_trace)

        feas = feasibility_residual(problem, x, v)
        lam_est = lam + rho * v.c
        nu_est = np.maximum(0.0, nu + rho * v.g)
        kkt = kkt_residual(problem, x, v, lam_est, nu_est)
        feas_trace.append(feas)
        penalty_trace.append(rho)
        logger.debug("outer %d: f=%.6g feas=%.3e kkt=%.3e rho=%.1e", iterations, v.f, feas, kkt, rho)

        if feas <= cfg.tol_feas and kkt <= cfg.tol_opt:
            reason = "converged"
            break
        if reason == "wall-time cap":
            break
        if feas <= cfg.feasibility_decrease * feas_prev or feas <= cfg.tol_feas:
            lam, nu = lam_est, nu_est
        else:
            rho = min(rho * cfg.penalty_growth, cfg.max_penalty)
        feas_prev = min(feas_prev, feas)

    outcome = SolveOutcome(
        status=Status.FAILED,
        x_final=x,
        objective=v.f,
        kkt_residual=kkt,
        feas_residual=feas,
        iterations=iterations,
        wall_time_s=time.perf_counter() - start,
        reason=reason,
        feas_trace=feas_trace,
        penalty_trace=penalty_trace,
    )
    outcome.status = classify(outcome, cfg)
    return outcome


def _failure_model(z: np.ndarray, z_good: np.ndarray, grad_good: np.ndarray, ceiling: float) -> Tuple[float, np.ndarray]:
    """
    Value and matching gradient at a point where the problem could not be evaluated.

    A steep quadratic anchored at the last successful point, lifted above every
    value seen in the current inner solve, so the line search backtracks.
    """
    d = z - z_good
    slope = float(grad_good @ d)
    value = max(ceiling, 0.0) + abs(slope) + 0.5 * FAILED_EVALUATION_CURVATURE * float(d @ d)
    grad = math.copysign(1.0, slope) * grad_good + FAILED_EVALUATION_CURVATURE * d
    return value, grad


def _finite_values(v: ProblemValues) -> bool:
    return math.isfinite(v.f) and bool(np.all(np.isfinite(v.c))) and bool(np.all(np.isfinite(v.g)))


def failed_outcome(x: np.ndarray, reason: str, start: float, iterations: int = 0,
            feas_trace: Optional[List[float]] = None, penalty_trace: Optional[List[float]] = None) -> SolveOutcome:
    return SolveOutcome(
        status=Status.FAILED,
        x_final=np.asarray(x, dtype=float),
        objective=math.nan,
        kkt_residual=math.inf,
        feas_residual=math.inf,
        iterations=iterations,
        wall_time_s=time.perf_counter() - start,
        reason=reason,
        feas_trace=feas_trace or [],
        penalty_trace=penalty_trace or [],
    )


def solve(x0: Sequence[float], spec: ProblemSpec, cfg: SolverConfig = SolverConfig(), p: SystemParams = SystemParams()) -> SolveOutcome:
    """Solve one transcribed transfer problem from the initial guess x0"""
    return solve_problem(TrajectoryProblem(spec, p, cfg.integrator_tol), x0, cfg)
