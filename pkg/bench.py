"""
bench.py - Warm-start studies and solution-structure diagnostics

Online half of amortized global search and the diagnostics around it:

    warmstart_study      uniform vs diffusion initial guesses on held-out alphas
    throttle_density     per-segment histogram of throttle levels
    endpoint_map         (t1, t2) of variable-terminal solutions on the manifold
    basin_grid_scan      fixed-terminal objective over a (t1, t2) grid
    cluster_stats        per-alpha mean/covariance of (time of flight, final mass)
    fuel_histogram       consumed propellant distribution

Every CSV written here starts with a '# {json}' line carrying the effective
configuration and input fingerprints.

Usage:
    result = warmstart_study(spec, model, StudyConfig(alphas=(0.25, 0.75), n_init=100), SolverConfig())
    write_study(result, "out/study", header)
"""

import csv
import functools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage  # noqa: E402
from tqdm import tqdm  # noqa: E402

import cr3bp  # noqa: E402
import datagen  # noqa: E402
import ddpm  # noqa: E402
import halo  # noqa: E402
import nlp  # noqa: E402
import run_ledger  # noqa: E402
import transcribe  # noqa: E402
from cr3bp import SystemParams  # noqa: E402
from nlp import SolverConfig, Status  # noqa: E402
from transcribe import ProblemSpec, Variant  # noqa: E402

logger = logging.getLogger(__name__)
logging.getLogger("matplotlib").setLevel(logging.WARNING)
logging.getLogger("PIL").setLevel(logging.WARNING)

METHODS = ("uniform", "diffusion")
SAMPLING_STREAM = 900_000
STUDY_CSV_FIELDS = [
    "method", "alpha", "seed", "status", "objective", "solve_time_s", "sampling_time_s",
    "total_time_s", "feas_residual", "kkt_residual", "iterations", "reason",
]


class BenchError(Exception):
    """Base class for study and diagnostic failures"""


# ============================================================================
# WARM-START STUDY
# ============================================================================

@dataclass(frozen=True)
class StudyConfig:
    alphas: Tuple[float, ...] = (0.25, 0.75)
    n_init: int = 100
    methods: Tuple[str, ...] = METHODS
    guidance_w: float = 1.3
    root_seed: int = 7
    training_alphas: Tuple[float, ...] = datagen.DEFAULT_ALPHA_GRID
    histogram_bins: int = 20
    bootstrap_samples: int = 2000
    throttle_bins: int = 10
    basin_grid: Tuple[int, int] = (10, 10)
    basin_band: float = 0.01
    basin_starts: int = 1
    endpoint_grid: int = 20

    def check_invariants(self) -> List[str]:
        violations = []
        if not self.alphas:
            violations.append("no study alphas")
        if self.n_init < 1:
            violations.append("n_init must be at least 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            violations.append(f"unknown methods {sorted(unknown)}")
        for a in self.alphas:
            if not 0.0 <= a <= 1.0:
                violations.append(f"alpha={a} outside [0, 1]")
            if any(abs(a - b) < 1e-9 for b in self.training_alphas):
                violations.append(f"study alpha {a} is part of the training grid")
        if not 0.0 < self.basin_band < 1.0:
            violations.append("basin_band must lie in (0, 1)")
        return violations


@dataclass
class StudyRun:
    """One solve of a study; total time includes the amortized sampling time"""
    method: str
    alpha: float
    seed: int
    status: str
    objective: Optional[float]
    solve_time_s: float
    sampling_time_s: float
    feas_residual: Optional[float]
    kkt_residual: Optional[float]
    iterations: int
    reason: str
    x0: np.ndarray
    x_final: np.ndarray

    @property
    def total_time_s(self) -> float:
        return self.solve_time_s + self.sampling_time_s

    @property
    def usable(self) -> bool:
        return self.status in (Status.FEASIBLE.value, Status.OPTIMAL.value)

    def row(self) -> Dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "seed": self.seed,
            "status": self.status,
            "objective": self.objective,
            "solve_time_s": self.solve_time_s,
            "sampling_time_s": self.sampling_time_s,
            "total_time_s": self.total_time_s,
            "feas_residual": self.feas_residual,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "reason": self.reason,
        }


@dataclass
class MethodStats:
    """
    Ratios over all runs; time statistics over optimal runs only and None
    when there is none.
    """
    method: str
    n_runs: int
    feasibility_ratio: float
    optimality_ratio: float
    time_mean_s: Optional[float]
    time_std_s: Optional[float]
    time_q25_s: Optional[float]
    time_median_s: Optional[float]
    sampling_time_s: float
    objective_histogram: Dict = field(default_factory=dict)
    time_histogram: Dict = field(default_factory=dict)
    runs: List[StudyRun] = field(default_factory=list)

    def check_invariants(self) -> List[str]:
        violations = []
        for name in ("feasibility_ratio", "optimality_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                violations.append(f"{name}={v} outside [0, 1]")
        if self.optimality_ratio > self.feasibility_ratio:
            violations.append("more optimal than feasible runs")
        if self.time_q25_s is not None and self.time_q25_s > self.time_median_s:
            violations.append("25% quantile above the median")
        return violations

    def to_dict(self) -> Dict:
        d = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "runs"}
        d["n_optimal"] = sum(1 for r in self.runs if r.status == Status.OPTIMAL.value)
        return d


def _histogram(values: Sequence[float], bins: int) -> Dict:
    if not len(values):
        return {"counts": [], "edges": []}
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    return {"counts": counts.tolist(), "edges": edges.tolist()}


def method_stats(method: str, runs: Sequence[StudyRun], bins: int = 20) -> MethodStats:
    n = len(runs)
    usable = [r for r in runs if r.usable]
    optimal = [r for r in runs if r.status == Status.OPTIMAL.value]
    times = np.array([r.total_time_s for r in optimal])
    sampling = float(np.mean([r.sampling_time_s for r in runs])) if runs else 0.0
    return MethodStats(
        method=method,
        n_runs=n,
        feasibility_ratio=len(usable) / n if n else 0.0,
        optimality_ratio=len(optimal) / n if n else 0.0,
        time_mean_s=float(times.mean()) if times.size else None,
        time_std_s=float(times.std()) if times.size else None,
        time_q25_s=float(np.quantile(times, 0.25)) if times.size else None,
        time_median_s=float(np.median(times)) if times.size else None,
        sampling_time_s=sampling,
        objective_histogram=_histogram([r.objective for r in usable], bins),
        time_histogram=_histogram(times.tolist(), bins),
        runs=list(runs),
    )


def bootstrap_pvalue(a: Sequence[float], b: Sequence[float], statistic: Callable, n_boot: int, seed: int,
                     alternative: str = "greater") -> Optional[float]:
    """
    One-sided bootstrap p-value for statistic(a) > statistic(b) ("greater")
    or statistic(a) < statistic(b) ("less"); None when either side is empty.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        return None
    rng = datagen.generator(seed)
    diffs = np.empty(n_boot)
    for k in range(n_boot):
        diffs[k] = statistic(rng.choice(a, a.size)) - statistic(rng.choice(b, b.size))
    if alternative == "greater":
        return float(np.mean(diffs <= 0.0))
    return float(np.mean(diffs >= 0.0))


def compare_methods(stats: Dict[str, MethodStats], n_boot: int = 2000, seed: int = 0) -> Dict:
    """Diffusion against uniform: ratio and median-time differences with bootstrap p-values"""
    if "diffusion" not in stats or "uniform" not in stats:
        return {}
    diff, unif = stats["diffusion"], stats["uniform"]
    usable = lambda runs: [1.0 if r.usable else 0.0 for r in runs]  # noqa: E731
    optimal_times = lambda runs: [r.total_time_s for r in runs if r.status == Status.OPTIMAL.value]  # noqa: E731
    p_feas = bootstrap_pvalue(usable(diff.runs), usable(unif.runs), np.mean, n_boot, seed, "greater")
    p_time = bootstrap_pvalue(optimal_times(diff.runs), optimal_times(unif.runs), np.median, n_boot, seed + 1, "less")
    return {
        "feasibility_ratio": {"diffusion": diff.feasibility_ratio, "uniform": unif.feasibility_ratio, "p_value": p_feas},
        "optimality_ratio": {"diffusion": diff.optimality_ratio, "uniform": unif.optimality_ratio},
        "median_time_s": {"diffusion": diff.time_median_s, "uniform": unif.time_median_s, "p_value": p_time},
        "diffusion_better": bool(
            p_feas is not None and p_time is not None and p_feas < 0.05 and p_time < 0.05
        ),
    }


@dataclass
class StudyResult:
    config: StudyConfig
    stats: Dict[str, MethodStats]
    comparison: Dict

    @property
    def runs(self) -> List[StudyRun]:
        return [r for s in self.stats.values() for r in s.runs]


def _study_task(task: Tuple, spec_base: ProblemSpec, solver_cfg: SolverConfig, p: SystemParams,
                solve_fn: datagen.SolveFn) -> StudyRun:
    method, alpha, seed, x0, sampling_time = task
    start = time.perf_counter()
    try:
        outcome = solve_fn(x0, spec_base.with_alpha(alpha), solver_cfg, p)
    except (halo.HaloError, transcribe.TranscriptionError, cr3bp.Cr3bpError, nlp.NlpError, ValueError) as e:
        outcome = nlp.failed_outcome(x0, f"{type(e).__name__}: {e}", start)
    j = outcome.to_json()
    return StudyRun(method, alpha, seed, outcome.status.value, j["objective"], outcome.wall_time_s, sampling_time,
                    j["feas_residual"], j["kkt_residual"], outcome.iterations, outcome.reason,
                    np.asarray(x0, dtype=float), np.asarray(outcome.x_final, dtype=float))


def initial_guesses(method: str, spec: ProblemSpec, model: Optional["ddpm.DiffusionModel"], cfg: StudyConfig,
                    alpha_index: int, seeds: Sequence[int], p: SystemParams) -> Tuple[List[np.ndarray], float]:
    """Initial guesses for one (method, alpha) cell and the sampling time per guess"""
    lower, upper = spec.bounds(p)
    if method == "uniform":
        return [datagen.sample_uniform(lower, upper, s) for s in seeds], 0.0
    if model is None:
        raise BenchError("the diffusion method needs a trained model")
    if model.normalizer.low.size != spec.dim:
        raise BenchError(f"model dimension {model.normalizer.low.size} != problem dimension {spec.dim}")
    seed = datagen.run_seed(cfg.root_seed, SAMPLING_STREAM + alpha_index)
    result = ddpm.sample_ddpm(model, spec.alpha, cfg.guidance_w, len(seeds), seed, bounds=(lower, upper))
    if result.n_out_of_box:
        logger.info("alpha %.3f: %d of %d samples clipped into the box", spec.alpha, result.n_out_of_box, len(seeds))
    return list(result.samples), result.seconds_per_sample


def warmstart_study(
    spec: ProblemSpec,
    model: Optional["ddpm.DiffusionModel"],
    cfg: StudyConfig,
    solver_cfg: SolverConfig = SolverConfig(),
    p: SystemParams = SystemParams(),
    workers: int = 1,
    solve_fn: datagen.SolveFn = nlp.solve,
    ledger_path=None,
    progress: bool = True,
) -> StudyResult:
    """
    Solve every (method, alpha, seed) cell; both methods see the same alpha
    sequence, seeds and solver configuration. Per-run failures are data.
    """
    violations = cfg.check_invariants() + spec.check_invariants() + solver_cfg.check_invariants()
    if violations:
        raise BenchError("; ".join(violations))

    tasks = []
    for k, alpha in enumerate(cfg.alphas):
        cell_spec = spec.with_alpha(alpha)
        seeds = [datagen.run_seed(cfg.root_seed, k * cfg.n_init + i) for i in range(cfg.n_init)]
        for method in cfg.methods:
            guesses, sampling_time = initial_guesses(method, cell_spec, model, cfg, k, seeds, p)
            tasks.extend((method, float(alpha), s, x0, sampling_time) for s, x0 in zip(seeds, guesses))

    worker = functools.partial(_study_task, spec_base=spec, solver_cfg=solver_cfg, p=p, solve_fn=solve_fn)
    runs: List[StudyRun] = []
    for run in tqdm(datagen.map_tasks(worker, tasks, workers), total=len(tasks), desc="study", disable=not progress):
        runs.append(run)
        if ledger_path is not None:
            run_ledger.log_run(ledger_path, run.method, run.seed, run.alpha, run.status, run.objective,
                               run.total_time_s, run.reason)

    order = {m: i for i, m in enumerate(cfg.methods)}
    runs.sort(key=lambda r: (order[r.method], r.alpha, r.seed))
    stats = {m: method_stats(m, [r for r in runs if r.method == m], cfg.histogram_bins) for m in cfg.methods}
    comparison = compare_methods(stats, cfg.bootstrap_samples, cfg.root_seed)
    for m, s in stats.items():
        logger.info("%s: feasible %.1f%%, optimal %.1f%%, median time %s", m, 100 * s.feasibility_ratio,
                    100 * s.optimality_ratio, "n/a" if s.time_median_s is None else f"{s.time_median_s:.2f}s")
    return StudyResult(cfg, stats, comparison)


def write_study(result: StudyResult, out_dir, header: Dict):
    """study.json (stats + comparison) and study.csv (one row per run)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(header)
    payload["study"] = asdict(result.config)
    payload["stats"] = {m: s.to_dict() for m, s in result.stats.items()}
    payload["comparison"] = result.comparison
    with open(out_dir / "study.json", "w") as f:
        json.dump(payload, f, indent=2)
    rows = [r.row() for r in result.runs]
    write_csv(out_dir / "study.csv", header, rows, STUDY_CSV_FIELDS)


def export_trajectories(result: StudyResult, spec: ProblemSpec, alpha: float, out_dir, p: SystemParams = SystemParams()) -> List[Path]:
    """
    Initial-guess and converged trajectory CSV of the first usable run of each
    method at alpha. Guesses that cannot be propagated are skipped.
    """
    out_dir = Path(out_dir)
    written = []
    cell_spec = spec.with_alpha(alpha)
    for method, stats in result.stats.items():
        run = next((r for r in stats.runs if abs(r.alpha - alpha) < 1e-12 and r.usable), None)
        if run is None:
            logger.warning("no usable %s run at alpha %.3f to export", method, alpha)
            continue
        for tag, x in (("initial", run.x0), ("converged", run.x_final)):
            path = out_dir / f"trajectory_{method}_{tag}.csv"
            try:
                report = transcribe.evaluate(x, cell_spec, p)
            except (transcribe.TranscriptionError, cr3bp.Cr3bpError) as e:
                logger.warning("cannot propagate %s %s guess: %s", method, tag, e)
                continue
            path.parent.mkdir(parents=True, exist_ok=True)
            transcribe.write_solution_csv(path, report)
            written.append(path)
    return written


# ============================================================================
# SOLUTION STRUCTURE
# ============================================================================

def _solutions(records) -> np.ndarray:
    rows = [r.x_solution if hasattr(r, "x_solution") else np.asarray(r, dtype=float) for r in records]
    if not rows:
        raise BenchError("no records")
    return np.vstack(rows)


def throttles(records, spec: ProblemSpec, p: SystemParams = SystemParams()) -> np.ndarray:
    """(n_records, n_segments) throttle levels |u_i| / T_max"""
    X = _solutions(records)
    if X.shape[1] != spec.dim:
        raise BenchError(f"records of dimension {X.shape[1]} for a problem of dimension {spec.dim}")
    u = X[:, spec.thrust_offset:].reshape(X.shape[0], spec.n_segments, 3)
    return np.linalg.norm(u, axis=2) / p.thrust_max_newtons


def throttle_density(records, spec: ProblemSpec, n_bins: int = 10, p: SystemParams = SystemParams()) -> np.ndarray:
    """(n_segments, n_bins) percentage of records per throttle bin; rows sum to 100"""
    levels = np.clip(throttles(records, spec, p), 0.0, 1.0)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    density = np.empty((spec.n_segments, n_bins))
    for i in range(spec.n_segments):
        counts, _ = np.histogram(levels[:, i], bins=edges)
        density[i] = 100.0 * counts / levels.shape[0]
    return density


def throttle_summary(records, spec: ProblemSpec, p: SystemParams = SystemParams()) -> Dict:
    """Mean throttle and the share of throttles in the bottom or top decile"""
    levels = np.clip(throttles(records, spec, p), 0.0, 1.0)
    return {
        "mean_throttle": float(levels.mean()),
        "extreme_fraction": float(np.mean((levels <= 0.1) | (levels >= 0.9))),
    }


def write_throttle_csv(path, density: np.ndarray, header: Dict):
    n_bins = density.shape[1]
    fields = ["segment"] + [f"bin_{k}" for k in range(n_bins)]
    rows = [dict(zip(fields, [i + 1] + row.tolist())) for i, row in enumerate(density)]
    write_csv(path, header, rows, fields)


@dataclass
class EndpointRow:
    alpha: float
    t1: float
    t2: float
    q1: float
    q2: float
    q3: float


def endpoint_map(records, spec: ProblemSpec, p: SystemParams = SystemParams(), tol: float = cr3bp.DEFAULT_TOL) -> List[EndpointRow]:
    """
    Terminal manifold point of each variable-terminal record.

    Raises:
        BenchError: records of another variant
        halo.HaloError: no halo orbit for a record's alpha
    """
    if not spec.has_terminal_params:
        raise BenchError("endpoint maps need variable-terminal records")
    rows = []
    orbits: Dict[float, halo.HaloOrbit] = {}
    for r in records:
        alpha = float(r.alpha)
        x = r.x_solution
        if alpha not in orbits:
            orbits[alpha] = halo.halo_for_alpha(alpha, p)
        arc = halo.ManifoldArcSpec(t1=float(x[3]), t2=float(x[4]), eps_mag=spec.eps_mag, branch_sign=spec.branch_sign)
        end = halo.manifold_terminal_state(orbits[alpha], arc, p, tol=tol, check=False)
        rows.append(EndpointRow(alpha, arc.t1, arc.t2, float(end[0]), float(end[1]), float(end[2])))
    return rows


def manifold_backdrop(h: halo.HaloOrbit, n_arcs: int = 24, n_samples: int = 100, t2: float = halo.T2_MAX,
                      spec: ProblemSpec = ProblemSpec(), p: SystemParams = SystemParams()) -> List[np.ndarray]:
    """Polylines of stable-manifold arcs spread evenly over the orbit phase"""
    arcs = []
    for k in range(n_arcs):
        arc = halo.ManifoldArcSpec(t1=h.period * k / n_arcs, t2=t2, eps_mag=spec.eps_mag, branch_sign=spec.branch_sign)
        arcs.append(halo.manifold_arc(h, arc, n_samples, p))
    return arcs


def endpoint_occupancy(rows: Sequence[EndpointRow], t1_range: Tuple[float, float], t2_range: Tuple[float, float],
                       grid: int = 20) -> float:
    """Fraction of a grid x grid partition of the (t1, t2) box holding at least one endpoint"""
    if not rows:
        raise BenchError("no endpoints")
    t1 = np.array([r.t1 for r in rows])
    t2 = np.array([r.t2 for r in rows])
    counts, _, _ = np.histogram2d(t1, t2, bins=grid, range=[list(t1_range), list(t2_range)])
    return float(np.count_nonzero(counts)) / grid ** 2


def write_endpoints_csv(path, rows: Sequence[EndpointRow], header: Dict):
    fields = ["alpha", "t1", "t2", "q1", "q2", "q3"]
    write_csv(path, header, [asdict(r) for r in rows], fields)


# ============================================================================
# BASIN SCAN
# ============================================================================

@dataclass
class BasinScan:
    t1_fractions: np.ndarray
    t2_values: np.ndarray
    objective: np.ndarray
    period: float

    @property
    def t1_values(self) -> np.ndarray:
        return self.t1_fractions * self.period


def _node_seed(root_seed: int, f1: float, f2: float, start: int) -> int:
    """Seed determined by the node position so refined grids reuse it at shared nodes"""
    return (root_seed << 40) + (int(round(f1 * 4096)) << 24) + (int(round(f2 * 4096)) << 8) + start


def scan_spec(spec: ProblemSpec, h: halo.HaloOrbit, f1: float, t2: float) -> ProblemSpec:
    """Fixed-terminal problem for one grid node; variable-terminal specs scan the fuel cost"""
    base = spec
    if spec.variant is Variant.VARIABLE_TERMINAL:
        base = replace(spec, variant=Variant.HYBRID_COST, alpha=1.0)
    return replace(base, fixed_t1_fraction=f1, fixed_t2=t2, fixed_e_pert=h.energy - halo.E_L1)


def _scan_task(task: Tuple, spec: ProblemSpec, h: halo.HaloOrbit, solver_cfg: SolverConfig, p: SystemParams,
               solve_fn: datagen.SolveFn) -> Tuple[int, int, float]:
    i, k, f1, t2, seeds = task
    node = scan_spec(spec, h, f1, t2)
    lower, upper = node.bounds(p)
    best = math.nan
    for seed in seeds:
        start = time.perf_counter()
        try:
            outcome = solve_fn(datagen.sample_uniform(lower, upper, seed), node, solver_cfg, p)
        except (halo.HaloError, transcribe.TranscriptionError, cr3bp.Cr3bpError, nlp.NlpError, ValueError) as e:
            outcome = nlp.failed_outcome(lower, str(e), start)
        if outcome.status is not Status.FAILED and not outcome.objective >= best:
            best = float(outcome.objective)
    return i, k, best


def basin_grid_scan(
    h: halo.HaloOrbit,
    n1: int,
    n2: int,
    spec: ProblemSpec,
    solver_cfg: SolverConfig = SolverConfig(),
    p: SystemParams = SystemParams(),
    root_seed: int = 0,
    n_starts: int = 1,
    workers: int = 1,
    solve_fn: datagen.SolveFn = nlp.solve,
    progress: bool = True,
) -> BasinScan:
    """
    Best objective of the fixed-(t1, t2) problem at every node of an n1 x n2
    grid; t1 = period * i / n1 and t2 = t2_min + (t2_max - t2_min) * k / n2.
    Failed nodes hold NaN.
    """
    if n1 < 1 or n2 < 1:
        raise BenchError("grid needs at least one node per axis")
    t2_lo, t2_hi = spec.t2_bounds
    f1 = np.arange(n1) / n1
    t2 = t2_lo + (t2_hi - t2_lo) * np.arange(n2) / n2
    tasks = []
    for i in range(n1):
        for k in range(n2):
            seeds = [_node_seed(root_seed, f1[i], k / n2, s) for s in range(n_starts)]
            tasks.append((i, k, float(f1[i]), float(t2[k]), seeds))

    worker = functools.partial(_scan_task, spec=spec, h=h, solver_cfg=solver_cfg, p=p, solve_fn=solve_fn)
    objective = np.full((n1, n2), np.nan)
    for i, k, best in tqdm(datagen.map_tasks(worker, tasks, workers), total=len(tasks), desc="basin scan", disable=not progress):
        objective[i, k] = best
    return BasinScan(f1, t2, objective, h.period)


def _local_minima(M: np.ndarray) -> List[Tuple[int, int]]:
    minima = []
    n1, n2 = M.shape
    for i in range(n1):
        for k in range(n2):
            v = M[i, k]
            if not np.isfinite(v):
                continue
            neighbours = [M[a, b] for a, b in ((i - 1, k), (i + 1, k), (i, k - 1), (i, k + 1))
                          if 0 <= a < n1 and 0 <= b < n2 and np.isfinite(M[a, b])]
            if all(v <= n for n in neighbours):
                minima.append((i, k))
    return minima


def basin_count(M: np.ndarray, band: float = 0.01) -> int:
    """
    Number of disjoint 4-connected regions lying within band * |v| of their
    local minimum v. Deeper minima claim their region first.
    """
    M = np.asarray(M, dtype=float)
    finite = np.isfinite(M)
    claimed = np.zeros(M.shape, dtype=bool)
    count = 0
    for i, k in sorted(_local_minima(M), key=lambda ik: M[ik]):
        v = M[i, k]
        labels, _ = ndimage.label(finite & (M <= v + band * abs(v)))
        region = labels == labels[i, k]
        if claimed[region].any():
            continue
        claimed |= region
        count += 1
    return count


def write_basin_csv(path, scan: BasinScan, header: Dict):
    fields = ["t1", "t2", "objective"]
    rows = []
    for i, t1 in enumerate(scan.t1_values):
        for k, t2 in enumerate(scan.t2_values):
            v = scan.objective[i, k]
            rows.append({"t1": float(t1), "t2": float(t2), "objective": float(v) if np.isfinite(v) else ""})
    write_csv(path, header, rows, fields)


# ============================================================================
# CLUSTERS AND FUEL
# ============================================================================

def tof_mass_points(records, spec: ProblemSpec) -> Dict[float, np.ndarray]:
    """Records grouped by alpha as (time of flight, final mass) rows"""
    groups: Dict[float, List[Tuple[float, float]]] = {}
    for r in records:
        x = r.x_solution
        groups.setdefault(float(r.alpha), []).append((float(x[0] + x[1] + x[2]), float(x[spec.mass_index])))
    return {a: np.array(v) for a, v in sorted(groups.items())}


@dataclass
class ClusterRow:
    alpha: float
    n: int
    mean: np.ndarray
    covariance: np.ndarray


def cluster_stats(groups: Dict[float, np.ndarray]) -> List[ClusterRow]:
    """Sample mean and covariance of (time of flight, final mass) per alpha"""
    rows = []
    for alpha, pts in sorted(groups.items()):
        pts = np.asarray(pts, dtype=float)
        if pts.shape[0] < 2:
            raise BenchError(f"alpha {alpha}: need at least two records, got {pts.shape[0]}")
        rows.append(ClusterRow(alpha, pts.shape[0], pts.mean(axis=0), np.cov(pts, rowvar=False, ddof=1)))
    return rows


def write_cluster_csv(path, rows: Sequence[ClusterRow], header: Dict):
    fields = ["alpha", "n", "mean_tof", "mean_mf", "cov_tof_tof", "cov_tof_mf", "cov_mf_mf"]
    out = [dict(zip(fields, [r.alpha, r.n, r.mean[0], r.mean[1], r.covariance[0, 0], r.covariance[0, 1], r.covariance[1, 1]]))
           for r in rows]
    write_csv(path, header, out, fields)


def fuel_histogram(records, spec: ProblemSpec, bins: int = 20) -> Dict:
    """Histogram of consumed propellant m_i - m_f in kg"""
    X = _solutions(records)
    return _histogram((spec.initial_mass_kg - X[:, spec.mass_index]).tolist(), bins)


# ============================================================================
# OUTPUT
# ============================================================================

def write_csv(path, header: Dict, rows: Sequence[Dict], fieldnames: Sequence[str]):
    """A "# {json header}" line followed by a CSV table; None cells are left empty"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(header, sort_keys=True, default=str) + "\n")
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})


def read_csv(path) -> Tuple[Dict, List[Dict]]:
    """(header, rows) of a CSV written by this module"""
    with open(path, newline="") as f:
        first = f.readline()
        header = json.loads(first[2:]) if first.startswith("# ") else {}
        return header, list(csv.DictReader(f))


def plot_throttle(density: np.ndarray, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    image = ax.imshow(density.T, origin="lower", aspect="auto", cmap="viridis",
                      extent=[0.5, density.shape[0] + 0.5, 0.0, 1.0])
    ax.set_xlabel("segment")
    ax.set_ylabel("throttle")
    fig.colorbar(image, ax=ax, label="% of solutions")
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_endpoints(rows: Sequence[EndpointRow], path, backdrop: Optional[Sequence[np.ndarray]] = None):
    fig, ax = plt.subplots(figsize=(6, 5))
    for arc in backdrop or []:
        ax.plot(arc[:, 0], arc[:, 1], color="0.8", linewidth=0.5)
    points = ax.scatter([r.q1 for r in rows], [r.q2 for r in rows], c=[r.alpha for r in rows], s=6, cmap="plasma")
    fig.colorbar(points, ax=ax, label="alpha")
    ax.set_xlabel("q1")
    ax.set_ylabel("q2")
    ax.set_aspect("equal", adjustable="datalim")
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_basin(scan: BasinScan, path):
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(scan.objective.T, origin="lower", aspect="auto", cmap="magma",
                      extent=[scan.t1_values[0], scan.t1_values[-1] if scan.t1_values.size > 1 else scan.period,
                              scan.t2_values[0], scan.t2_values[-1] if scan.t2_values.size > 1 else scan.t2_values[0] + 1])
    ax.set_xlabel("t1")
    ax.set_ylabel("t2")
    fig.colorbar(image, ax=ax, label="objective")
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_time_histograms(stats: Dict[str, MethodStats], path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, s in stats.items():
        times = [r.total_time_s for r in s.runs if r.status == Status.OPTIMAL.value]
        if times:
            ax.hist(times, bins=20, alpha=0.5, label=method)
    ax.set_xlabel("solve time [s]")
    ax.set_ylabel("runs")
    ax.legend()
    fig.savefig(path, format="svg")
    plt.close(fig)
