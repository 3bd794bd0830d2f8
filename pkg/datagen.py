"""
datagen.py - Solve farm, objective filtering and dataset persistence

Offline half of amortized global search: draw (alpha, x0) pairs, solve each
instance from a uniform initial guess, keep feasible/optimal solutions as
training records and filter them by objective.

Files written for a dataset called <name> in the output directory:

    <name>.jsonl           header line, then one record per line
    <name>.failures.jsonl  failed runs (never trained on)
    <name>.checkpoint      completed seeds, replaced atomically

Usage:
    ds = generate_dataset(ProblemSpec(), GenerationConfig(n_runs=100), SolverConfig(), out_dir="out")
    best = filter_top(ds, 0.8)
"""

import functools
import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

import cr3bp
import halo
import nlp
import run_ledger
import transcribe
from cr3bp import SystemParams
from nlp import SolveOutcome, SolverConfig, Status
from transcribe import ProblemSpec, Variant

logger = logging.getLogger(__name__)

DATASET_FORMAT = "amorgs-dataset"
SEED_STRIDE = 1_000_000
ALPHA_STREAM = 1 << 64


class DatasetError(Exception):
    """Base class for dataset failures"""


class CorruptLineError(DatasetError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class HeaderMismatchError(DatasetError):
    """Record inconsistent with the dataset header (variant or dimension)"""


class AlphaMode(Enum):
    FIXED_GRID = "fixed-grid"
    UNIFORM = "uniform"


DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class GenerationConfig:
    name: str = "dataset"
    n_runs: int = 100
    alpha_mode: AlphaMode = AlphaMode.FIXED_GRID
    alpha_grid: Tuple[float, ...] = DEFAULT_ALPHA_GRID
    root_seed: int = 0
    keep_fraction: float = 0.8

    def check_invariants(self) -> List[str]:
        violations = []
        if self.n_runs < 0:
            violations.append("n_runs must be non-negative")
        if self.alpha_mode is AlphaMode.FIXED_GRID and not self.alpha_grid:
            violations.append("fixed-grid mode needs a non-empty alpha grid")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            violations.append("alpha grid values must lie in [0, 1]")
        if not 0.0 < self.keep_fraction <= 1.0:
            violations.append(f"keep_fraction={self.keep_fraction} outside (0, 1]")
        if self.root_seed < 0:
            violations.append("root_seed must be non-negative")
        return violations

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["alpha_mode"] = self.alpha_mode.value
        d["alpha_grid"] = list(self.alpha_grid)
        return d


@dataclass
class DatasetRecord:
    """One solved instance"""
    alpha: float
    x_solution: np.ndarray
    objective: float
    status: str
    solve_time_s: float
    rng_seed: int
    problem_variant: str

    def to_dict(self) -> Dict:
        return {
            "alpha": self.alpha,
            "x_solution": [float(v) for v in self.x_solution],
            "objective": self.objective,
            "status": self.status,
            "solve_time_s": self.solve_time_s,
            "rng_seed": self.rng_seed,
            "problem_variant": self.problem_variant,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "DatasetRecord":
        return cls(
            alpha=float(d["alpha"]),
            x_solution=np.asarray(d["x_solution"], dtype=float),
            objective=float(d["objective"]),
            status=str(d["status"]),
            solve_time_s=float(d["solve_time_s"]),
            rng_seed=int(d["rng_seed"]),
            problem_variant=str(d["problem_variant"]),
        )

    def check_invariants(self, dim: int, variant: str) -> List[str]:
        violations = []
        if self.status not in (Status.FEASIBLE.value, Status.OPTIMAL.value):
            violations.append(f"stored record with status {self.status}")
        if self.x_solution.shape != (dim,):
            violations.append(f"x dimension {self.x_solution.size} != {dim}")
        if self.problem_variant != variant:
            violations.append(f"variant {self.problem_variant} != {variant}")
        return violations


@dataclass
class Dataset:
    header: Dict
    records: List[DatasetRecord] = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.header["problem"]["variant"]

    @property
    def dim(self) -> int:
        return int(self.header["dim"])

    def spec(self) -> ProblemSpec:
        """ProblemSpec reconstructed from the header alone"""
        return ProblemSpec.from_header(self.header["problem"])

    def system(self) -> SystemParams:
        return SystemParams(**self.header["system"])

    def check_invariants(self) -> List[str]:
        violations = []
        seeds = set()
        for i, r in enumerate(self.records):
            violations.extend(f"record {i}: {v}" for v in r.check_invariants(self.dim, self.variant))
            if r.rng_seed in seeds:
                violations.append(f"record {i}: duplicate seed {r.rng_seed}")
            seeds.add(r.rng_seed)
        return violations

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(solutions (n, dim), alphas (n,))"""
        if not self.records:
            return np.zeros((0, self.dim)), np.zeros(0)
        return np.vstack([r.x_solution for r in self.records]), np.array([r.alpha for r in self.records])


def fingerprint(obj) -> str:
    """SHA-256 of the canonical JSON encoding"""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


def dataset_fingerprint(ds: Dataset) -> str:
    return fingerprint({"header": ds.header, "records": [r.to_dict() for r in ds.records]})


# ============================================================================
# SAMPLING
# ============================================================================

def generator(key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key))


def sample_uniform(lower: Sequence[float], upper: Sequence[float], rng_seed: int) -> np.ndarray:
    """Independent uniform draw per entry from a counter-based generator keyed by rng_seed"""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape:
        raise ValueError(f"bound shapes differ: {lower.shape} vs {upper.shape}")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ValueError("bounds must be finite")
    if np.any(lower > upper):
        raise ValueError(f"lower bound exceeds upper bound at entries {np.nonzero(lower > upper)[0].tolist()}")
    draw = generator(rng_seed).uniform(0.0, 1.0, size=lower.shape)
    return np.where(lower == upper, lower, lower + draw * (upper - lower))


def run_seed(root_seed: int, index: int) -> int:
    return root_seed * SEED_STRIDE + index


def run_alpha(cfg: GenerationConfig, index: int, seed: int) -> float:
    if cfg.alpha_mode is AlphaMode.FIXED_GRID:
        return float(cfg.alpha_grid[index % len(cfg.alpha_grid)])
    return float(generator(seed + ALPHA_STREAM).uniform())


def run_plan(cfg: GenerationConfig) -> List[Tuple[int, int, float]]:
    """(index, seed, alpha) for every run of a generation"""
    plan = []
    for i in range(cfg.n_runs):
        seed = run_seed(cfg.root_seed, i)
        plan.append((i, seed, run_alpha(cfg, i, seed)))
    return plan


# ============================================================================
# SOLVE FARM
# ============================================================================

SolveFn = Callable[[np.ndarray, ProblemSpec, SolverConfig, SystemParams], SolveOutcome]


def solve_task(task: Tuple[int, int, float], spec_base: ProblemSpec, solver_cfg: SolverConfig,
               p: SystemParams, solve_fn: SolveFn = nlp.solve) -> Tuple[int, int, float, SolveOutcome]:
    """One farm task; exceptions become failed outcomes"""
    index, seed, alpha = task
    start = time.perf_counter()
    try:
        spec = spec_base.with_alpha(alpha)
        lower, upper = spec.bounds(p)
        x0 = sample_uniform(lower, upper, seed)
        outcome = solve_fn(x0, spec, solver_cfg, p)
    except (halo.HaloError, transcribe.TranscriptionError, cr3bp.Cr3bpError, nlp.NlpError, ValueError) as e:
        logger.warning("run %d (seed %d, alpha %.3f) failed before solving: %s", index, seed, alpha, e)
        outcome = nlp.failed_outcome(np.zeros(spec_base.dim), f"{type(e).__name__}: {e}", start)
    return index, seed, alpha, outcome


def map_tasks(fn, tasks: List, workers: int) -> Iterable:
    if workers <= 1 or len(tasks) <= 1:
        for task in tasks:
            yield fn(task)
        return
    with mp.get_context("spawn").Pool(workers) as pool:
        for result in pool.imap(fn, tasks):
            yield result


def make_header(spec: ProblemSpec, gen_cfg: GenerationConfig, solver_cfg: SolverConfig, p: SystemParams,
                code_version: str = "", extra: Optional[Dict] = None) -> Dict:
    header = {
        "format": DATASET_FORMAT,
        "name": gen_cfg.name,
        "code_version": code_version,
        "variant": spec.variant.value,
        "dim": spec.dim,
        "problem": spec.to_header(),
        "system": asdict(p),
        "solver": asdict(solver_cfg),
        "generation": gen_cfg.to_dict(),
        "failed_runs": 0,
    }
    if extra:
        header.update(extra)
    return header


def dataset_paths(out_dir, name: str) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "dataset": out_dir / f"{name}.jsonl",
        "failures": out_dir / f"{name}.failures.jsonl",
        "checkpoint": out_dir / f"{name}.checkpoint",
    }


def _write_checkpoint(path: Path, completed: Set[int], failed: int):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump({"completed_seeds": sorted(completed), "failed_runs": failed}, f)
    os.replace(tmp, path)


def _read_checkpoint(path: Path) -> Tuple[Set[int], int]:
    if not path.exists():
        return set(), 0
    with open(path) as f:
        data = json.load(f)
    return set(data.get("completed_seeds", [])), int(data.get("failed_runs", 0))


def _failure_seeds(path: Path) -> Set[int]:
    seeds = set()
    for entry in run_ledger.read_ledger(path):
        if entry.get("seed") is not None:
            seeds.add(int(entry["seed"]))
    return seeds


def generate_dataset(
    spec: ProblemSpec,
    gen_cfg: GenerationConfig,
    solver_cfg: SolverConfig,
    p: SystemParams = SystemParams(),
    workers: int = 1,
    out_dir=None,
    code_version: str = "",
    extra_header: Optional[Dict] = None,
    dry_run: bool = False,
    max_new_runs: Optional[int] = None,
    ledger_path=None,
    solve_fn: SolveFn = nlp.solve,
    progress: bool = True,
) -> Dataset:
    """
    Run the solve farm and collect feasible/optimal solutions.

    With out_dir set, records are appended as runs complete (in seed order)
    and an existing checkpoint is resumed without repeating seeds.

    Args:
        max_new_runs: stop after this many newly solved runs (resumable)
        dry_run: return an empty dataset with a complete header, write nothing
        solve_fn: solver entry point, nlp.solve by default
    """
    violations = gen_cfg.check_invariants() + spec.check_invariants() + solver_cfg.check_invariants()
    if violations:
        raise DatasetError("; ".join(violations))
    header = make_header(spec, gen_cfg, solver_cfg, p, code_version, extra_header)
    if dry_run:
        return Dataset(header, [])

    paths = dataset_paths(out_dir, gen_cfg.name) if out_dir is not None else None
    records: List[DatasetRecord] = []
    completed: Set[int] = set()
    failed = 0
    if paths is not None:
        paths["dataset"].parent.mkdir(parents=True, exist_ok=True)
        completed, failed = _read_checkpoint(paths["checkpoint"])
        if paths["dataset"].exists():
            existing = read_dataset(paths["dataset"], permissive=True)
            records = existing.records
            completed |= {r.rng_seed for r in records}
            if existing.header.get("dim") != header["dim"] or existing.header.get("variant") != header["variant"]:
                raise HeaderMismatchError(f"existing {paths['dataset']} was generated for another problem")
            write_dataset(Dataset(header, records), paths["dataset"])
        else:
            write_dataset(Dataset(header, []), paths["dataset"])
        failure_seeds = _failure_seeds(paths["failures"])
        failed = max(failed, len(failure_seeds))
        completed |= failure_seeds
        if completed:
            logger.info("resuming %s: %d runs already completed", gen_cfg.name, len(completed))

    tasks = [t for t in run_plan(gen_cfg) if t[1] not in completed]
    if max_new_runs is not None:
        tasks = tasks[:max_new_runs]
    worker = functools.partial(solve_task, spec_base=spec, solver_cfg=solver_cfg, p=p, solve_fn=solve_fn)

    for index, seed, alpha, outcome in tqdm(map_tasks(worker, tasks, workers), total=len(tasks),
                                            desc=f"datagen {gen_cfg.name}", disable=not progress):
        if ledger_path is not None:
            run_ledger.log_run(ledger_path, "datagen", seed, alpha, outcome.status.value,
                               outcome.objective if outcome.status is not Status.FAILED else None,
                               outcome.wall_time_s, outcome.reason)
        if outcome.status is Status.FAILED:
            failed += 1
            if paths is not None:
                run_ledger.log_run(paths["failures"], "datagen", seed, alpha, outcome.status.value,
                                   None, outcome.wall_time_s, outcome.reason)
        else:
            record = DatasetRecord(alpha, outcome.x_final, float(outcome.objective), outcome.status.value,
                                   outcome.wall_time_s, seed, spec.variant.value)
            records.append(record)
            if paths is not None:
                with open(paths["dataset"], "a") as f:
                    f.write(json.dumps(record.to_dict()) + "\n")
        completed.add(seed)
        if paths is not None:
            _write_checkpoint(paths["checkpoint"], completed, failed)

    records.sort(key=lambda r: r.rng_seed)
    header["failed_runs"] = failed
    ds = Dataset(header, records)
    if paths is not None:
        write_dataset(ds, paths["dataset"])
    logger.info("dataset %s: %d records, %d failed runs", gen_cfg.name, len(records), failed)
    return ds


# ============================================================================
# FILTERING
# ============================================================================

def final_mass(record: DatasetRecord, ds: Dataset) -> float:
    mass_index = 5 if ds.variant == Variant.VARIABLE_TERMINAL.value else 3
    return float(record.x_solution[mass_index])


def filter_top(ds: Dataset, keep_fraction: float) -> Dataset:
    """
    Keep the best ceil(keep_fraction * n) records.

    Best means lowest objective for the hybrid-cost variant and highest final
    mass for the variable-terminal variant; ties go to the earlier record.
    Groups are alpha buckets in fixed-grid mode, the whole dataset otherwise.
    The surviving records keep their original order.
    """
    if not ds.records:
        raise DatasetError("cannot filter an empty dataset")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction={keep_fraction} outside (0, 1]")

    if ds.variant == Variant.VARIABLE_TERMINAL.value:
        def badness(i: int) -> float:
            return -final_mass(ds.records[i], ds)
    else:
        def badness(i: int) -> float:
            return ds.records[i].objective

    per_alpha = ds.header.get("generation", {}).get("alpha_mode") == AlphaMode.FIXED_GRID.value
    groups: Dict[object, List[int]] = {}
    for i, r in enumerate(ds.records):
        groups.setdefault(round(r.alpha, 9) if per_alpha else None, []).append(i)

    keep: Set[int] = set()
    for indices in groups.values():
        n_keep = math.ceil(keep_fraction * len(indices) - 1e-9)
        ranked = sorted(indices, key=badness)
        keep.update(ranked[:n_keep])

    header = dict(ds.header)
    header["filter"] = {"keep_fraction": keep_fraction, "per_alpha": per_alpha, "source_records": len(ds.records)}
    return Dataset(header, [r for i, r in enumerate(ds.records) if i in keep])


# ============================================================================
# I/O
# ============================================================================

def write_dataset(ds: Dataset, path):
    """Write header line and records, replacing path atomically"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        f.write(json.dumps(ds.header) + "\n")
        for r in ds.records:
            f.write(json.dumps(r.to_dict()) + "\n")
    os.replace(tmp, path)


def read_dataset(path, permissive: bool = False) -> Dataset:
    """
    Read a dataset and validate every record against the header.

    Args:
        permissive: on a corrupt line, keep the records read so far instead of
            raising (dimension or variant mismatches always raise)
    """
    path = Path(path)
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise CorruptLineError(1, "missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorruptLineError(1, f"header is not JSON: {e}") from e
    if header.get("format") != DATASET_FORMAT:
        raise HeaderMismatchError(f"{path} is not a dataset file")

    ds = Dataset(header, [])
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = DatasetRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            if permissive:
                logger.warning("%s: stopping at corrupt line %d (%s)", path, line_number, e)
                break
            raise CorruptLineError(line_number, str(e)) from e
        if record.x_solution.shape != (ds.dim,) or record.problem_variant != ds.variant:
            raise HeaderMismatchError(
                f"line {line_number}: record ({record.problem_variant}, dim {record.x_solution.size}) "
                f"does not match header ({ds.variant}, dim {ds.dim})")
        ds.records.append(record)
    return ds
