"""Solve farm, resume, filtering and dataset files (solver stubbed)"""

import json

import numpy as np
import pytest
from scipy import stats

import datagen
import nlp
from datagen import (
    AlphaMode,
    CorruptLineError,
    Dataset,
    DatasetError,
    DatasetRecord,
    GenerationConfig,
    HeaderMismatchError,
)
from nlp import SolveOutcome, SolverConfig, Status
from transcribe import ProblemSpec, Variant

SPEC = ProblemSpec(n_segments=4)


class StubSolver:
    """Returns the initial guess as the solution; fails when the first thrust entry is negative"""

    def __init__(self):
        self.calls = []

    def __call__(self, x0, spec, cfg, p):
        self.calls.append(spec.alpha)
        if x0[spec.thrust_offset] < 0:
            return nlp.failed_outcome(x0, "stub failure", 0.0)
        status = Status.OPTIMAL if x0[spec.thrust_offset + 1] > 0 else Status.FEASIBLE
        return SolveOutcome(status, x0.copy(), float(x0[0]), 1e-8, 1e-9, 3, 0.01, "converged")


def _generate(tmp_path, n_runs=10, **kwargs):
    solver = kwargs.pop("solver", StubSolver())
    gen = GenerationConfig(name="toy", n_runs=n_runs, alpha_grid=(0.0, 0.5, 1.0))
    ds = datagen.generate_dataset(SPEC, gen, SolverConfig(), out_dir=tmp_path, solve_fn=solver,
                                  progress=False, **kwargs)
    return ds, solver


def test_generate_keeps_successful_runs(tmp_path):
    ds, solver = _generate(tmp_path)
    assert len(solver.calls) == 10
    assert len(ds.records) + ds.header["failed_runs"] == 10
    assert ds.check_invariants() == []
    assert [r.rng_seed for r in ds.records] == sorted(r.rng_seed for r in ds.records)
    assert {r.alpha for r in ds.records} <= {0.0, 0.5, 1.0}
    assert all(r.x_solution.shape == (SPEC.dim,) for r in ds.records)


def test_generate_writes_files(tmp_path):
    ds, _ = _generate(tmp_path)
    paths = datagen.dataset_paths(tmp_path, "toy")
    loaded = datagen.read_dataset(paths["dataset"])
    assert loaded.header == ds.header
    assert [r.to_dict() for r in loaded.records] == [r.to_dict() for r in ds.records]
    failures = paths["failures"].read_text().splitlines() if paths["failures"].exists() else []
    assert len(failures) == ds.header["failed_runs"]
    checkpoint = json.loads(paths["checkpoint"].read_text())
    assert len(checkpoint["completed_seeds"]) == 10


def test_resume_matches_uninterrupted_run(tmp_path):
    full, _ = _generate(tmp_path / "full")
    _generate(tmp_path / "resumed", max_new_runs=5)
    resumed, solver = _generate(tmp_path / "resumed")
    assert len(solver.calls) == 5
    assert sorted(r.rng_seed for r in resumed.records) == sorted(r.rng_seed for r in full.records)
    assert resumed.header["failed_runs"] == full.header["failed_runs"]
    np.testing.assert_array_equal(resumed.arrays()[0], full.arrays()[0])


def test_dry_run_writes_nothing(tmp_path):
    ds, solver = _generate(tmp_path, dry_run=True)
    assert ds.records == []
    assert ds.header["dim"] == SPEC.dim
    assert solver.calls == []
    assert list(tmp_path.iterdir()) == []


def test_invalid_generation_config_rejected(tmp_path):
    with pytest.raises(DatasetError):
        datagen.generate_dataset(SPEC, GenerationConfig(keep_fraction=0.0), SolverConfig(), progress=False)


def test_run_plan_is_reproducible():
    cfg = GenerationConfig(n_runs=6, alpha_mode=AlphaMode.UNIFORM, root_seed=3)
    plan = datagen.run_plan(cfg)
    assert plan == datagen.run_plan(cfg)
    assert [seed for _, seed, _ in plan] == [3 * datagen.SEED_STRIDE + i for i in range(6)]
    assert all(0.0 <= alpha <= 1.0 for _, _, alpha in plan)
    grid = datagen.run_plan(GenerationConfig(n_runs=4, alpha_grid=(0.2, 0.8)))
    assert [alpha for _, _, alpha in grid] == [0.2, 0.8, 0.2, 0.8]


def test_sample_uniform():
    lower = np.array([0.0, -1.0, 2.0])
    upper = np.array([1.0, 1.0, 2.0])
    x = datagen.sample_uniform(lower, upper, 42)
    assert np.array_equal(x, datagen.sample_uniform(lower, upper, 42))
    assert np.all(x >= lower) and np.all(x <= upper)
    assert x[2] == 2.0
    with pytest.raises(ValueError):
        datagen.sample_uniform([1.0], [0.0], 1)
    with pytest.raises(ValueError):
        datagen.sample_uniform([0.0], [np.inf], 1)


def test_sample_uniform_statistics():
    draws = np.array([datagen.sample_uniform([0.0], [1.0], seed)[0] for seed in range(10_000)])
    assert draws.mean() == pytest.approx(0.5, abs=0.02)
    assert stats.kstest(draws, "uniform").statistic < 0.02


def _record(alpha, objective, seed, x=None, variant="hybrid-cost", dim=SPEC.dim):
    x = np.zeros(dim) if x is None else x
    return DatasetRecord(alpha, x, objective, "optimal", 1.0, seed, variant)


def _dataset(records, mode=AlphaMode.FIXED_GRID, variant=Variant.HYBRID_COST, dim=SPEC.dim):
    gen = GenerationConfig(alpha_mode=mode)
    header = {"format": datagen.DATASET_FORMAT, "dim": dim, "variant": variant.value,
              "problem": {"variant": variant.value}, "generation": gen.to_dict()}
    return Dataset(header, records)


def test_filter_top_per_alpha():
    records = [_record(0.0, obj, i) for i, obj in enumerate([3.0, 1.0, 2.0, 4.0])]
    records += [_record(1.0, obj, 10 + i) for i, obj in enumerate([-1.0, -2.0])]
    kept = datagen.filter_top(_dataset(records), 0.5)
    assert [r.rng_seed for r in kept.records] == [1, 2, 11]
    assert kept.header["filter"]["per_alpha"] is True


def test_filter_top_pooled_and_ceil():
    records = [_record(a, obj, i) for i, (a, obj) in enumerate([(0.1, 5.0), (0.7, 1.0), (0.3, 3.0)])]
    kept = datagen.filter_top(_dataset(records, mode=AlphaMode.UNIFORM), 0.5)
    assert [r.rng_seed for r in kept.records] == [1, 2]


def test_filter_top_variable_terminal_keeps_heaviest():
    dim = 3 * 4 + 6
    masses = [600.0, 700.0, 650.0]
    records = []
    for i, m in enumerate(masses):
        x = np.zeros(dim)
        x[5] = m
        records.append(_record(0.5, 0.0, i, x, "variable-terminal", dim))
    kept = datagen.filter_top(_dataset(records, variant=Variant.VARIABLE_TERMINAL, dim=dim), 0.34)
    assert [r.rng_seed for r in kept.records] == [1, 2]


def test_filter_top_rejects_empty_and_bad_fraction():
    with pytest.raises(DatasetError):
        datagen.filter_top(_dataset([]), 0.5)
    with pytest.raises(ValueError):
        datagen.filter_top(_dataset([_record(0.0, 1.0, 0)]), 1.5)


def test_read_dataset_corrupt_line(tmp_path):
    path = tmp_path / "ds.jsonl"
    datagen.write_dataset(_dataset([_record(0.0, 1.0, 0), _record(0.5, 2.0, 1)]), path)
    with open(path, "a") as f:
        f.write("{not json\n")
    with pytest.raises(CorruptLineError) as excinfo:
        datagen.read_dataset(path)
    assert excinfo.value.line_number == 4
    assert len(datagen.read_dataset(path, permissive=True).records) == 2


def test_read_dataset_dimension_mismatch(tmp_path):
    path = tmp_path / "ds.jsonl"
    datagen.write_dataset(_dataset([_record(0.0, 1.0, 0, dim=SPEC.dim + 1)]), path)
    with pytest.raises(HeaderMismatchError):
        datagen.read_dataset(path, permissive=True)


def test_read_dataset_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.jsonl"
    path.write_text(json.dumps({"format": "something-else"}) + "\n")
    with pytest.raises(HeaderMismatchError):
        datagen.read_dataset(path)


def test_fingerprint_is_canonical():
    assert datagen.fingerprint({"a": 1, "b": 2}) == datagen.fingerprint({"b": 2, "a": 1})
    assert datagen.fingerprint({"a": 1}) != datagen.fingerprint({"a": 2})


def test_dataset_reconstructs_spec(tmp_path):
    ds, _ = _generate(tmp_path, n_runs=2)
    assert ds.spec() == SPEC
    assert ds.system() == datagen.SystemParams()
