"""Warm-start study bookkeeping and solution-structure diagnostics (solver stubbed)"""

from types import SimpleNamespace

import numpy as np
import pytest

import bench
import ddpm
import nlp
from bench import BenchError, StudyConfig
from datagen import DatasetRecord
from nlp import SolveOutcome, SolverConfig, Status
from transcribe import ProblemSpec, Variant

N = 4
SPEC = ProblemSpec(n_segments=N)
FAKE_HALO = SimpleNamespace(energy=-1.584, period=2.75)


def optimal_stub(x0, spec, cfg, p):
    return SolveOutcome(Status.OPTIMAL, np.asarray(x0).copy(), float(x0[0]), 1e-7, 1e-8, 4, 0.5, "converged")


def failing_stub(x0, spec, cfg, p):
    return nlp.failed_outcome(x0, "stub failure", 0.0)


def _model(dim=SPEC.dim, T_steps=10) -> ddpm.DiffusionModel:
    lower, upper = SPEC.bounds()
    cfg = ddpm.TrainConfig(T_steps=T_steps, hidden=8, layers=2, time_dim=4, cond_dim=4)
    if dim == SPEC.dim:
        normalizer = ddpm.Normalizer.fit(np.vstack([lower, upper]))
    else:
        normalizer = ddpm.Normalizer(np.zeros(dim), np.ones(dim))
    return ddpm.DiffusionModel(ddpm.build_model(dim, cfg), normalizer, ddpm.linear_schedule(T_steps), cfg)


def _record(alpha, x):
    return DatasetRecord(alpha, np.asarray(x, dtype=float), 0.0, "optimal", 1.0, 0, "hybrid-cost")


def _solution(tau=(2.0, 1.0, 0.5), m_f=700.0, u=None):
    u = np.zeros((N, 3)) if u is None else np.asarray(u, dtype=float)
    return np.concatenate([tau, [m_f], u.ravel()])


# ============================================================================
# STUDY
# ============================================================================

def test_study_all_optimal():
    cfg = StudyConfig(alphas=(0.25, 0.75), n_init=3, root_seed=1)
    result = bench.warmstart_study(SPEC, _model(), cfg, solve_fn=optimal_stub, progress=False)
    assert len(result.runs) == 2 * 2 * 3
    for stats in result.stats.values():
        assert stats.feasibility_ratio == 1.0
        assert stats.optimality_ratio == 1.0
        assert stats.check_invariants() == []
        assert stats.to_dict()["n_optimal"] == 6
    diffusion = [r for r in result.runs if r.method == "diffusion"]
    assert all(r.sampling_time_s > 0 for r in diffusion)
    assert all(r.total_time_s == pytest.approx(r.solve_time_s + r.sampling_time_s) for r in diffusion)
    assert all(np.all(r.x0 >= SPEC.bounds()[0]) for r in diffusion)


def test_study_methods_share_seeds_and_alphas():
    cfg = StudyConfig(alphas=(0.25, 0.75), n_init=4)
    result = bench.warmstart_study(SPEC, _model(), cfg, solve_fn=optimal_stub, progress=False)
    cells = {m: [(r.alpha, r.seed) for r in s.runs] for m, s in result.stats.items()}
    assert cells["uniform"] == cells["diffusion"]
    assert len(set(cells["uniform"])) == 8


def test_study_all_failed():
    cfg = StudyConfig(alphas=(0.35,), n_init=3, methods=("uniform",))
    result = bench.warmstart_study(SPEC, None, cfg, solve_fn=failing_stub, progress=False)
    stats = result.stats["uniform"]
    assert stats.feasibility_ratio == 0.0
    assert stats.optimality_ratio == 0.0
    assert stats.time_median_s is None
    assert stats.time_mean_s is None
    assert result.comparison == {}


def test_study_comparison_without_optimal_runs():
    cfg = StudyConfig(alphas=(0.35,), n_init=2)
    result = bench.warmstart_study(SPEC, _model(), cfg, solve_fn=failing_stub, progress=False)
    assert result.comparison["median_time_s"]["p_value"] is None
    assert result.comparison["diffusion_better"] is False


def test_study_rejects_training_alpha_and_missing_model():
    with pytest.raises(BenchError):
        bench.warmstart_study(SPEC, None, StudyConfig(alphas=(0.5,), methods=("uniform",)),
                              solve_fn=optimal_stub, progress=False)
    with pytest.raises(BenchError):
        bench.warmstart_study(SPEC, None, StudyConfig(alphas=(0.25,), n_init=1),
                              solve_fn=optimal_stub, progress=False)


def test_study_rejects_mismatched_model():
    with pytest.raises(BenchError):
        bench.warmstart_study(SPEC, _model(dim=SPEC.dim + 3), StudyConfig(n_init=1),
                              solve_fn=optimal_stub, progress=False)


def test_study_files_and_ledger(tmp_path):
    cfg = StudyConfig(alphas=(0.25,), n_init=2)
    ledger = tmp_path / "ledger.jsonl"
    result = bench.warmstart_study(SPEC, _model(), cfg, solve_fn=optimal_stub, ledger_path=ledger, progress=False)
    bench.write_study(result, tmp_path, {"command": "bench"})
    header, rows = bench.read_csv(tmp_path / "study.csv")
    assert header == {"command": "bench"}
    assert len(rows) == 4
    assert set(rows[0]) == set(bench.STUDY_CSV_FIELDS)
    assert (tmp_path / "study.json").exists()
    assert len(ledger.read_text().splitlines()) == 4


def test_bootstrap_pvalue():
    assert bench.bootstrap_pvalue([1.0] * 20, [0.0] * 20, np.mean, 200, 0, "greater") == 0.0
    assert bench.bootstrap_pvalue([0.0] * 20, [1.0] * 20, np.mean, 200, 0, "greater") == 1.0
    assert bench.bootstrap_pvalue([1.0, 2.0], [5.0, 6.0], np.median, 200, 0, "less") == 0.0
    assert bench.bootstrap_pvalue([], [1.0], np.mean, 10, 0) is None


def test_method_stats_times_over_optimal_runs():
    def run(status, t):
        return bench.StudyRun("uniform", 0.25, 0, status, 1.0, t, 0.0, 0.0, 0.0, 1, "", np.zeros(1), np.zeros(1))

    stats = bench.method_stats("uniform", [run("optimal", 1.0), run("optimal", 3.0), run("feasible", 100.0),
                                           run("failed", 50.0)])
    assert stats.feasibility_ratio == 0.75
    assert stats.optimality_ratio == 0.5
    assert stats.time_median_s == pytest.approx(2.0)
    assert stats.time_mean_s == pytest.approx(2.0)


# ============================================================================
# THROTTLE, CLUSTERS, FUEL
# ============================================================================

def test_throttle_density_full_and_zero():
    full = _solution(u=[[1.0, 0.0, 0.0]] * N)
    zero = _solution()
    density = bench.throttle_density([_record(0.5, full), _record(0.5, zero)], SPEC, n_bins=10)
    assert density.shape == (N, 10)
    np.testing.assert_allclose(density.sum(axis=1), 100.0)
    np.testing.assert_allclose(density[:, -1], 50.0)
    np.testing.assert_allclose(density[:, 0], 50.0)
    summary = bench.throttle_summary([_record(0.5, full), _record(0.5, zero)], SPEC)
    assert summary["mean_throttle"] == pytest.approx(0.5)
    assert summary["extreme_fraction"] == 1.0


def test_throttles_reject_wrong_dimension():
    with pytest.raises(BenchError):
        bench.throttles([np.zeros(SPEC.dim + 1)], SPEC)
    with pytest.raises(BenchError):
        bench.throttles([], SPEC)


def test_cluster_stats():
    groups = {0.5: np.array([[1.0, 2.0], [3.0, 4.0]]), 0.0: np.array([[5.0, 5.0], [5.0, 5.0], [5.0, 5.0]])}
    rows = bench.cluster_stats(groups)
    assert [r.alpha for r in rows] == [0.0, 0.5]
    np.testing.assert_allclose(rows[1].mean, [2.0, 3.0])
    np.testing.assert_allclose(rows[1].covariance, [[2.0, 2.0], [2.0, 2.0]])
    np.testing.assert_allclose(rows[0].covariance, np.zeros((2, 2)))
    with pytest.raises(BenchError):
        bench.cluster_stats({0.1: np.array([[1.0, 2.0]])})


def test_tof_mass_points_and_fuel():
    records = [_record(0.2, _solution((1.0, 1.0, 1.0), 800.0)), _record(0.2, _solution((2.0, 1.0, 1.0), 750.0)),
               _record(0.8, _solution((3.0, 1.0, 1.0), 700.0))]
    groups = bench.tof_mass_points(records, SPEC)
    np.testing.assert_allclose(groups[0.2], [[3.0, 800.0], [4.0, 750.0]])
    hist = bench.fuel_histogram(records, SPEC, bins=4)
    assert sum(hist["counts"]) == 3
    assert hist["edges"][0] == pytest.approx(200.0)
    assert hist["edges"][-1] == pytest.approx(300.0)


# ============================================================================
# ENDPOINTS
# ============================================================================

def test_endpoint_map_needs_terminal_parameters():
    with pytest.raises(BenchError):
        bench.endpoint_map([_record(0.5, _solution())], SPEC)


def test_endpoint_occupancy():
    rows = [bench.EndpointRow(0.5, 0.1, 6.0, 0.8, 0.0, 0.1) for _ in range(10)]
    rows.append(bench.EndpointRow(0.5, 2.0, 10.0, 0.8, 0.0, 0.1))
    assert bench.endpoint_occupancy(rows, (0.0, 2.75), (5.0, 11.0), grid=20) == pytest.approx(2 / 400)
    with pytest.raises(BenchError):
        bench.endpoint_occupancy([], (0.0, 1.0), (5.0, 11.0))


# ============================================================================
# BASIN SCAN
# ============================================================================

def test_basin_count_two_pits():
    M = np.ones((6, 6))
    M[1, 1] = 0.5
    M[4, 4] = 0.6
    assert bench.basin_count(M, 0.01) == 2
    M[2, 2] = np.nan
    assert bench.basin_count(M, 0.01) == 2


def test_basin_count_single_valley():
    M = np.add.outer(np.abs(np.arange(7) - 3.0), np.abs(np.arange(7) - 3.0)) + 1.0
    assert bench.basin_count(M, 0.01) == 1


def test_scan_spec_converts_variable_terminal():
    spec = ProblemSpec(n_segments=N, variant=Variant.VARIABLE_TERMINAL, alpha=0.3)
    node = bench.scan_spec(spec, FAKE_HALO, 0.25, 7.0)
    assert node.variant is Variant.HYBRID_COST
    assert node.alpha == 1.0
    assert node.fixed_t1_fraction == 0.25
    assert node.fixed_t2 == 7.0
    assert node.halo_energy == pytest.approx(FAKE_HALO.energy)


def _scan_stub(x0, spec, cfg, p):
    if spec.fixed_t1_fraction == 0.0:
        return nlp.failed_outcome(x0, "stub failure", 0.0)
    return SolveOutcome(Status.OPTIMAL, x0, float(x0[0]) + spec.fixed_t2, 1e-7, 1e-8, 1, 0.1)


def test_basin_scan_grid_and_failures():
    scan = bench.basin_grid_scan(FAKE_HALO, 2, 3, SPEC, solve_fn=_scan_stub, progress=False)
    assert scan.objective.shape == (2, 3)
    assert np.all(np.isnan(scan.objective[0]))
    assert np.all(np.isfinite(scan.objective[1]))
    np.testing.assert_allclose(scan.t1_values, [0.0, 1.375])
    np.testing.assert_allclose(scan.t2_values, [5.0, 7.0, 9.0])


def test_basin_scan_refinement_reuses_nodes():
    coarse = bench.basin_grid_scan(FAKE_HALO, 2, 2, SPEC, root_seed=4, solve_fn=_scan_stub, progress=False)
    fine = bench.basin_grid_scan(FAKE_HALO, 4, 4, SPEC, root_seed=4, solve_fn=_scan_stub, progress=False)
    np.testing.assert_array_equal(fine.objective[::2, ::2], coarse.objective)


def test_basin_scan_keeps_best_start():
    one = bench.basin_grid_scan(FAKE_HALO, 2, 1, SPEC, n_starts=1, solve_fn=_scan_stub, progress=False)
    many = bench.basin_grid_scan(FAKE_HALO, 2, 1, SPEC, n_starts=5, solve_fn=_scan_stub, progress=False)
    assert many.objective[1, 0] <= one.objective[1, 0]


def test_basin_scan_one_node():
    scan = bench.basin_grid_scan(FAKE_HALO, 1, 1, SPEC, solve_fn=optimal_stub, progress=False)
    assert scan.objective.shape == (1, 1)
    assert np.isfinite(scan.objective[0, 0])
    with pytest.raises(BenchError):
        bench.basin_grid_scan(FAKE_HALO, 0, 1, SPEC, solve_fn=optimal_stub, progress=False)


# ============================================================================
# OUTPUT
# ============================================================================

def test_csv_round_trip(tmp_path):
    path = tmp_path / "sub" / "table.csv"
    bench.write_csv(path, {"config_fingerprint": "abc"}, [{"a": 1, "b": None}, {"a": 2, "b": 3.5}], ["a", "b"])
    header, rows = bench.read_csv(path)
    assert header == {"config_fingerprint": "abc"}
    assert rows == [{"a": "1", "b": ""}, {"a": "2", "b": "3.5"}]


def test_plots_write_svg(tmp_path):
    density = np.full((N, 10), 10.0)
    bench.plot_throttle(density, tmp_path / "throttle.svg")
    scan = bench.BasinScan(np.array([0.0, 0.5]), np.array([5.0, 8.0]), np.array([[1.0, 2.0], [3.0, np.nan]]), 2.75)
    bench.plot_basin(scan, tmp_path / "basin.svg")
    rows = [bench.EndpointRow(0.5, 0.1, 6.0, 0.8, 0.01, 0.1)]
    bench.plot_endpoints(rows, tmp_path / "endpoints.svg", backdrop=[np.zeros((3, 6))])
    for name in ("throttle.svg", "basin.svg", "endpoints.svg"):
        assert (tmp_path / name).read_text().lstrip().startswith("<?xml")
