"""Console dashboards over ledgers and datasets"""

import monitor
import run_ledger


def test_dashboard_prints_methods(tmp_path, capsys):
    path = tmp_path / "ledger.jsonl"
    for seed in range(12):
        run_ledger.log_run(path, "uniform", seed, 0.25, "failed", None, 1.0)
    run_ledger.log_run(path, "diffusion", 0, 0.75, "optimal", -0.7, 2.5)
    monitor.show_dashboard(path)
    out = capsys.readouterr().out
    assert "BY METHOD" in out
    assert "diffusion" in out
    assert "Low feasibility" in out
    assert "uniform: no optimal runs" in out


def test_dashboard_empty_ledger(tmp_path, capsys):
    monitor.show_dashboard(tmp_path / "none.jsonl")
    assert "No runs found" in capsys.readouterr().out


def test_dataset_summary():
    records = [
        {"alpha": 0.0, "status": "optimal", "solve_time_s": 1.0},
        {"alpha": 0.0, "status": "feasible", "solve_time_s": 3.0},
        {"alpha": 0.5, "status": "optimal", "solve_time_s": 2.0},
    ]
    summary = monitor.dataset_summary(records)
    assert summary["records"] == 3
    assert summary["per_alpha"] == {0.0: 2, 0.5: 1}
    assert summary["status"] == {"optimal": 2, "feasible": 1}


def test_show_dataset_summary_warns(capsys):
    header = {"name": "toy", "failed_runs": 20, "problem": {"variant": "hybrid-cost"}}
    monitor.show_dataset_summary(header, [{"alpha": 0.1, "status": "optimal", "solve_time_s": 1.0}])
    out = capsys.readouterr().out
    assert "DATASET toy" in out
    assert "Warning" in out


def test_format_ratio():
    assert monitor.format_ratio(None) == "n/a"
    assert "90.0%" in monitor.format_ratio(0.9)
