"""
Run Ledger - Track solver runs for feasibility and timing analysis

Appends one JSON object per solve to a JSON Lines file so interrupted farms
lose nothing, and aggregates the ledger into counts and ratios.

Usage:
    python run_ledger.py stats out/ledger.jsonl [days]
"""
import json
import os
from datetime import datetime, timedelta
from pathlib import Path
from statistics import mean, median
from typing import Dict, List, Optional, Union

PathLike = Union[str, Path]


def ensure_log_dir(path: PathLike):
    """Create the ledger directory if it doesn't exist"""
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def log_run(
    path: PathLike,
    method: str,  # "datagen", "uniform", "diffusion", "scan"
    seed: Optional[int],
    alpha: Optional[float],
    status: str,
    objective: Optional[float] = None,
    wall_time_s: Optional[float] = None,
    reason: str = "",
):
    """
    Append one solve to the ledger

    Args:
        path: ledger file (JSON Lines)
        method: origin of the initial guess or the workflow that ran the solve
        seed: rng seed of the run
        alpha: conditional parameter of the problem instance
        status: "failed", "feasible" or "optimal"
        objective: final objective (None for failed runs)
        wall_time_s: solve time including finite differences
        reason: solver termination reason or failure message
    """
    ensure_log_dir(path)
    entry = {
        "timestamp": datetime.now().isoformat(),
        "method": method,
        "seed": seed,
        "alpha": alpha,
        "status": status,
        "objective": objective,
        "wall_time_s": wall_time_s,
        "reason": reason[:200],
    }
    with open(path, "a") as f:
        f.write(json.dumps(entry) + "\n")
        f.flush()
        os.fsync(f.fileno())


def read_ledger(path: PathLike, days: Optional[int] = None) -> List[Dict]:
    """Ledger entries, optionally restricted to the last N days; torn lines are skipped"""
    path = Path(path)
    if not path.exists():
        return []
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError:
                continue
    if days is not None:
        cutoff = datetime.now() - timedelta(days=days)
        entries = [e for e in entries if datetime.fromisoformat(e["timestamp"]) > cutoff]
    return entries


def summarize_entries(entries: List[Dict]) -> Dict:
    """
    Aggregate ledger entries

    Returns dict with:
        - total_runs
        - by_status: run counts per status
        - by_method: per-method counts, ratios and times
        - feasibility_ratio / optimality_ratio over all runs
        - mean_time_s / median_time_s over runs with a recorded time
    """
    stats = {
        "total_runs": len(entries),
        "by_status": {"failed": 0, "feasible": 0, "optimal": 0},
        "by_method": {},
    }
    times = []
    for e in entries:
        stats["by_status"][e["status"]] = stats["by_status"].get(e["status"], 0) + 1
        method = stats["by_method"].setdefault(e["method"], {"runs": 0, "feasible": 0, "optimal": 0, "times": []})
        method["runs"] += 1
        if e["status"] in ("feasible", "optimal"):
            method["feasible"] += 1
        if e["status"] == "optimal":
            method["optimal"] += 1
        if e.get("wall_time_s") is not None:
            method["times"].append(e["wall_time_s"])
            times.append(e["wall_time_s"])

    for data in stats["by_method"].values():
        data["feasibility_ratio"] = data["feasible"] / data["runs"]
        data["optimality_ratio"] = data["optimal"] / data["runs"]
        data["mean_time_s"] = mean(data["times"]) if data["times"] else None
        data["median_time_s"] = median(data["times"]) if data["times"] else None
        del data["times"]

    total = stats["total_runs"]
    ok = stats["by_status"].get("feasible", 0) + stats["by_status"].get("optimal", 0)
    stats["feasibility_ratio"] = ok / total if total else None
    stats["optimality_ratio"] = stats["by_status"].get("optimal", 0) / total if total else None
    stats["mean_time_s"] = mean(times) if times else None
    stats["median_time_s"] = median(times) if times else None
    return stats


def ledger_stats(path: PathLike, days: Optional[int] = None) -> Dict:
    """Statistics over the ledger file; {"error": ...} when it is missing or empty"""
    entries = read_ledger(path, days)
    if not entries:
        return {"error": f"No runs found in {path}"}
    return summarize_entries(entries)


if __name__ == "__main__":
    import sys

    if len(sys.argv) > 2 and sys.argv[1] == "stats":
        days = int(sys.argv[3]) if len(sys.argv) > 3 else None
        stats = ledger_stats(sys.argv[2], days)
        if "error" in stats:
            print(f"❌ {stats['error']}")
            sys.exit(1)

        print(f"\n📊 Solver Run Stats ({'all time' if days is None else f'last {days} days'})")
        print("=" * 60)
        print(f"Total runs: {stats['total_runs']}")
        for status, count in stats["by_status"].items():
            print(f"  {status}: {count}")
        print(f"Feasibility ratio: {stats['feasibility_ratio']:.1%}")
        print(f"Optimality ratio: {stats['optimality_ratio']:.1%}")

        print("\n🧭 By Method:")
        for method, data in stats["by_method"].items():
            print(f"  {method}: {data['runs']} runs, {data['optimality_ratio']:.1%} optimal")
        print("\n" + "=" * 60)
    else:
        print("Usage: python run_ledger.py stats <ledger.jsonl> [days]")
        print("Example: python run_ledger.py stats out/ledger.jsonl 7")
