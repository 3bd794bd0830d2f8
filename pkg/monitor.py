#!/usr/bin/env python3
"""
Run Monitoring Dashboard - View solve-farm and study health

Prints a summary of a run ledger or a dataset: status breakdown, per-method
and per-alpha counts, solve-time statistics and alerts on low feasibility.

Usage:
    python monitor.py out/ledger.jsonl [days]
"""
import sys
from collections import defaultdict
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

import run_ledger

LOW_FEASIBILITY_RATIO = 0.2


def format_ratio(ratio: Optional[float]) -> str:
    """Format a ratio with color coding"""
    if ratio is None:
        return "n/a"
    if ratio >= 0.5:
        return f"\033[32m{ratio:6.1%}\033[0m"
    elif ratio >= LOW_FEASIBILITY_RATIO:
        return f"\033[33m{ratio:6.1%}\033[0m"
    else:
        return f"\033[31m{ratio:6.1%}\033[0m"


def _time_line(times: List[float]) -> str:
    if not times:
        return "no timed runs"
    t = np.asarray(times)
    return (f"mean {t.mean():.2f}s ± {t.std():.2f}s, "
            f"q25 {np.quantile(t, 0.25):.2f}s, median {np.median(t):.2f}s")


def show_dashboard(ledger_path, days: Optional[int] = None):
    """Display the ledger dashboard"""
    entries = run_ledger.read_ledger(ledger_path, days)
    if not entries:
        print(f"❌ No runs found in {ledger_path}")
        return

    stats = run_ledger.summarize_entries(entries)
    by_alpha = defaultdict(lambda: defaultdict(int))
    times_by_method = defaultdict(list)
    for e in entries:
        alpha = "none" if e.get("alpha") is None else f"{e['alpha']:.3f}"
        by_alpha[alpha][e["status"]] += 1
        if e.get("wall_time_s") is not None and e["status"] == "optimal":
            times_by_method[e["method"]].append(e["wall_time_s"])

    print("\n" + "=" * 70)
    print("  🛰  AMORGS RUN MONITORING DASHBOARD  🛰")
    window = "all time" if days is None else f"last {days} days"
    print(f"      {window} • Updated: {datetime.now().strftime('%Y-%m-%d %H:%M')}")
    print("=" * 70)

    print("\n📊 SUMMARY")
    print(f"  Total Runs: {stats['total_runs']:,}")
    for status, count in stats["by_status"].items():
        print(f"  {status.capitalize():<10} {count:>8,}")
    print(f"  Feasibility: {format_ratio(stats['feasibility_ratio'])}   Optimality: {format_ratio(stats['optimality_ratio'])}")

    print("\n🧭 BY METHOD")
    print(f"  {'Method':<12} {'Runs':<8} {'Feasible':<10} {'Optimal':<10} {'Optimal-run time'}")
    print(f"  {'-' * 12} {'-' * 8} {'-' * 10} {'-' * 10} {'-' * 20}")
    for method, data in sorted(stats["by_method"].items()):
        print(f"  {method:<12} {data['runs']:<8,} {format_ratio(data['feasibility_ratio']):<10} "
              f"{format_ratio(data['optimality_ratio']):<10} {_time_line(times_by_method[method])}")

    print("\n🎚  BY ALPHA")
    for alpha, counts in sorted(by_alpha.items()):
        total = sum(counts.values())
        ok = counts.get("feasible", 0) + counts.get("optimal", 0)
        bar = "█" * int(20 * ok / total) if total else ""
        print(f"  {alpha:<8} {total:>6,} runs  {ok:>6,} usable  {bar}")

    show_alerts(stats)
    print("=" * 70 + "\n")


def dataset_summary(records: List[Dict]) -> Dict:
    """Records per alpha, status breakdown and time statistics of a dataset"""
    per_alpha: Dict[float, int] = defaultdict(int)
    status: Dict[str, int] = defaultdict(int)
    times = []
    for r in records:
        per_alpha[round(float(r["alpha"]), 6)] += 1
        status[r["status"]] += 1
        times.append(float(r["solve_time_s"]))
    return {"records": len(records), "per_alpha": dict(per_alpha), "status": dict(status), "times": times}


def show_dataset_summary(header: Dict, records: List[Dict]):
    """Display a dataset overview after generation"""
    summary = dataset_summary(records)
    failed = header.get("failed_runs", 0)
    attempted = summary["records"] + failed

    print("\n" + "=" * 70)
    print(f"  📦  DATASET {header.get('name', '')}  ({header.get('problem', {}).get('variant', '?')})")
    print("=" * 70)
    print(f"  Records: {summary['records']:,}   Failed runs: {failed:,}")
    if attempted:
        print(f"  Usable ratio: {format_ratio(summary['records'] / attempted)}")
    for status, count in sorted(summary["status"].items()):
        print(f"  {status:<10} {count:>8,}")
    print(f"  Solve time: {_time_line(summary['times'])}")
    if len(summary["per_alpha"]) <= 20:
        print("\n🎚  RECORDS PER ALPHA")
        for alpha, count in sorted(summary["per_alpha"].items()):
            print(f"  {alpha:<8} {count:>6,}")
    if attempted and summary["records"] / attempted < LOW_FEASIBILITY_RATIO:
        print(f"\n  ⚠️  Warning: fewer than {LOW_FEASIBILITY_RATIO:.0%} of runs produced usable solutions")
    print("=" * 70 + "\n")


def show_alerts(stats: Dict):
    """Print alerts for a ledger summary"""
    alerts = []
    ratio = stats.get("feasibility_ratio")
    if ratio is not None and ratio < LOW_FEASIBILITY_RATIO:
        alerts.append(f"⚠️  Low feasibility: {ratio:.1%} of runs usable")
    for method, data in stats.get("by_method", {}).items():
        if data["runs"] >= 10 and data["optimal"] == 0:
            alerts.append(f"⚠️  {method}: no optimal runs out of {data['runs']}")
    if alerts:
        print("\n⚠️  ALERTS:")
        for alert in alerts:
            print(f"   {alert}")
        print()


if __name__ == "__main__":
    if len(sys.argv) < 2:
        print("Usage: python monitor.py <ledger.jsonl> [days]")
        sys.exit(1)
    days = int(sys.argv[2]) if len(sys.argv) > 2 else None

    try:
        show_dashboard(Path(sys.argv[1]), days)
    except KeyboardInterrupt:
        print("\n\n👋 Dashboard closed\n")
    except Exception as e:
        print(f"❌ Error: {e}")
        import traceback
        traceback.print_exc()
