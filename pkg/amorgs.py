#!/usr/bin/env python3
"""
AmorGS workbench - command-line entry point

Amortized global search for low-thrust cislunar transfers: halo orbits and
their stable manifolds, a forward-backward shooting transcription, a solve
farm that builds datasets, a conditional diffusion model trained on them and
warm-start studies comparing uniform and learned initial guesses.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Failures print one JSON object {"error": ..., "message": ...} on stderr.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

import bench
import config
import cr3bp
import datagen
import ddpm
import halo
import monitor
import nlp
import transcribe
from cr3bp import SystemParams
from transcribe import ProblemSpec

__version__ = "0.4.1"

logger = logging.getLogger("amorgs")

MODULE_ERRORS = (
    cr3bp.Cr3bpError,
    halo.HaloError,
    transcribe.TranscriptionError,
    nlp.NlpError,
    datagen.DatasetError,
    ddpm.DiffusionError,
    bench.BenchError,
    OSError,
)

MANIFOLD_CSV_FIELDS = ["q1", "q2", "q3", "v1", "v2", "v3"]


# ============================================================================
# HELPERS
# ============================================================================

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(cfg: Dict, command: str, inputs: Optional[Dict[str, str]] = None) -> Dict:
    return config.artifact_header(cfg, __version__, command, inputs)


def _write_manifest(out: Path, command: str, cfg: Dict, files: List[Path], inputs: Optional[Dict[str, str]] = None):
    manifest = _header(cfg, command, inputs)
    manifest["files"] = [str(f) for f in files]
    with open(out / f"{command}.manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def _read_checkpoint_problem(path) -> Tuple[ProblemSpec, SystemParams, Dict]:
    with open(path) as f:
        payload = json.load(f)
    if "problem" not in payload or "system" not in payload:
        raise ddpm.DiffusionError(f"{path} carries no problem description")
    return ProblemSpec.from_header(payload["problem"]), SystemParams(**payload["system"]), payload


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_halo(args, cfg: Dict) -> int:
    p = config.build_system(cfg)
    settings = config.build_halo_settings(cfg)
    alphas = args.alpha if args.alpha else [0.0]
    family = halo.family_sweep(alphas, p, settings)
    out = _out(args)
    path = out / "halo.csv"
    halo.write_family_csv(path, family)
    for alpha, orbit in family:
        print(f"✓ alpha={alpha:.3f}  e={orbit.energy:.6f}  period={orbit.period:.5f}  Az={orbit.amplitude:.5f}")
    _write_manifest(out, "halo", cfg, [path])
    return 0


def cmd_manifold(args, cfg: Dict) -> int:
    p = config.build_system(cfg)
    spec = config.build_problem(cfg)
    orbit = halo.solve_halo(halo.energy_from_alpha(args.alpha), p, config.build_halo_settings(cfg))
    arc = halo.ManifoldArcSpec(t1=args.t1_fraction * orbit.period, t2=args.t2,
                               eps_mag=spec.eps_mag, branch_sign=spec.branch_sign)
    polyline = halo.manifold_arc(orbit, arc, args.samples, p)
    out = _out(args)
    path = out / "manifold.csv"
    rows = [dict(zip(MANIFOLD_CSV_FIELDS, row.tolist())) for row in polyline]
    bench.write_csv(path, _header(cfg, "manifold"), rows, MANIFOLD_CSV_FIELDS)
    end = polyline[-1]
    print(f"✓ terminal state q=({end[0]:.6f}, {end[1]:.6f}, {end[2]:.6f}) after t2={args.t2}")
    _write_manifest(out, "manifold", cfg, [path])
    return 0


def cmd_scan(args, cfg: Dict) -> int:
    p = config.build_system(cfg)
    spec = config.build_problem(cfg)
    study = config.build_study(cfg)
    orbit = halo.solve_halo(spec.halo_energy, p, config.build_halo_settings(cfg))
    n1, n2 = study.basin_grid
    scan = bench.basin_grid_scan(orbit, n1, n2, spec, config.build_solver(cfg), p, study.root_seed,
                                 study.basin_starts, args.workers)
    out = _out(args)
    files = [out / "basin.csv", out / "basin.svg"]
    bench.write_basin_csv(files[0], scan, _header(cfg, "scan"))
    bench.plot_basin(scan, files[1])
    solved = int(np.isfinite(scan.objective).sum())
    print(f"📊 {solved}/{scan.objective.size} nodes solved, {bench.basin_count(scan.objective, study.basin_band)} basins")
    _write_manifest(out, "scan", cfg, files)
    return 0


def cmd_datagen(args, cfg: Dict) -> int:
    p = config.build_system(cfg)
    spec = config.build_problem(cfg)
    gen = config.build_generation(cfg)
    solver = config.build_solver(cfg)
    extra = {"config": cfg, "config_fingerprint": config.config_fingerprint(cfg)}
    if args.dry_run:
        ds = datagen.generate_dataset(spec, gen, solver, p, code_version=__version__, extra_header=extra, dry_run=True)
        print(f"✓ dry run: {gen.n_runs} runs of {ds.header['variant']} (dim {ds.dim}) would be generated")
        return 0

    out = _out(args)
    ledger = out / "ledger.jsonl"
    ds = datagen.generate_dataset(spec, gen, solver, p, args.workers, out, __version__, extra,
                                  max_new_runs=args.max_runs, ledger_path=ledger)
    paths = datagen.dataset_paths(out, gen.name)
    files = [paths["dataset"]]
    if ds.records:
        filtered = datagen.filter_top(ds, gen.keep_fraction)
        filtered_path = out / f"{gen.name}.filtered.jsonl"
        datagen.write_dataset(filtered, filtered_path)
        files.append(filtered_path)
        print(f"✓ kept {len(filtered.records)} of {len(ds.records)} records after filtering")
    else:
        print("⚠️  no feasible solutions; nothing to filter")
    monitor.show_dataset_summary(ds.header, [r.to_dict() for r in ds.records])
    _write_manifest(out, "datagen", cfg, files)
    return 0


def cmd_train(args, cfg: Dict) -> int:
    ds = datagen.read_dataset(args.dataset)
    train_cfg = config.build_train(cfg)
    out = _out(args)
    loss_csv = out / "loss.csv"
    inputs = {"dataset": datagen.dataset_fingerprint(ds)}
    extra = {"problem": ds.header["problem"], "system": ds.header["system"], "header": _header(cfg, "train", inputs)}
    try:
        model = ddpm.train_dataset(ds, train_cfg, loss_csv=loss_csv)
    except ddpm.DivergenceError as e:
        if e.model is not None:
            ddpm.save_checkpoint(e.model, out / "model.diverged.json", extra)
        raise
    path = out / "model.json"
    ddpm.save_checkpoint(model, path, extra)
    print(f"✓ trained on {len(ds.records)} records, final loss {model.history[-1]:.5f}")
    _write_manifest(out, "train", cfg, [path, loss_csv], inputs)
    return 0


def cmd_sample(args, cfg: Dict) -> int:
    spec, p, payload = _read_checkpoint_problem(args.model)
    model = ddpm.from_checkpoint(payload)
    sampling = cfg["sampling"]
    spec = spec.with_alpha(sampling["alpha"])
    result = ddpm.sample_ddpm(model, spec.alpha, sampling["guidance_w"], sampling["n"], sampling["seed"],
                              bounds=spec.bounds(p))
    out = _out(args)
    path = out / "samples.csv"
    fields = ["alpha"] + [f"x{i}" for i in range(spec.dim)]
    rows = [dict(zip(fields, [spec.alpha] + row.tolist())) for row in result.samples]
    inputs = {"model": model.dataset_fingerprint}
    bench.write_csv(path, _header(cfg, "sample", inputs), rows, fields)
    print(f"✓ {sampling['n']} samples at alpha={spec.alpha:.3f}, w={sampling['guidance_w']}: "
          f"{result.n_out_of_box} clipped, {1000 * result.seconds_per_sample:.2f} ms per sample")
    _write_manifest(out, "sample", cfg, [path], inputs)
    return 0


def _dataset_diagnostics(ds: datagen.Dataset, study: bench.StudyConfig, cfg: Dict, out: Path) -> List[Path]:
    spec, p = ds.spec(), ds.system()
    header = _header(cfg, "bench", {"dataset": datagen.dataset_fingerprint(ds)})
    files = [out / "throttle.csv", out / "throttle.svg"]
    density = bench.throttle_density(ds.records, spec, study.throttle_bins, p)
    bench.write_throttle_csv(files[0], density, header)
    bench.plot_throttle(density, files[1])
    diagnostics = {
        "throttle": bench.throttle_summary(ds.records, spec, p),
        "fuel_histogram": bench.fuel_histogram(ds.records, spec),
    }
    try:
        clusters = bench.cluster_stats(bench.tof_mass_points(ds.records, spec))
        files.append(out / "clusters.csv")
        bench.write_cluster_csv(files[-1], clusters, header)
    except bench.BenchError as e:
        logger.warning("cluster statistics skipped: %s", e)
    if spec.has_terminal_params:
        rows = bench.endpoint_map(ds.records, spec, p)
        orbit = halo.halo_for_alpha(ds.records[0].alpha, p)
        files += [out / "endpoints.csv", out / "endpoints.svg"]
        bench.write_endpoints_csv(files[-2], rows, header)
        bench.plot_endpoints(rows, files[-1], bench.manifold_backdrop(orbit, spec=spec, p=p))
        diagnostics["endpoint_occupancy"] = bench.endpoint_occupancy(
            rows, (0.0, orbit.period), spec.t2_bounds, study.endpoint_grid)
    with open(out / "diagnostics.json", "w") as f:
        json.dump({**header, "diagnostics": diagnostics}, f, indent=2)
    files.append(out / "diagnostics.json")
    return files


def cmd_bench(args, cfg: Dict) -> int:
    study = config.build_study(cfg)
    solver = config.build_solver(cfg)
    inputs = {}
    model = None
    if args.model:
        spec, p, payload = _read_checkpoint_problem(args.model)
        model = ddpm.from_checkpoint(payload)
        inputs["model"] = model.dataset_fingerprint
    else:
        spec, p = config.build_problem(cfg), config.build_system(cfg)
        study = replace(study, methods=tuple(m for m in study.methods if m != "diffusion"))
        logger.info("no model given; running the uniform baseline only")

    out = _out(args)
    ledger = out / "ledger.jsonl"
    files = []
    ds = None
    if args.dataset:
        ds = datagen.read_dataset(args.dataset)
        inputs["dataset"] = datagen.dataset_fingerprint(ds)
        study = replace(study, training_alphas=tuple(ds.header["generation"]["alpha_grid"]))

    if study.methods:
        result = bench.warmstart_study(spec, model, study, solver, p, args.workers, ledger_path=ledger)
        bench.write_study(result, out, _header(cfg, "bench", inputs))
        bench.plot_time_histograms(result.stats, out / "times.svg")
        files += [out / "study.json", out / "study.csv", out / "times.svg"]
        files += bench.export_trajectories(result, spec, study.alphas[0], out / "trajectories", p)
        for method, stats in result.stats.items():
            print(f"📊 {method:<10} feasible {stats.feasibility_ratio:6.1%}  optimal {stats.optimality_ratio:6.1%}  "
                  f"median {'n/a' if stats.time_median_s is None else f'{stats.time_median_s:.2f}s'}")
    if ds is not None and ds.records:
        files += _dataset_diagnostics(ds, study, cfg, out)
    if ledger.exists():
        monitor.show_dashboard(ledger)
    _write_manifest(out, "bench", cfg, files, inputs)
    return 0


def cmd_export(args, cfg: Dict) -> int:
    if not args.dataset and not args.spiral:
        raise config.ConfigError("export needs --dataset and/or --spiral")
    out = _out(args)
    files = []
    inputs = {}
    if args.spiral:
        p = config.build_system(cfg)
        traj = transcribe.spiral_trajectory(p, config.build_spiral(cfg))
        files.append(out / "spiral.csv")
        cr3bp.write_trajectory_csv(files[-1], traj)
        print(f"✓ GTO spiral: {traj.times[-1]:.3f} TU, final mass {traj.final[6]:.1f} kg")
    if args.dataset:
        ds = datagen.read_dataset(args.dataset)
        inputs["dataset"] = datagen.dataset_fingerprint(ds)
        if not 0 <= args.record < len(ds.records):
            raise datagen.DatasetError(f"record {args.record} out of range (dataset has {len(ds.records)})")
        record = ds.records[args.record]
        spec = ds.spec().with_alpha(record.alpha)
        report = transcribe.evaluate(record.x_solution, spec, ds.system())
        files.append(out / f"record_{args.record}.csv")
        transcribe.write_solution_csv(files[-1], report)
        print(f"✓ record {args.record}: alpha={record.alpha:.3f}, objective={record.objective:.6f}, "
              f"match residual {np.max(np.abs(report.residuals[:6])):.2e}")
    _write_manifest(out, "export", cfg, files, inputs)
    return 0


COMMANDS = {
    "halo": cmd_halo,
    "manifold": cmd_manifold,
    "scan": cmd_scan,
    "datagen": cmd_datagen,
    "train": cmd_train,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "export": cmd_export,
}


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="JSON config file (subset of the default sections)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value (repeatable, value parsed as JSON)")
    common.add_argument("--seed", type=int, help="Root seed for every random stream")
    common.add_argument("--workers", "-j", type=int, default=1, help="Worker processes (default: 1)")
    common.add_argument("--out", "-o", default="out", help="Output directory (default: out)")
    common.add_argument("--dry-run", action="store_true", help="Validate the configuration and write nothing")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="amorgs",
        description="Amortized global search workbench for cislunar low-thrust transfers",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Corrected halo orbits for a few conditional parameters
  python3 amorgs.py halo --alpha 0.0 --alpha 0.5 --out out/halo

  # Generate a desk-scale dataset with 4 workers
  python3 amorgs.py datagen --set generation.n_runs=1000 --workers 4 --out out/data

  # Train and sample
  python3 amorgs.py train --dataset out/data/dataset.filtered.jsonl --out out/model
  python3 amorgs.py sample --model out/model/model.json --set sampling.alpha=0.35

  # Warm-start study on held-out alphas
  python3 amorgs.py bench --model out/model/model.json --dataset out/data/dataset.filtered.jsonl
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_halo = sub.add_parser("halo", parents=[common], help="Correct halo orbits and write their CSV")
    p_halo.add_argument("--alpha", type=float, action="append", help="Conditional parameter (repeatable, default 0.0)")

    p_manifold = sub.add_parser("manifold", parents=[common], help="Stable-manifold arc of one halo orbit")
    p_manifold.add_argument("--alpha", type=float, default=0.0)
    p_manifold.add_argument("--t1-fraction", type=float, default=0.2, help="Insertion phase as a fraction of the period")
    p_manifold.add_argument("--t2", type=float, default=8.0, help="Backward coast time")
    p_manifold.add_argument("--samples", type=int, default=200)

    sub.add_parser("scan", parents=[common], help="Fixed-terminal basin scan over (t1, t2)")

    p_datagen = sub.add_parser("datagen", parents=[common], help="Solve farm and dataset filtering")
    p_datagen.add_argument("--max-runs", type=int, help="Stop after this many new runs (resume later)")

    p_train = sub.add_parser("train", parents=[common], help="Train the conditional diffusion model")
    p_train.add_argument("--dataset", required=True)

    p_sample = sub.add_parser("sample", parents=[common], help="Sample initial guesses from a trained model")
    p_sample.add_argument("--model", required=True)

    p_bench = sub.add_parser("bench", parents=[common], help="Warm-start study and structure diagnostics")
    p_bench.add_argument("--model", help="Checkpoint; without it only the uniform baseline runs")
    p_bench.add_argument("--dataset", help="Dataset for throttle, endpoint and cluster diagnostics")

    p_export = sub.add_parser("export", parents=[common], help="Trajectory CSV of dataset records or the GTO spiral")
    p_export.add_argument("--dataset")
    p_export.add_argument("--record", type=int, default=0)
    p_export.add_argument("--spiral", action="store_true")
    return parser


def _report(e: Exception):
    print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load_config(args.config, args.set, args.seed)
        if args.workers < 1:
            raise config.ConfigError("--workers must be at least 1")
        if args.dry_run and args.command != "datagen":
            print(f"✓ configuration valid (fingerprint {config.config_fingerprint(cfg)[:12]})")
            return 0
        return COMMANDS[args.command](args, cfg)
    except config.ConfigError as e:
        _report(e)
        return 2
    except MODULE_ERRORS as e:
        logger.debug("command failed", exc_info=True)
        _report(e)
        return 1
    except KeyboardInterrupt:
        print("\n\n👋 Interrupted")
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
