"""Command-line interface: one executable, one subcommand per pipeline step.

Exit codes: 0 success, 1 domain error, 2 usage error.  All randomness is
controlled by explicit seeds; no subcommand writes outside its --out
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import report as report_mod
from .allocate import AllocationConfig, allocation_pipeline
from .anonymize import anonymity_audit, build_groups, read_exchange_json, sample_assignment, write_exchange_json
from .errors import GridAnonError
from .features import ScenarioKind, ScenarioSpec, build_features, distance_matrix, zscore_normalize
from .model import (
    LoadCategory,
    LoadDatabase,
    LoadProfile,
    read_network_json,
    read_profiles_csv,
    write_network_json,
    write_profiles_csv,
)
from .partition import PartitionSpec, ip_partition, quality, read_edge_list, rsgp, sgp_partition
from .powerflow import LoadAssignment, solve_series
from .synth import SynthSpec, planner_view, synth_database, synth_reference

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


def _load_config(path: Path) -> dict:
    raw = path.read_bytes()
    if path.suffix == ".json":
        return json.loads(raw)
    try:
        return tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError:
        return json.loads(raw)


def _scenario_list(names) -> tuple[ScenarioSpec, ...]:
    out = []
    for name in names:
        if name == "all":
            return bench_mod.ALL_SCENARIOS
        out.append(ScenarioSpec(ScenarioKind.parse(name)))
    return tuple(out)


def _dump_json(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_generate(args) -> int:
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        seed=args.seed,
        n_steps=args.steps,
        step_seconds=args.step_seconds,
        multicustomer_total=args.multicustomer,
    )
    networks, grid = synth_reference(spec)
    db = synth_database(grid, seed=args.database_seed)
    write_profiles_csv(outdir / "database.csv", grid, db.entries)
    for name, net in sorted(networks.items()):
        truth = LoadAssignment(grid, dict(net.known_loads))
        ref = solve_series(net, truth, warm_start=False)
        meas = LoadProfile(f"TRAFO_{name}", LoadCategory.NON_RESIDENTIAL, ref.p_trafo_w)
        truth_net = planner_view(net, threshold=1, measurement=meas)  # all loads stay known
        write_network_json(outdir / f"{name}.json", truth_net, f"{name}_profiles.csv")
        planner = planner_view(net, threshold=args.threshold, measurement=meas)
        write_network_json(outdir / f"{name}_planner.json", planner, f"{name}_planner_profiles.csv")
        print(f"{name}: {len(net.known_loads)} loads, {len(net.buses)} buses -> {outdir / (name + '.json')}")
    print(f"database: {len(db.entries)} profiles -> {outdir / 'database.csv'}")
    return 0


def _cmd_partition(args) -> int:
    graph = read_edge_list(args.edges)
    t0 = time.perf_counter()
    if args.method == "rsgp":
        part = rsgp(graph, args.k, time_limit=args.time_limit)
    elif args.method == "sgp":
        part = sgp_partition(graph, args.k)
    elif args.method == "ip":
        part = ip_partition(graph, PartitionSpec(k=args.k, n_clusters=args.n_clusters), time_limit=args.time_limit)
    else:
        raise GridAnonError(f"unknown method {args.method!r}")
    wall = time.perf_counter() - t0
    q = quality(part, graph, args.k, wall_time=wall)
    doc = {
        "method": args.method,
        "k": args.k,
        "clusters": [list(c) for c in part.clusters],
        "sizes": part.sizes(),
        "unbalance": q.unbalance,
        "intra_weight": q.intra_weight,
        "wall_time_s": q.wall_time,
    }
    if part.optimal is not None:
        doc["optimal"] = part.optimal
    _dump_json(doc, Path(args.out) if args.out else None)
    return 0


def _cmd_allocate(args) -> int:
    network = read_network_json(args.network)
    grid, entries = read_profiles_csv(args.database)
    db = LoadDatabase(tuple(entries), grid)
    cfg = AllocationConfig(eps_energy=args.eps_energy, eps_power=args.eps_power)
    s1, s2, profiles = allocation_pipeline(network, db, cfg, tol=args.tol)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    order = sorted(profiles)
    write_profiles_csv(outdir / "allocated_profiles.csv", network.grid, [profiles[b] for b in order])
    report = {
        "stage1": {
            "objective_j2": s1.objective,
            "assignment": s1.assignment,
            "scale": s1.scale,
            "k_used": {c.value: k for c, k in s1.k_used.items()},
        },
        "stage2": None,
    }
    if s2 is not None:
        report["stage2"] = {
            "objective_w2": s2.objective,
            "max_violation": s2.max_violation,
            "converged": s2.converged,
            "sweeps": s2.sweeps,
        }
    _dump_json(report, outdir / "allocation_report.json")
    print(f"allocated {len(s1.assignment)} nodes -> {outdir}")
    return 0


def _cmd_anonymize(args) -> int:
    network = read_network_json(args.network)
    profiles = list(network.known_loads.values())
    scenario = ScenarioSpec(ScenarioKind.parse(args.scenario))
    exchange = build_groups(profiles, network, scenario, args.k, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_exchange_json(out, exchange)
    print(f"{len(exchange.groups)} groups, {len(exchange.fixed)} fixed meters -> {out}")
    if args.audit:
        feats = zscore_normalize(build_features(profiles, network.grid, scenario))
        audit = anonymity_audit(exchange, feats, percentile=args.audit_percentile)
        _dump_json(audit, out.with_suffix(".audit.json"))
        print(f"audit: {len(audit['flagged_group_ids'])} flagged group(s) -> {out.with_suffix('.audit.json')}")
    return 0


def _cmd_loadflow(args) -> int:
    network = read_network_json(args.network)
    if network.grid is None:
        raise GridAnonError("network document references no load series")
    profiles = dict(network.known_loads)
    if args.exchange:
        exchange = read_exchange_json(args.exchange)
        sample = sample_assignment(exchange, args.sample_seed)
        by_meter = {p.meter_id: p for p in profiles.values()}
        missing = [m for m in sample.mapping if m not in by_meter]
        if missing:
            raise GridAnonError(f"exchange references unknown meters: {missing[:5]}")
        profiles = {bus: by_meter[m] for m, bus in sample.mapping.items()}
    assignment = LoadAssignment(network.grid, profiles, args.pf)
    result = solve_series(network, assignment, warm_start=not args.cold_start)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_matrix_csv(outdir / "v_pu.csv", network.grid, result.bus_ids, result.v_pu)
    _write_matrix_csv(outdir / "i_a.csv", network.grid, [f"{a}-{b}" for a, b in result.line_keys], result.i_a)
    _write_matrix_csv(outdir / "p_trafo_w.csv", network.grid, ["p_trafo_w"], result.p_trafo_w[None, :])
    n_bad = int((~result.converged).sum())
    print(
        f"solved {result.n_steps} steps ({n_bad} non-converged), "
        f"min V {result.v_pu.min():.5f} pu, peak trafo {result.p_trafo_w.max():.1f} W -> {outdir}"
    )
    return 0


def _write_matrix_csv(path: Path, grid, col_names, matrix: np.ndarray) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + list(col_names))
        for t in range(matrix.shape[1]):
            stamp = str(np.datetime64(grid.timestamps[t], "s")) + "Z"
            w.writerow([stamp] + [repr(float(v)) for v in matrix[:, t]])


def _cmd_bench(args) -> int:
    cfg = _load_config(Path(args.config)) if args.config else {}
    study = cfg.get("study", {})

    def pick(flag, key, default):
        return flag if flag is not None else study.get(key, default)

    scenario_names = args.scenario or study.get("scenarios", ["all"])
    settings = bench_mod.StudySettings(
        scenarios=_scenario_list(scenario_names),
        n_iter=int(pick(args.n_iter, "n_iter", 200)),
        base_seed=int(pick(args.seed, "base_seed", 42)),
        k=int(pick(None, "k", 3)),
        threshold=int(pick(None, "threshold", 3)),
        alloc=AllocationConfig(
            eps_energy=float(pick(None, "eps_energy", 0.05)),
            eps_power=float(pick(None, "eps_power", 0.01)),
        ),
        pf=float(pick(None, "pf", 1.0)),
        stage2_tol=float(pick(None, "stage2_tol", 1e-6)),
        paper_literal=bool(args.paper_literal or study.get("paper_literal", False)),
        method=str(pick(args.method, "method", "both")),
        jobs=int(args.jobs if args.jobs is not None else study.get("jobs", os.cpu_count() or 1)),
    )

    data = cfg.get("data")
    if data:
        base = Path(args.config).parent
        networks = {}
        for net_path in data["networks"]:
            net = read_network_json(base / net_path)
            networks[Path(net_path).stem] = net
        db = None
        if settings.method in ("allocation", "both"):
            grid, entries = read_profiles_csv(base / data["database"])
            db = LoadDatabase(tuple(entries), grid)
        report = bench_mod.run_study(networks, db, settings)
    else:
        synth_cfg = cfg.get("synthetic", {})
        synth_spec = SynthSpec(
            seed=int(synth_cfg.get("seed", 1)),
            n_steps=int(synth_cfg.get("n_steps", 672)),
            step_seconds=float(synth_cfg.get("step_seconds", 900.0)),
            multicustomer_total=int(synth_cfg.get("multicustomer_total", 39)),
        )
        report = bench_mod.run_reference_study(synth_spec, settings, db_seed=int(synth_cfg.get("database_seed", 7)))

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _dump_json(report, outdir / "study_report.json")
    bench_mod.write_study_csvs(report, outdir)
    if args.svg:
        report_mod.write_study_svgs(report, outdir)
    if args.format == "json":
        sys.stdout.write(json.dumps({"report": str(outdir / "study_report.json")}) + "\n")
    else:
        sys.stdout.write(report_mod.render_text(report))
    return 0


def _cmd_report(args) -> int:
    report = json.loads(Path(args.study).read_text())
    sys.stdout.write(report_mod.render_text(report))
    if args.svg:
        paths = report_mod.write_study_svgs(report, args.svg)
        print(f"wrote {len(paths)} SVG file(s) to {args.svg}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridanon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic reference dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--steps", type=int, default=672)
    p.add_argument("--step-seconds", type=float, default=900.0, dest="step_seconds")
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--multicustomer", type=int, default=39)
    p.add_argument("--database-seed", type=int, default=7, dest="database_seed")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("partition", help="partition an edge-list graph")
    p.add_argument("--edges", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--method", choices=("rsgp", "sgp", "ip"), default="rsgp")
    p.add_argument("--n-clusters", type=int, default=None, dest="n_clusters")
    p.add_argument("--time-limit", type=float, default=None, dest="time_limit")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("allocate", help="two-stage profile allocation")
    p.add_argument("--network", required=True)
    p.add_argument("--database", required=True)
    p.add_argument("--eps-energy", type=float, default=0.05, dest="eps_energy")
    p.add_argument("--eps-power", type=float, default=0.01, dest="eps_power")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_allocate)

    p = sub.add_parser("anonymize", help="group meters and write the exchange file")
    p.add_argument("--network", required=True)
    p.add_argument("--scenario", default="energy_maxp")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--audit", action="store_true")
    p.add_argument("--audit-percentile", type=float, default=95.0, dest="audit_percentile")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_anonymize)

    p = sub.add_parser("loadflow", help="radial load flow over a series")
    p.add_argument("--network", required=True)
    p.add_argument("--exchange", default=None, help="sample a load-bus assignment from this exchange file")
    p.add_argument("--sample-seed", type=int, default=0, dest="sample_seed")
    p.add_argument("--pf", type=float, default=1.0)
    p.add_argument("--cold-start", action="store_true", dest="cold_start")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_loadflow)

    p = sub.add_parser("bench", help="run the benchmark study")
    p.add_argument("--config", default=None, help="TOML (or JSON) study configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-iter", type=int, default=None, dest="n_iter")
    p.add_argument("--scenario", action="append", default=None)
    p.add_argument("--method", choices=("allocation", "permutation", "both"), default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--paper-literal", action="store_true", dest="paper_literal")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="render a study report")
    p.add_argument("--study", required=True)
    p.add_argument("--svg", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GridAnonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
