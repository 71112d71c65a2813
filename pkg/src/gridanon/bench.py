"""Accuracy KPIs and the benchmark harness comparing both methods.

The four indicators compare a load-flow result against the ground-truth
reference: voltage-magnitude mean squared error, maximum transformer
loading error, maximum line loading error, and minimum voltage error.
Timesteps where either run failed to converge are dropped pairwise.

run_study evaluates the allocation method once per network and the
permutation method over a Monte Carlo of seeded load-bus assignments for
every grouping scenario, tracking KPI distributions and the cumulative
voltage-MSE convergence curve.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .allocate import AllocationConfig, allocation_pipeline
from .anonymize import build_groups, monte_carlo
from .errors import DataFormatError
from .features import ScenarioKind, ScenarioSpec
from .model import LoadCategory, LoadDatabase, LoadProfile, Network
from .powerflow import LoadAssignment, PowerFlowResult, solve_series
from .synth import SynthSpec, planner_view, synth_database, synth_reference

ALL_SCENARIOS = tuple(ScenarioSpec(kind) for kind in ScenarioKind)


@dataclass(frozen=True)
class KpiReport:
    mse_vm: float  # pu^2
    e_max_trl: float  # fraction
    e_max_lnl: float  # fraction
    e_min_vm: float  # fraction
    dropped_steps: int = 0
    per_network: dict[str, "KpiReport"] | None = None

    def as_dict(self) -> dict:
        out = {
            "mse_vm": self.mse_vm,
            "e_max_trl": self.e_max_trl,
            "e_max_lnl": self.e_max_lnl,
            "e_min_vm": self.e_min_vm,
            "dropped_steps": self.dropped_steps,
        }
        if self.per_network is not None:
            out["per_network"] = {k: v.as_dict() for k, v in self.per_network.items()}
        return out


def _joint_cols(test: PowerFlowResult, ref: PowerFlowResult) -> np.ndarray:
    if test.v_pu.shape != ref.v_pu.shape:
        raise DataFormatError("test and reference results have different shapes")
    return test.converged & ref.converged


def kpi_mse_vm(test: PowerFlowResult, ref: PowerFlowResult, paper_literal: bool = False) -> float:
    """Mean squared voltage-magnitude error over all buses and timesteps.

    paper_literal=True divides the sum by the bus count only instead of by
    buses times timesteps.
    """
    cols = _joint_cols(test, ref)
    if not cols.any():
        raise DataFormatError("no jointly converged timesteps")
    d = test.v_pu[:, cols] - ref.v_pu[:, cols]
    if paper_literal:
        return float((d * d).sum() / d.shape[0])
    return float((d * d).mean())


def kpi_max_trl(test: PowerFlowResult, ref: PowerFlowResult) -> float:
    """Relative error of the transformer power peak."""
    cols = _joint_cols(test, ref)
    ref_max = float(ref.p_trafo_w[cols].max(initial=0.0))
    if ref_max == 0.0:
        raise DataFormatError("zero reference transformer maximum")
    return (float(test.p_trafo_w[cols].max(initial=0.0)) - ref_max) / ref_max


def kpi_max_lnl(test: PowerFlowResult, ref: PowerFlowResult) -> float:
    """Relative error of the highest line current anywhere in the network."""
    cols = _joint_cols(test, ref)
    if ref.i_a.size == 0:
        raise DataFormatError("network has no lines")
    ref_max = float(ref.i_a[:, cols].max(initial=0.0))
    if ref_max == 0.0:
        raise DataFormatError("zero reference line-current maximum")
    return (float(test.i_a[:, cols].max(initial=0.0)) - ref_max) / ref_max


def kpi_min_vm(test: PowerFlowResult, ref: PowerFlowResult, relative: bool = True) -> float:
    """Error of the lowest voltage magnitude; relative by default, absolute
    (pu difference) otherwise."""
    cols = _joint_cols(test, ref)
    t_min = float(test.v_pu[:, cols].min())
    r_min = float(ref.v_pu[:, cols].min())
    if relative:
        return (t_min - r_min) / r_min
    return t_min - r_min


def compute_kpis(test: PowerFlowResult, ref: PowerFlowResult, paper_literal: bool = False) -> KpiReport:
    cols = _joint_cols(test, ref)
    return KpiReport(
        mse_vm=kpi_mse_vm(test, ref, paper_literal),
        e_max_trl=kpi_max_trl(test, ref),
        e_max_lnl=kpi_max_lnl(test, ref),
        e_min_vm=kpi_min_vm(test, ref),
        dropped_steps=int((~cols).sum()),
    )


def cumulative_mean(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.cumsum(values) / np.arange(1, values.size + 1)


def convergence_slope(values: np.ndarray, n_min: int = 10) -> float:
    """Slope of log(estimator variance) vs log(n) for the running mean.

    The running-mean variance proxy s^2_n / n should fall like 1/n, i.e. a
    slope near -1, once the Monte Carlo has settled.
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n <= max(n_min, 2):
        return float("nan")
    s1 = np.cumsum(x)
    s2 = np.cumsum(x * x)
    ns = np.arange(n_min, n + 1)
    var = (s2[ns - 1] - s1[ns - 1] ** 2 / ns) / (ns - 1)
    se2 = np.maximum(var, 0.0) / ns
    good = se2 > 0
    if good.sum() < 2:
        return float("nan")
    coef = np.polyfit(np.log(ns[good]), np.log(se2[good]), 1)
    return float(coef[0])


# ---------------------------------------------------------------------------
# Study harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudySettings:
    scenarios: tuple[ScenarioSpec, ...] = ALL_SCENARIOS
    n_iter: int = 200
    base_seed: int = 42
    k: int = 3
    threshold: int = 3
    alloc: AllocationConfig = field(default_factory=AllocationConfig)
    pf: float = 1.0
    s_base: float = 1e6
    stage2_tol: float = 1e-6
    paper_literal: bool = False
    method: str = "both"  # allocation | permutation | both
    jobs: int = 1

    def __post_init__(self):
        if self.n_iter < 1:
            raise DataFormatError("n_iter must be >= 1")
        if self.method not in ("allocation", "permutation", "both"):
            raise DataFormatError(f"unknown method {self.method!r}")


def _network_seed(base_seed: int, net_index: int) -> int:
    # distinct seed stream per network; iterations add 0..n_iter-1 on top
    return base_seed + 1_000_003 * net_index


def _alloc_task(args):
    name, net, measurement, db, settings = args
    planner = planner_view(net, settings.threshold, measurement)
    s1, s2, profiles = allocation_pipeline(planner, db, settings.alloc, tol=settings.stage2_tol)
    assignment = LoadAssignment(net.grid, profiles, settings.pf)
    result = solve_series(net, assignment, s_base=settings.s_base, warm_start=False)
    stage2 = None
    if s2 is not None:
        dev = np.abs(1.0 - s2.p_var_trafo / np.maximum(measurement.power_w, 1e-12))
        stage2 = {
            "objective_w2": s2.objective,
            "max_violation": s2.max_violation,
            "converged": s2.converged,
            "sweeps": s2.sweeps,
            "max_rel_trafo_dev": float(dev.max()),
            "n_nodes": len(s2.nodes),
        }
    return name, result, {"stage1_objective_j2": s1.objective, "stage2": stage2}


def _mc_task(args):
    name, net, scenario, settings, net_index = args
    profiles = list(net.known_loads.values())
    exchange = build_groups(profiles, net, scenario, settings.k, settings.threshold)
    runs = monte_carlo(
        exchange,
        net,
        profiles,
        settings.n_iter,
        _network_seed(settings.base_seed, net_index),
        pf=settings.pf,
        s_base=settings.s_base,
    )
    return name, scenario.kind.value, [r for _, r in runs]


def run_study(networks: dict[str, Network], db: LoadDatabase | None, settings: StudySettings) -> dict:
    """Full benchmark over the given ground-truth networks.

    Returns a JSON-ready report with per-network and pooled KPIs, the
    permutation method's per-iteration KPI distributions, and the pooled
    cumulative voltage-MSE convergence curve per scenario.
    """
    names = sorted(networks)
    refs: dict[str, PowerFlowResult] = {}
    meas: dict[str, LoadProfile] = {}
    report_nets = {}
    for name in names:
        net = networks[name]
        truth = LoadAssignment(net.grid, dict(net.known_loads), settings.pf)
        ref = solve_series(net, truth, s_base=settings.s_base, warm_start=False)
        refs[name] = ref
        meas[name] = LoadProfile(
            meter_id=f"TRAFO_{name}",
            category=LoadCategory.NON_RESIDENTIAL,
            power_w=ref.p_trafo_w,
        )
        n_fixed = sum(1 for p in net.known_loads.values() if p.customer_count >= settings.threshold)
        report_nets[name] = {
            "n_buses": len(net.buses),
            "n_lines": len(net.lines),
            "n_loads": len(net.known_loads),
            "n_fixed": n_fixed,
            "ref_v_min_pu": float(ref.v_pu.min()),
            "ref_trafo_max_w": float(ref.p_trafo_w.max()),
            "ref_converged_steps": int(ref.converged.sum()),
        }

    report: dict = {"settings": _settings_dict(settings), "networks": report_nets}

    alloc_tasks = []
    mc_tasks = []
    if settings.method in ("allocation", "both"):
        if db is None:
            raise DataFormatError("allocation method requires a load database")
        alloc_tasks = [(name, networks[name], meas[name], db, settings) for name in names]
    if settings.method in ("permutation", "both"):
        mc_tasks = [
            (name, networks[name], scenario, settings, i)
            for scenario in settings.scenarios
            for i, name in enumerate(names)
        ]

    if settings.jobs > 1 and (len(alloc_tasks) + len(mc_tasks)) > 1:
        with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
            alloc_out = list(pool.map(_alloc_task, alloc_tasks))
            mc_out = list(pool.map(_mc_task, mc_tasks))
    else:
        alloc_out = [_alloc_task(t) for t in alloc_tasks]
        mc_out = [_mc_task(t) for t in mc_tasks]

    if alloc_tasks:
        per_net = {}
        kpi_list = {}
        for name, result, info in alloc_out:
            kpis = compute_kpis(result, refs[name], settings.paper_literal)
            per_net[name] = {"kpis": kpis.as_dict(), **info}
            kpi_list[name] = kpis
        report["allocation"] = {"per_network": per_net, "pooled_kpis": _pool_kpis(kpi_list, refs).as_dict()}

    if mc_tasks:
        weights = {name: refs[name].v_pu.shape[0] * max(int(refs[name].converged.sum()), 1) for name in names}
        scen_blocks = {}
        for scenario in settings.scenarios:
            key = scenario.kind.value
            per_iter_kpis = {
                name: [compute_kpis(r, refs[name], settings.paper_literal) for r in results]
                for name, skey, results in mc_out
                if skey == key
            }
            scen_blocks[key] = _scenario_block(per_iter_kpis, weights, settings)
        report["permutation"] = scen_blocks
    return report


def _pool_kpis(kpis: dict[str, KpiReport], refs: dict[str, PowerFlowResult]) -> KpiReport:
    """Aggregate across networks: MSE pooled by bus-timestep count, the
    extremum-based indicators averaged."""
    w = np.array([refs[n].v_pu.shape[0] * max(int(refs[n].converged.sum()), 1) for n in sorted(kpis)], dtype=float)
    rows = [kpis[n] for n in sorted(kpis)]
    mse = float(np.average([r.mse_vm for r in rows], weights=w))
    return KpiReport(
        mse_vm=mse,
        e_max_trl=float(np.mean([r.e_max_trl for r in rows])),
        e_max_lnl=float(np.mean([r.e_max_lnl for r in rows])),
        e_min_vm=float(np.mean([r.e_min_vm for r in rows])),
        dropped_steps=int(sum(r.dropped_steps for r in rows)),
        per_network={n: kpis[n] for n in sorted(kpis)},
    )


def _scenario_block(per_iter: dict[str, list[KpiReport]], weights: dict[str, int], settings: StudySettings) -> dict:
    names = sorted(per_iter)
    n_iter = settings.n_iter
    per_network = {}
    mse_matrix = np.zeros((len(names), n_iter))
    for row, name in enumerate(names):
        kpis = per_iter[name]
        arr = {
            "mse_vm": np.array([k.mse_vm for k in kpis]),
            "e_max_trl": np.array([k.e_max_trl for k in kpis]),
            "e_max_lnl": np.array([k.e_max_lnl for k in kpis]),
            "e_min_vm": np.array([k.e_min_vm for k in kpis]),
        }
        mse_matrix[row] = arr["mse_vm"]
        per_network[name] = {
            key: {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if n_iter > 1 else 0.0}
            for key, v in arr.items()
        }
    w = np.array([weights[n] for n in names], dtype=float)
    pooled = (w[:, None] * mse_matrix).sum(axis=0) / w.sum()
    return {
        "per_network": per_network,
        "pooled": {
            "mse_vm_per_iter": pooled.tolist(),
            "mse_vm_cumulative": cumulative_mean(pooled).tolist(),
            "mse_vm_mean": float(pooled.mean()),
            "mse_vm_std": float(pooled.std(ddof=1)) if n_iter > 1 else 0.0,
            "convergence_slope": convergence_slope(pooled),
        },
    }


def _settings_dict(settings: StudySettings) -> dict:
    out = asdict(settings)
    out["scenarios"] = [s.kind.value for s in settings.scenarios]
    out["alloc"] = {
        "eps_energy": settings.alloc.eps_energy,
        "eps_power": settings.alloc.eps_power,
        "k_per_category": (
            {c.value: k for c, k in settings.alloc.k_per_category.items()}
            if settings.alloc.k_per_category
            else None
        ),
    }
    return out


def run_reference_study(
    synth_spec: SynthSpec,
    settings: StudySettings,
    db_seed: int = 7,
) -> dict:
    """Generate the synthetic reference case and benchmark both methods."""
    networks, grid = synth_reference(synth_spec)
    db = synth_database(grid, seed=db_seed) if settings.method in ("allocation", "both") else None
    return run_study(networks, db, settings)


# ---------------------------------------------------------------------------
# CSV emission for external plotting
# ---------------------------------------------------------------------------


def write_study_csvs(report: dict, outdir) -> list[Path]:
    """Emit the KPI table, the convergence curves, and the per-iteration MSE
    samples as CSV files; returns the paths written."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    path = outdir / "kpi_table.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "scenario", "network", "mse_vm", "e_max_trl", "e_max_lnl", "e_min_vm"])
        if "allocation" in report:
            for name, block in sorted(report["allocation"]["per_network"].items()):
                k = block["kpis"]
                w.writerow(["allocation", "", name, k["mse_vm"], k["e_max_trl"], k["e_max_lnl"], k["e_min_vm"]])
        for scen, block in sorted(report.get("permutation", {}).items()):
            for name, kk in sorted(block["per_network"].items()):
                w.writerow(
                    [
                        "permutation",
                        scen,
                        name,
                        kk["mse_vm"]["mean"],
                        kk["e_max_trl"]["mean"],
                        kk["e_max_lnl"]["mean"],
                        kk["e_min_vm"]["mean"],
                    ]
                )
    written.append(path)

    if report.get("permutation"):
        scen_names = sorted(report["permutation"])
        n_iter = len(report["permutation"][scen_names[0]]["pooled"]["mse_vm_cumulative"])
        path = outdir / "convergence.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + scen_names)
            for i in range(n_iter):
                w.writerow([i + 1] + [report["permutation"][s]["pooled"]["mse_vm_cumulative"][i] for s in scen_names])
        written.append(path)

        path = outdir / "mse_iterations.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration"] + scen_names)
            for i in range(n_iter):
                w.writerow([i + 1] + [report["permutation"][s]["pooled"]["mse_vm_per_iter"][i] for s in scen_names])
        written.append(path)
    return written
