"""Meter grouping and randomised load-bus assignment.

The metering service groups electrically similar meters and publishes, per
group, only the meter list and the bus list — never the pairing.  The
planner side then samples uniform within-group permutations to build load
cases.  build_groups is the only operation that reads the true meter-bus
link; everything downstream of the exchange file is pairing-free except
for multi-customer meters that may keep their location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, InfeasibleError
from .features import FeatureMatrix, ScenarioKind, ScenarioSpec, affinity_matrix, build_features, distance_matrix, zscore_normalize
from .model import LoadProfile, Network, aggregate_multicustomer
from .partition import rsgp
from .powerflow import LoadAssignment, PowerFlowResult, solve_series


@dataclass(frozen=True)
class Group:
    group_id: str
    meter_ids: frozenset[str]
    bus_ids: frozenset[str]


@dataclass(frozen=True)
class GroupExchange:
    """The only artifact that crosses the metering-service/planner boundary."""

    groups: tuple[Group, ...]
    fixed: dict[str, str]  # meter -> bus for multi-customer meters

    def __post_init__(self):
        meters_seen: set[str] = set()
        buses_seen: set[str] = set()
        for g in self.groups:
            if len(g.meter_ids) != len(g.bus_ids):
                raise DataFormatError(f"group {g.group_id}: meter and bus counts differ")
            if meters_seen & g.meter_ids or buses_seen & g.bus_ids:
                raise DataFormatError(f"group {g.group_id}: overlaps another group")
            meters_seen |= g.meter_ids
            buses_seen |= g.bus_ids
        if meters_seen & set(self.fixed):
            raise DataFormatError("meter appears both grouped and fixed")
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "fixed", dict(self.fixed))

    def all_meters(self) -> set[str]:
        out = set(self.fixed)
        for g in self.groups:
            out |= g.meter_ids
        return out


@dataclass(frozen=True)
class AssignmentSample:
    seed: int
    mapping: dict[str, str]  # meter -> bus over all groups plus fixed loads


def build_groups(
    profiles,
    network: Network,
    scenario: ScenarioSpec,
    k: int,
    threshold: int = 3,
    pca_base: tuple[str, ...] | None = None,
) -> GroupExchange:
    """Metering-service side: split off multi-customer meters, group the
    rest by the scenario's features with rsgp, and attach each group's bus
    list.  The single-group scenario bypasses the partitioning."""
    if network.grid is None:
        raise DataFormatError("network carries no time grid for feature extraction")
    meter_to_bus = {prof.meter_id: bus for bus, prof in network.known_loads.items()}
    profiles = list(profiles)
    for prof in profiles:
        if prof.meter_id not in meter_to_bus:
            raise DataFormatError(f"meter {prof.meter_id!r} has no known bus on the metering side")
    fixed_profiles, anon = aggregate_multicustomer(profiles, threshold)
    if len(anon) < k:
        raise InfeasibleError(f"only {len(anon)} anonymisable meters, need at least k={k}")
    fixed = {p.meter_id: meter_to_bus[p.meter_id] for p in fixed_profiles}

    if scenario.kind is ScenarioKind.ONE_GROUP:
        clusters = [tuple(sorted(p.meter_id for p in anon))]
    else:
        feats = build_features(anon, network.grid, scenario, pca_base=pca_base)
        graph = distance_matrix(zscore_normalize(feats))
        if scenario.kind is ScenarioKind.AFFINITY:
            graph = affinity_matrix(graph)
        clusters = rsgp(graph, k).clusters

    groups = tuple(
        Group(
            group_id=f"G{i:03d}",
            meter_ids=frozenset(cluster),
            bus_ids=frozenset(meter_to_bus[m] for m in cluster),
        )
        for i, cluster in enumerate(clusters)
    )
    return GroupExchange(groups=groups, fixed=fixed)


def sample_assignment(exchange: GroupExchange, seed: int) -> AssignmentSample:
    """One uniform within-group permutation per group, deterministic in seed.

    Uses a counter-based 64-bit generator so the same (exchange, seed) pair
    always yields a bit-identical sample.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    mapping = dict(exchange.fixed)
    for grp in sorted(exchange.groups, key=lambda g: g.group_id):
        meters = sorted(grp.meter_ids)
        buses = sorted(grp.bus_ids)
        perm = rng.permutation(len(buses))
        for m, j in zip(meters, perm):
            mapping[m] = buses[int(j)]
    return AssignmentSample(seed=seed, mapping=mapping)


def monte_carlo(
    exchange: GroupExchange,
    network: Network,
    profiles,
    n_iter: int,
    base_seed: int,
    pf: float = 1.0,
    s_base: float = 1e6,
) -> list[tuple[AssignmentSample, PowerFlowResult]]:
    """Independent samples with seeds base_seed + 0 .. base_seed + n_iter-1,
    each run through the load-flow engine."""
    if n_iter < 1:
        raise DataFormatError("n_iter must be >= 1")
    if network.grid is None:
        raise DataFormatError("network carries no time grid")
    by_meter = {p.meter_id: p for p in profiles}
    missing = exchange.all_meters() - set(by_meter)
    if missing:
        raise DataFormatError(f"profiles missing for meters {sorted(missing)[:5]}")
    out = []
    for i in range(n_iter):
        sample = sample_assignment(exchange, base_seed + i)
        assignment = LoadAssignment(
            grid=network.grid,
            profiles_by_bus={bus: by_meter[m] for m, bus in sample.mapping.items()},
            power_factor=pf,
        )
        out.append((sample, solve_series(network, assignment, s_base=s_base, warm_start=False)))
    return out


def anonymity_audit(exchange: GroupExchange, features: FeatureMatrix, percentile: float = 95.0) -> dict:
    """Per-group intra-distance statistics, flagging loosely packed groups.

    A group whose largest member-to-member distance exceeds the given
    percentile of all pairwise distances is easy to de-anonymise and gets
    flagged.  Informational only.
    """
    pos = {m: i for i, m in enumerate(features.meter_ids)}
    grouped = sorted(m for g in exchange.groups for m in g.meter_ids)
    missing = [m for m in grouped if m not in pos]
    if missing:
        raise DataFormatError(f"features missing for meters {missing[:5]}")
    x = features.values
    sel = np.array([pos[m] for m in grouped], dtype=np.intp)
    xs = x[sel]
    sq = (xs * xs).sum(axis=1)
    d = np.sqrt(np.clip(sq[:, None] + sq[None, :] - 2.0 * (xs @ xs.T), 0.0, None))
    iu = np.triu_indices(len(grouped), k=1)
    all_pairs = d[iu]
    threshold = float(np.percentile(all_pairs, percentile)) if all_pairs.size else 0.0

    rows = []
    flagged = []
    for g in sorted(exchange.groups, key=lambda g: g.group_id):
        idx = np.array([pos[m] for m in sorted(g.meter_ids)], dtype=np.intp)
        if idx.size < 2:
            dmax = 0.0
        else:
            gx = x[idx]
            gsq = (gx * gx).sum(axis=1)
            gd = np.sqrt(np.clip(gsq[:, None] + gsq[None, :] - 2.0 * (gx @ gx.T), 0.0, None))
            dmax = float(gd.max())
        flag = bool(all_pairs.size and dmax > threshold)
        if flag:
            flagged.append(g.group_id)
        rows.append({"group_id": g.group_id, "size": len(g.meter_ids), "max_intra_distance": dmax, "flagged": flag})
    return {"percentile": percentile, "threshold": threshold, "groups": rows, "flagged_group_ids": flagged}


# ---------------------------------------------------------------------------
# Exchange JSON: {"groups": [{"id", "meters", "buses"}], "fixed": {...}}
# ---------------------------------------------------------------------------


def write_exchange_json(path, exchange: GroupExchange) -> None:
    doc = {
        "groups": [
            {"id": g.group_id, "meters": sorted(g.meter_ids), "buses": sorted(g.bus_ids)}
            for g in sorted(exchange.groups, key=lambda g: g.group_id)
        ],
        "fixed": {m: exchange.fixed[m] for m in sorted(exchange.fixed)},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_exchange_json(path) -> GroupExchange:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc
    try:
        groups = tuple(
            Group(str(g["id"]), frozenset(map(str, g["meters"])), frozenset(map(str, g["buses"])))
            for g in doc["groups"]
        )
        fixed = {str(m): str(b) for m, b in doc.get("fixed", {}).items()}
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed exchange document: {exc}") from exc
    return GroupExchange(groups=groups, fixed=fixed)
