"""Two-stage allocation of database load profiles to unmetered network buses.

Stage 1 picks, for every bus with an unknown series, one same-category
database profile whose energy can be scaled into the bus's energy tolerance
band, minimising the total squared energy adjustment.  The combinatorial
part is a capacitated assignment solved exactly as a min-cost flow.

Stage 2 deforms the chosen profiles per timestep so that their sum tracks
the measured transformer series within its tolerance band while every
node's energy stays inside its own band.  The objective is the squared
distance to the unscaled profiles, so the optimum is the Euclidean
projection onto the constraint polytope, computed by Dykstra's alternating
projections over the three constraint families.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InfeasibleError
from .model import LoadCategory, LoadDatabase, LoadProfile, Network

DEFAULT_TOL = 1e-6
MAX_SWEEPS = 20_000


@dataclass(frozen=True)
class AllocationConfig:
    eps_energy: float = 0.05
    eps_power: float = 0.01
    k_per_category: dict[LoadCategory, int] | None = None

    def __post_init__(self):
        for name, eps in (("eps_energy", self.eps_energy), ("eps_power", self.eps_power)):
            if not 0.0 <= eps < 1.0:
                raise DataFormatError(f"{name} must be in [0, 1)")
        if self.k_per_category is not None:
            for cat, k in self.k_per_category.items():
                if k < 1:
                    raise DataFormatError(f"k for {cat.value} must be >= 1")


@dataclass(frozen=True)
class Stage1Result:
    assignment: dict[str, str]  # bus -> database meter_id
    scale: dict[str, float]  # bus -> energy scaling factor (> 0)
    e_org: dict[str, float]  # bus -> allocated profile energy, J
    e_var: dict[str, float]  # bus -> scaled energy, J
    objective: float  # sum of (e_org - e_var)^2, J^2
    k_used: dict[LoadCategory, int]


@dataclass(frozen=True)
class Stage2Result:
    nodes: tuple[str, ...]  # bus order of the matrix rows
    gamma: np.ndarray  # [N, T] per-cell deformation factors
    p_org: np.ndarray  # [N, T] unscaled allocated profiles, W
    p_var: np.ndarray  # [N, T] tuned profiles, W
    p_var_trafo: np.ndarray  # [T] tuned profile sum plus known loads, W
    e_var: np.ndarray  # [N] tuned per-node energies, J
    objective: float
    max_violation: float
    converged: bool
    sweeps: int


def default_k(network: Network, db: LoadDatabase) -> dict[LoadCategory, int]:
    """Per-category allocation cap: ceil(unknown-node count / database count)."""
    need: dict[LoadCategory, int] = {}
    for load in network.unknown_loads.values():
        need[load.category] = need.get(load.category, 0) + 1
    have: dict[LoadCategory, int] = {}
    for entry in db.entries:
        have[entry.category] = have.get(entry.category, 0) + 1
    out = {}
    for cat, n in need.items():
        if have.get(cat, 0) == 0:
            raise InfeasibleError(f"no database profiles for category {cat.value}")
        out[cat] = -(-n // have[cat])
    return out


def stage1_allocate(network: Network, db: LoadDatabase, cfg: AllocationConfig) -> Stage1Result:
    """Exact minimum-cost assignment of database profiles to unknown buses.

    For a candidate profile with energy E_j and a bus band
    [(1-eps_E) E_ref, (1+eps_E) E_ref], the optimal scaled energy is E_j
    clamped to the band, so the pair cost is the squared distance from E_j
    to the band and the remaining problem is a transportation problem.
    """
    k_used = cfg.k_per_category if cfg.k_per_category is not None else default_k(network, db)
    by_cat = db.by_category()
    assignment: dict[str, str] = {}
    scale: dict[str, float] = {}
    e_org: dict[str, float] = {}
    e_var: dict[str, float] = {}
    objective = 0.0

    cats = sorted({u.category for u in network.unknown_loads.values()}, key=lambda c: c.value)
    for cat in cats:
        buses = sorted(b for b, u in network.unknown_loads.items() if u.category == cat)
        cands = by_cat.get(cat, [])
        k = k_used.get(cat)
        if k is None:
            raise InfeasibleError(f"no allocation cap k for category {cat.value}")
        if len(buses) > k * len(cands):
            raise InfeasibleError(
                f"category {cat.value}: {len(buses)} nodes exceed capacity {k} x {len(cands)} profiles"
            )
        cand_energy = np.array([entry.energy_j(db.grid) for entry in cands])
        e_ref = np.array([network.unknown_loads[b].e_ref_j for b in buses])
        lo = (1.0 - cfg.eps_energy) * e_ref
        hi = (1.0 + cfg.eps_energy) * e_ref
        # squared distance from each candidate energy to each bus band
        ev = np.clip(cand_energy[None, :], lo[:, None], hi[:, None])
        cost = (cand_energy[None, :] - ev) ** 2
        feasible = (cand_energy[None, :] > 0) | (e_ref[:, None] == 0)
        cost_scale = max(1.0, float(cost[feasible].max())) if feasible.any() else 1.0

        picks = _assign_min_cost(cost / cost_scale, feasible, k)
        for i, b in enumerate(buses):
            j = picks[i]
            entry = cands[j]
            assignment[b] = entry.meter_id
            e_org[b] = float(cand_energy[j])
            e_var[b] = float(ev[i, j])
            scale[b] = float(ev[i, j] / cand_energy[j]) if cand_energy[j] > 0 else 1.0
            objective += float(cost[i, j])
    return Stage1Result(assignment, scale, e_org, e_var, objective, dict(k_used))


def _assign_min_cost(cost: np.ndarray, feasible: np.ndarray, cap: int) -> list[int]:
    """Assign each row to one column (column used at most `cap` times),
    minimising total cost; successive shortest paths on the flow network."""
    n_rows, n_cols = cost.shape
    src = n_rows + n_cols
    dst = src + 1
    flow = _MinCostFlow(n_rows + n_cols + 2)
    for i in range(n_rows):
        flow.add(src, i, 1, 0.0)
        for j in range(n_cols):
            if feasible[i, j]:
                flow.add(i, n_rows + j, 1, float(cost[i, j]))
    for j in range(n_cols):
        flow.add(n_rows + j, dst, cap, 0.0)
    flow.solve(src, dst, n_rows)
    picks = []
    for i in range(n_rows):
        pick = None
        for e in flow.adj[i]:
            if flow.to[e] != src and flow.cap[e] == 0 and not e & 1:
                pick = flow.to[e] - n_rows
                break
        if pick is None:  # cannot happen once solve() routed all units
            raise InfeasibleError("assignment extraction failed")
        picks.append(pick)
    return picks


class _MinCostFlow:
    """Successive shortest paths with potentials; non-negative arc costs."""

    def __init__(self, n: int):
        self.n = n
        self.to: list[int] = []
        self.cap: list[int] = []
        self.cost: list[float] = []
        self.adj: list[list[int]] = [[] for _ in range(n)]

    def add(self, u: int, v: int, cap: int, cost: float) -> None:
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(cap)
        self.cost.append(cost)
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(0)
        self.cost.append(-cost)

    def solve(self, s: int, t: int, target: int) -> None:
        pot = [0.0] * self.n
        routed = 0
        while routed < target:
            dist = [math.inf] * self.n
            prev = [-1] * self.n
            dist[s] = 0.0
            heap = [(0.0, s)]
            while heap:
                d, u = heapq.heappop(heap)
                if d > dist[u] + 1e-15:
                    continue
                for e in self.adj[u]:
                    if self.cap[e] <= 0:
                        continue
                    v = self.to[e]
                    nd = d + max(self.cost[e] + pot[u] - pot[v], 0.0)
                    if nd < dist[v] - 1e-15:
                        dist[v] = nd
                        prev[v] = e
                        heapq.heappush(heap, (nd, v))
            if not math.isfinite(dist[t]):
                raise InfeasibleError("assignment capacities cannot route all nodes")
            for u in range(self.n):
                if math.isfinite(dist[u]):
                    pot[u] += dist[u]
            push = target - routed
            v = t
            while v != s:
                e = prev[v]
                push = min(push, self.cap[e])
                v = self.to[e ^ 1]
            v = t
            while v != s:
                e = prev[v]
                self.cap[e] -= push
                self.cap[e ^ 1] += push
                v = self.to[e ^ 1]
            routed += push


# ---------------------------------------------------------------------------
# Stage 2: projection onto the feasible profile polytope
# ---------------------------------------------------------------------------


def stage2_tune(
    network: Network,
    db: LoadDatabase,
    s1: Stage1Result,
    cfg: AllocationConfig,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> Stage2Result:
    """Deform the allocated profiles as little as possible while matching
    the transformer measurement per timestep and every node's energy band.

    Cells where the allocated profile is zero stay zero (the deformation is
    a per-cell non-negative factor).  Dykstra sweeps run in the fixed order
    transformer family, energy family, non-negative orthant, so the result
    is non-negative exactly and band residuals are below `tol` on success.
    """
    if network.transformer_measurement is None:
        raise DataFormatError("stage 2 requires a transformer measurement series")
    if network.grid is None:
        raise DataFormatError("stage 2 requires the network time grid")
    nodes = tuple(sorted(s1.assignment))
    by_meter = {e.meter_id: e for e in db.entries}
    p_org = np.vstack([by_meter[s1.assignment[b]].power_w for b in nodes])
    n, t_len = p_org.shape
    step = network.grid.step_seconds

    p_ref = network.transformer_measurement.power_w
    if p_ref.size != t_len:
        raise DataFormatError("transformer measurement not aligned to profiles")
    known = np.zeros(t_len)
    for prof in network.known_loads.values():
        known = known + prof.power_w

    band_lo = (1.0 - cfg.eps_power) * p_ref - known
    band_hi = (1.0 + cfg.eps_power) * p_ref - known
    e_ref = np.array([network.unknown_loads[b].e_ref_j for b in nodes])
    e_lo = (1.0 - cfg.eps_energy) * e_ref
    e_hi = (1.0 + cfg.eps_energy) * e_ref

    mask = p_org > 0.0
    col_cnt = mask.sum(axis=0)
    row_cnt = mask.sum(axis=1)

    bad = np.flatnonzero(band_hi < 0)
    if bad.size:
        raise InfeasibleError(
            f"known loads alone exceed the transformer band at timestep(s) {bad[:5].tolist()}"
        )
    bad = np.flatnonzero((col_cnt == 0) & (band_lo > 0))
    if bad.size:
        raise InfeasibleError(
            f"no tunable load can reach the transformer band at timestep(s) {bad[:5].tolist()}"
        )
    bad = np.flatnonzero((row_cnt == 0) & (e_lo > 0))
    if bad.size:
        raise InfeasibleError(f"allocated profile is identically zero at bus(es) {[nodes[i] for i in bad[:5]]}")

    p_scale = max(float(np.max(np.abs(p_ref))), 1.0)
    denom_t = np.maximum(np.abs(p_ref), 1e-12 * p_scale)
    denom_e = np.maximum(e_ref, 1e-12 * max(float(e_ref.max(initial=0.0)), 1.0))
    col_div = np.where(col_cnt > 0, col_cnt, 1)
    row_div = np.where(row_cnt > 0, row_cnt, 1)

    def violation(x: np.ndarray) -> float:
        s = x.sum(axis=0)
        v_t = np.maximum(np.maximum(band_lo - s, s - band_hi), 0.0) / denom_t
        e = x.sum(axis=1) * step
        v_e = np.maximum(np.maximum(e_lo - e, e - e_hi), 0.0) / denom_e
        return float(max(v_t.max(initial=0.0), v_e.max(initial=0.0)))

    x = p_org.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    r = np.zeros_like(x)
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        z = x + p
        s = z.sum(axis=0)
        delta = (np.clip(s, band_lo, band_hi) - s) / col_div
        y = z + delta[None, :] * mask
        p = z - y
        x = y

        z = x + q
        e = z.sum(axis=1) * step
        delta = (np.clip(e, e_lo, e_hi) - e) / (step * row_div)
        y = z + delta[:, None] * mask
        q = z - y
        x = y

        z = x + r
        y = np.maximum(z, 0.0)
        r = z - y
        x = y

        if violation(x) < tol:
            converged = True
            break

    gamma = np.where(mask, x / np.where(mask, p_org, 1.0), 1.0)
    p_var_trafo = x.sum(axis=0) + known
    e_var = x.sum(axis=1) * step
    objective = float(np.sum((p_org - x) ** 2))
    return Stage2Result(
        nodes=nodes,
        gamma=gamma,
        p_org=p_org,
        p_var=x,
        p_var_trafo=p_var_trafo,
        e_var=e_var,
        objective=objective,
        max_violation=violation(x),
        converged=converged,
        sweeps=sweeps,
    )


def allocation_pipeline(
    network: Network,
    db: LoadDatabase,
    cfg: AllocationConfig,
    tol: float = DEFAULT_TOL,
) -> tuple[Stage1Result, Stage2Result | None, dict[str, LoadProfile]]:
    """Run both stages and emit one profile per load bus for the load flow.

    With no unknown loads this is the identity pipeline: known loads pass
    through and stage 2 is skipped (returned as None).
    """
    profiles: dict[str, LoadProfile] = dict(network.known_loads)
    if not network.unknown_loads:
        empty = Stage1Result({}, {}, {}, {}, 0.0, {})
        return empty, None, profiles
    s1 = stage1_allocate(network, db, cfg)
    s2 = stage2_tune(network, db, s1, cfg, tol=tol)
    for i, bus in enumerate(s2.nodes):
        profiles[bus] = LoadProfile(
            meter_id=f"{bus}:{s1.assignment[bus]}",
            category=network.unknown_loads[bus].category,
            power_w=s2.p_var[i],
        )
    return s1, s2, profiles
