"""Radial load-flow engine (backward/forward sweep, current summation).

Single-phase equivalent with constant-power loads; the transformer bus is
the slack at 1.0 pu.  Per-unit bases: the transformer bus nominal voltage
and a configurable apparent-power base.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, TopologyError
from .model import LoadProfile, Network, TimeGrid

V_TOL_PU = 1e-8
MAX_SWEEPS = 100
DEFAULT_S_BASE = 1e6  # VA


@dataclass(frozen=True)
class LoadAssignment:
    """Which profile sits on which bus, with an optional power factor."""

    grid: TimeGrid
    profiles_by_bus: dict[str, LoadProfile]
    power_factor: float | dict[str, float] = 1.0

    def pf(self, bus: str) -> float:
        if isinstance(self.power_factor, dict):
            return self.power_factor.get(bus, 1.0)
        return float(self.power_factor)


@dataclass(frozen=True)
class PowerFlowResult:
    bus_ids: tuple[str, ...]
    line_keys: tuple[tuple[str, str], ...]
    v_pu: np.ndarray  # [B, T] voltage magnitudes
    i_a: np.ndarray  # [L, T] line current magnitudes, amperes
    p_trafo_w: np.ndarray  # [T] slack active power, watts
    converged: np.ndarray  # [T] bool

    @property
    def n_steps(self) -> int:
        return int(self.p_trafo_w.size)


class _Topology:
    """BFS-ordered tree view of a network, reused across timesteps."""

    def __init__(self, network: Network, s_base: float):
        bus_ids = network.bus_ids()
        self.bus_ids = bus_ids
        idx = {b: i for i, b in enumerate(bus_ids)}
        self.root = idx[network.transformer_bus]
        v_base = network.buses[self.root].v_nominal_v
        if v_base <= 0:
            raise TopologyError("transformer bus nominal voltage must be positive")
        self.s_base = s_base
        self.v_base = v_base
        self.z_base = v_base * v_base / s_base
        self.i_base = s_base / v_base

        n = len(bus_ids)
        children: list[list[int]] = [[] for _ in range(n)]
        line_between: dict[tuple[int, int], int] = {}
        for li, ln in enumerate(network.lines):
            a, b = idx[ln.from_bus], idx[ln.to_bus]
            line_between[(a, b)] = li
            line_between[(b, a)] = li
            children[a].append(b)
            children[b].append(a)

        order = [self.root]
        parent = np.full(n, -1, dtype=np.intp)
        seen = {self.root}
        qi = 0
        while qi < len(order):
            cur = order[qi]
            qi += 1
            for nxt in children[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    parent[nxt] = cur
                    order.append(nxt)
        self.order = np.array(order, dtype=np.intp)
        self.parent = parent
        # line feeding each non-root bus, and its impedance in pu
        self.feed_line = np.full(n, -1, dtype=np.intp)
        self.z_pu = np.zeros(n, dtype=complex)
        for b in order[1:]:
            li = line_between[(int(parent[b]), int(b))]
            self.feed_line[b] = li
            ln = network.lines[li]
            self.z_pu[b] = complex(ln.r_ohm, ln.x_ohm) / self.z_base
        # child bus of each line (the endpoint away from the root)
        self.line_child = np.zeros(len(network.lines), dtype=np.intp)
        for b in order[1:]:
            self.line_child[self.feed_line[b]] = b


def _sweep_block(top: _Topology, s_pu: np.ndarray, v0: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve all columns of a [B, T] block simultaneously.

    Columns are frozen the moment their voltage update drops below V_TOL_PU,
    so the result is identical to solving each column on its own.
    Returns (complex voltages, branch currents into each bus, converged).
    """
    n, t_len = s_pu.shape
    rev = top.order[:0:-1]
    fwd = top.order[1:]
    par = top.parent
    v = v0.copy()
    v[top.root] = 1.0
    cur = np.zeros_like(v)
    active = np.ones(t_len, dtype=bool)
    for _ in range(MAX_SWEEPS):
        va = v[:, active]
        with np.errstate(divide="ignore", invalid="ignore"):
            inj = np.conj(s_pu[:, active] / va)
        inj[~np.isfinite(inj)] = 0.0
        acc = inj.copy()
        for b in rev:
            p = par[b]
            if p >= 0:
                acc[p] += acc[b]
        vn = np.empty_like(va)
        vn[top.root] = 1.0
        for b in fwd:
            vn[b] = vn[par[b]] - top.z_pu[b] * acc[b]
        delta = np.abs(vn - va).max(axis=0)
        v[:, active] = vn
        cur[:, active] = acc
        done = delta < V_TOL_PU
        if done.all():
            active = np.zeros(t_len, dtype=bool)
            break
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    converged = ~active
    return v, cur, converged


def _loads_to_s_pu(network: Network, assignment: LoadAssignment, top: _Topology) -> np.ndarray:
    n = len(top.bus_ids)
    idx = {b: i for i, b in enumerate(top.bus_ids)}
    t_len = len(assignment.grid)
    s = np.zeros((n, t_len), dtype=complex)
    for bus, prof in assignment.profiles_by_bus.items():
        if bus not in idx:
            raise TopologyError(f"unknown bus referenced: {bus!r}")
        if prof.power_w.size != t_len:
            raise DataFormatError(f"profile {prof.meter_id} not aligned to assignment grid")
        pf = assignment.pf(bus)
        if not 0.0 < pf <= 1.0:
            raise DataFormatError(f"power factor for bus {bus} must be in (0, 1]")
        q = prof.power_w * math.tan(math.acos(pf))
        s[idx[bus]] += (prof.power_w + 1j * q) / top.s_base
    return s


def solve_timestep(
    network: Network,
    loads: dict[str, complex],
    s_base: float = DEFAULT_S_BASE,
) -> tuple[np.ndarray, np.ndarray, float, bool]:
    """Single snapshot with complex powers in VA per bus.

    Returns (per-bus voltage magnitudes pu, per-line current magnitudes A,
    slack active power W, converged flag).
    """
    top = _Topology(network, s_base)
    idx = {b: i for i, b in enumerate(top.bus_ids)}
    s = np.zeros((len(top.bus_ids), 1), dtype=complex)
    for bus, power in loads.items():
        if bus not in idx:
            raise TopologyError(f"unknown bus referenced: {bus!r}")
        s[idx[bus], 0] += complex(power) / s_base
    v0 = np.ones_like(s)
    v, cur, conv = _sweep_block(top, s, v0)
    s_slack = v[top.root, 0] * np.conj(cur[top.root, 0])
    i_a = np.abs(cur[top.line_child, 0]) * top.i_base
    return np.abs(v[:, 0]), i_a, float(s_slack.real * s_base), bool(conv[0])


def solve_series(
    network: Network,
    assignment: LoadAssignment,
    s_base: float = DEFAULT_S_BASE,
    warm_start: bool = True,
) -> PowerFlowResult:
    """Sweep solve per timestep over the assignment's grid.

    warm_start=True runs timesteps sequentially, each starting from the
    previous solution; warm_start=False solves all timesteps from flat
    start in one vectorised block (identical to independent cold solves).
    """
    top = _Topology(network, s_base)
    s = _loads_to_s_pu(network, assignment, top)
    n, t_len = s.shape
    if warm_start:
        v = np.empty((n, t_len), dtype=complex)
        cur = np.empty((n, t_len), dtype=complex)
        conv = np.empty(t_len, dtype=bool)
        v_prev = np.ones((n, 1), dtype=complex)
        for t in range(t_len):
            vt, ct, kt = _sweep_block(top, s[:, t : t + 1], v_prev)
            v[:, t : t + 1] = vt
            cur[:, t : t + 1] = ct
            conv[t] = kt[0]
            v_prev = vt if kt[0] else np.ones((n, 1), dtype=complex)
    else:
        v, cur, conv = _sweep_block(top, s, np.ones((n, t_len), dtype=complex))
    s_slack = v[top.root] * np.conj(cur[top.root])
    i_a = np.abs(cur[top.line_child]) * top.i_base
    return PowerFlowResult(
        bus_ids=top.bus_ids,
        line_keys=tuple((ln.from_bus, ln.to_bus) for ln in network.lines),
        v_pu=np.abs(v),
        i_a=i_a,
        p_trafo_w=s_slack.real * s_base,
        converged=conv,
    )
