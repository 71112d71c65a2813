"""Balanced partitioning of a weighted record graph.

Three methods with different balance/cost/runtime trade-offs:

- ip_partition: exact minimisation of the total intra-cluster edge weight
  with cluster sizes in [m, m+1], by branch and bound.
- sgp_cut / sgp_partition: spectral bisection on the graph Laplacian's
  dominant eigenvector, applied once or recursively.
- rsgp: recursive spectral cuts, finishing small pieces exactly with
  ip_partition; final cluster sizes always land in [k, 2k-1].
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, DataFormatError, InfeasibleError

IP_NODE_CAP = 40

EIG_TOL = 1e-10
EIG_MAX_ITER = 50_000


@dataclass(frozen=True)
class SimilarityGraph:
    """Undirected weighted graph over record ids.

    Missing edges mean "these two records may never share a cluster"; their
    weight slot is zero and the adjacency mask is False.
    """

    node_ids: tuple
    weights: np.ndarray  # [N, N] symmetric, zero diagonal
    adjacency: np.ndarray  # [N, N] bool, symmetric, False diagonal

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        a = np.asarray(self.adjacency, dtype=bool)
        n = len(self.node_ids)
        if w.shape != (n, n) or a.shape != (n, n):
            raise DataFormatError("weight/adjacency shape must match node count")
        if not np.all(np.isfinite(w)):
            raise DataFormatError("graph weights must be finite")
        if np.any(w < 0):
            raise DataFormatError("graph weights must be non-negative")
        if not np.array_equal(w, w.T) or not np.array_equal(a, a.T):
            raise DataFormatError("graph must be symmetric")
        if np.any(np.diag(a)):
            raise DataFormatError("self-edges are not allowed")
        w = w * a  # weights only meaningful on edges
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        w.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "adjacency", a)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @classmethod
    def complete(cls, node_ids, weights: np.ndarray) -> "SimilarityGraph":
        n = len(node_ids)
        adj = ~np.eye(n, dtype=bool)
        w = np.asarray(weights, dtype=np.float64).copy()
        np.fill_diagonal(w, 0.0)
        return cls(tuple(node_ids), w, adj)

    @classmethod
    def from_edges(cls, edges, node_ids=None) -> "SimilarityGraph":
        """Build from (u, v, weight) triples; nodes default to the endpoints."""
        edges = list(edges)
        if node_ids is None:
            seen = []
            for u, v, _ in edges:
                for x in (u, v):
                    if x not in seen:
                        seen.append(x)
            node_ids = seen
        node_ids = tuple(node_ids)
        idx = {u: i for i, u in enumerate(node_ids)}
        n = len(node_ids)
        w = np.zeros((n, n))
        a = np.zeros((n, n), dtype=bool)
        for u, v, weight in edges:
            if u == v:
                raise DataFormatError(f"self-edge on {u!r}")
            i, j = idx[u], idx[v]
            w[i, j] = w[j, i] = float(weight)
            a[i, j] = a[j, i] = True
        return cls(node_ids, w, a)

    def subgraph(self, members) -> "SimilarityGraph":
        idx = {u: i for i, u in enumerate(self.node_ids)}
        sel = np.array([idx[u] for u in members], dtype=np.intp)
        return SimilarityGraph(tuple(members), self.weights[np.ix_(sel, sel)], self.adjacency[np.ix_(sel, sel)])

    def components(self) -> list[list]:
        """Connected components, each as a list of node ids (stable order)."""
        n = self.n
        seen = np.zeros(n, dtype=bool)
        comps = []
        for start in range(n):
            if seen[start]:
                continue
            stack = [start]
            seen[start] = True
            comp = []
            while stack:
                cur = stack.pop()
                comp.append(cur)
                for nxt in np.flatnonzero(self.adjacency[cur]):
                    if not seen[nxt]:
                        seen[nxt] = True
                        stack.append(int(nxt))
            comps.append([self.node_ids[i] for i in sorted(comp)])
        return comps


@dataclass(frozen=True)
class PartitionSpec:
    """Target cluster size and, optionally, an explicit cluster count."""

    k: int
    n_clusters: int | None = None

    def __post_init__(self):
        if self.k < 2:
            raise DataFormatError("cluster size k must be >= 2")
        if self.n_clusters is not None and self.n_clusters < 1:
            raise DataFormatError("n_clusters must be >= 1")


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of a graph's nodes; `optimal` is set by ip_partition."""

    clusters: tuple[tuple, ...]
    optimal: bool | None = None

    def labels(self) -> dict:
        return {u: c for c, cluster in enumerate(self.clusters) for u in cluster}

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    def co_clustered(self, u, v) -> bool:
        lab = self.labels()
        return lab[u] == lab[v]


@dataclass(frozen=True)
class PartitionQuality:
    unbalance: int
    intra_weight: float
    wall_time: float = 0.0


def _canonical(graph: SimilarityGraph, clusters: list[list]) -> tuple[tuple, ...]:
    """Members ordered by graph index; clusters by smallest contained index."""
    pos = {u: i for i, u in enumerate(graph.node_ids)}
    ordered = [tuple(sorted(c, key=pos.__getitem__)) for c in clusters]
    ordered.sort(key=lambda c: pos[c[0]])
    return tuple(ordered)


def _check_cover(graph: SimilarityGraph, clusters) -> None:
    flat = [u for c in clusters for u in c]
    if len(flat) != len(set(flat)) or set(flat) != set(graph.node_ids) or any(len(c) == 0 for c in clusters):
        raise InfeasibleError("partition is not a disjoint cover")


# ---------------------------------------------------------------------------
# Laplacian and spectral cut
# ---------------------------------------------------------------------------


def laplacian(graph: SimilarityGraph) -> np.ndarray:
    """Degree matrix (edge counts) minus weighted adjacency."""
    deg = graph.adjacency.sum(axis=1).astype(np.float64)
    return np.diag(deg) - graph.weights


def _dominant_eigenpair(mat: np.ndarray, tol: float = EIG_TOL, max_iter: int = EIG_MAX_ITER):
    """Largest eigenpair of a symmetric PSD matrix by power iteration.

    Deterministic start vector: all ones plus an index-proportional
    perturbation, so repeated runs give bit-identical results.
    """
    n = mat.shape[0]
    v = 1.0 + np.arange(n) / max(n - 1, 1)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iter):
        w = mat @ v
        lam = float(v @ w)
        resid = float(np.linalg.norm(w - lam * v))
        if resid <= tol * max(1.0, abs(lam)):
            return lam, v, it + 1
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            # v lies in the null space; it is an exact eigenvector for 0
            return 0.0, v, it + 1
        v = w / norm_w
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def sgp_cut(graph: SimilarityGraph) -> tuple[Partition, dict]:
    """Single spectral bisection into halves of ceil(N/2) and floor(N/2).

    Cut vector: +1 where the dominant Laplacian eigenvector is >= its
    median, -1 below; entries tied at the median go to the upper side by
    ascending node index until it holds ceil(N/2) nodes.
    """
    n = graph.n
    if n < 2:
        raise InfeasibleError("cannot cut a graph with fewer than 2 nodes")
    lap = laplacian(graph)
    # The unweighted-degree/weighted-adjacency Laplacian is not guaranteed
    # PSD; a Gershgorin shift keeps the dominant eigenpair the algebraic max.
    gersh_low = float(np.min(np.diag(lap) - graph.weights.sum(axis=1)))
    shift = max(0.0, -gersh_low)
    lam_shifted, vec, iters = _dominant_eigenpair(lap + shift * np.eye(n))
    lam = lam_shifted - shift
    # canonical sign: largest-magnitude entry positive
    peak = int(np.argmax(np.abs(vec)))
    if vec[peak] < 0:
        vec = -vec
    order = np.lexsort((np.arange(n), -vec))
    n1 = (n + 1) // 2
    side1 = sorted(int(i) for i in order[:n1])
    side2 = sorted(int(i) for i in order[n1:])
    clusters = [[graph.node_ids[i] for i in side1], [graph.node_ids[i] for i in side2]]
    part = Partition(_canonical(graph, clusters))
    info = {"eigenvalue": lam, "eigenvector": vec, "iterations": iters, "median": float(np.median(vec))}
    return part, info


def _split_components(graph: SimilarityGraph, k: int, method_name: str):
    comps = graph.components()
    for comp in comps:
        if len(comp) < k:
            raise InfeasibleError(f"{method_name}: connected component of size {len(comp)} is below k={k}")
    return comps


def sgp_partition(graph: SimilarityGraph, k: int) -> Partition:
    """Successive spectral cuts until every piece has fewer than 2k nodes."""
    if k < 2:
        raise DataFormatError("cluster size k must be >= 2")
    clusters: list[list] = []
    for comp in _split_components(graph, k, "sgp_partition"):
        stack = [graph.subgraph(comp)]
        while stack:
            piece = stack.pop()
            if piece.n < 2 * k:
                clusters.append(list(piece.node_ids))
            else:
                cut, _ = sgp_cut(piece)
                stack.extend(piece.subgraph(c) for c in cut.clusters)
    part = Partition(_canonical(graph, clusters))
    _check_cover(graph, part.clusters)
    return part


def rsgp(graph: SimilarityGraph, k: int, time_limit: float | None = None) -> Partition:
    """Recursive spectral partitioning with exact finishing.

    Pieces with 3k <= N < 4k are finished by ip_partition; pieces with
    N >= 2k outside that window are cut again; pieces below 2k become final
    clusters.  All final cluster sizes land in [k, 2k-1].
    """
    if k < 2:
        raise DataFormatError("cluster size k must be >= 2")
    clusters: list[list] = []
    for comp in _split_components(graph, k, "rsgp"):
        stack = [graph.subgraph(comp)]
        while stack:
            piece = stack.pop()
            n = piece.n
            if 3 * k <= n < 4 * k:
                sub = ip_partition(piece, PartitionSpec(k=k), time_limit=time_limit)
                clusters.extend(list(c) for c in sub.clusters)
            elif n >= 2 * k:
                cut, _ = sgp_cut(piece)
                stack.extend(piece.subgraph(c) for c in cut.clusters)
            else:
                clusters.append(list(piece.node_ids))
    part = Partition(_canonical(graph, clusters))
    _check_cover(graph, part.clusters)
    return part


def quality(part: Partition, graph: SimilarityGraph, k: int, wall_time: float = 0.0) -> PartitionQuality:
    """Unbalance (total excess over k) and total intra-cluster edge weight."""
    covered = sorted(u for c in part.clusters for u in c)
    if covered != sorted(graph.node_ids):
        raise InfeasibleError("partition does not cover the graph")
    pos = {u: i for i, u in enumerate(graph.node_ids)}
    unbalance = sum(len(c) - k for c in part.clusters)
    intra = 0.0
    for cluster in part.clusters:
        sel = np.array([pos[u] for u in cluster], dtype=np.intp)
        intra += float(graph.weights[np.ix_(sel, sel)].sum()) / 2.0
    return PartitionQuality(unbalance=unbalance, intra_weight=intra, wall_time=wall_time)


# ---------------------------------------------------------------------------
# Exact partitioning by branch and bound
# ---------------------------------------------------------------------------


def ip_partition(
    graph: SimilarityGraph,
    spec: PartitionSpec,
    time_limit: float | None = None,
    node_cap: int = IP_NODE_CAP,
) -> Partition:
    """Minimum-total-intra-weight partition with cluster sizes in [m, m+1].

    m = floor(N / N_C) with N_C = spec.n_clusters or floor(N / spec.k).
    Nodes without an edge between them never share a cluster.  Exact unless
    the time limit fires, in which case the best incumbent is returned with
    optimal=False.
    """
    if graph.n > node_cap:
        raise InfeasibleError(f"ip_partition limited to {node_cap} nodes, got {graph.n}")
    comps = graph.components()
    if len(comps) > 1:
        if spec.n_clusters is not None:
            raise InfeasibleError("explicit n_clusters unsupported on a disconnected graph")
        clusters: list[list] = []
        optimal = True
        for comp in comps:
            sub = ip_partition(graph.subgraph(comp), spec, time_limit=time_limit, node_cap=node_cap)
            clusters.extend(list(c) for c in sub.clusters)
            optimal = optimal and bool(sub.optimal)
        part = Partition(_canonical(graph, clusters), optimal=optimal)
        _check_cover(graph, part.clusters)
        return part

    n = graph.n
    n_clusters = spec.n_clusters if spec.n_clusters is not None else n // spec.k
    if n_clusters < 1 or n_clusters * spec.k > n:
        raise InfeasibleError(f"cannot split {n} nodes into {n_clusters} clusters of >= {spec.k}")
    m = n // n_clusters
    solver = _ExactPartitioner(graph, n_clusters, m, time_limit)
    clusters, optimal = solver.solve()
    part = Partition(_canonical(graph, clusters), optimal=optimal)
    _check_cover(graph, part.clusters)
    for c in part.clusters:
        if not (m <= len(c) <= m + 1):
            raise InfeasibleError("cluster size outside [m, m+1]")
    return part


class _ExactPartitioner:
    """Depth-first branch and bound over sequential node-to-cluster moves.

    Symmetry is broken by the processing order: a node may only open the
    next unused cluster, so clusters are ordered by smallest contained
    index.  The admissible bound adds, for every unassigned node, half the
    sum of its m-1 cheapest incident edges.
    """

    CHECK_MASK = 0xFF

    def __init__(self, graph: SimilarityGraph, n_clusters: int, m: int, time_limit: float | None):
        self.g = graph
        self.w = graph.weights
        self.adj = graph.adjacency
        self.n = graph.n
        self.n_clusters = n_clusters
        self.m = m
        self.r_big = graph.n - m * n_clusters  # clusters of size m+1
        self.time_limit = time_limit
        self.deadline = None if time_limit is None else time.perf_counter() + time_limit
        self.expansions = 0
        self.timed_out = False
        # join cost / incompatibility counters, maintained incrementally
        self.join_cost = np.zeros((self.n, n_clusters))
        self.blocked = np.zeros((self.n, n_clusters), dtype=np.int32)
        self.members: list[list[int]] = [[] for _ in range(n_clusters)]
        self.assign = np.full(self.n, -1, dtype=np.int32)
        self.opened = 0
        self.big_used = 0
        self.min_fill = m * n_clusters
        # bound ingredient: half-sum of the m-1 cheapest incident edge weights
        need = max(m - 1, 0)
        lb = np.zeros(self.n)
        for u in range(self.n):
            incident = np.sort(self.w[u][self.adj[u]])
            if incident.size < need:
                lb[u] = math.inf  # u cannot sit in any cluster of size m
            else:
                lb[u] = incident[:need].sum()
        self.node_lb = 0.5 * lb
        self.lb_rest = float(self.node_lb.sum())
        self.best_cost = math.inf
        self.best_clusters: list[list[int]] | None = None

    def solve(self) -> tuple[list[list], bool]:
        if math.isinf(self.lb_rest):
            raise InfeasibleError("a node lacks enough neighbours for any cluster of size m")
        self._greedy_incumbent()
        try:
            self._dfs(0, 0.0)
        except _TimeUp:
            self.timed_out = True
        if self.best_clusters is None:
            raise InfeasibleError("no feasible partition under the adjacency constraints")
        ids = self.g.node_ids
        clusters = [[ids[u] for u in c] for c in self.best_clusters if c]
        return clusters, not self.timed_out

    # -- incumbent -----------------------------------------------------

    def _greedy_incumbent(self) -> None:
        """Nearest-feasible-cluster construction plus pairwise-swap polish."""
        sizes = self._greedy_sizes()
        if sizes is None:
            return
        labels = np.full(self.n, -1, dtype=np.int32)
        members: list[list[int]] = [[] for _ in sizes]
        for u in range(self.n):
            best_c, best_inc = -1, math.inf
            for c, cap in enumerate(sizes):
                mem = members[c]
                if len(mem) >= cap:
                    continue
                if not mem:
                    inc = 0.0
                elif all(self.adj[u, v] for v in mem):
                    inc = float(self.w[u, mem].sum())
                else:
                    continue
                if inc < best_inc:
                    best_c, best_inc = c, inc
            if best_c < 0:
                return  # adjacency dead end; leave incumbent to the search
            labels[u] = best_c
            members[best_c].append(u)
        self._polish(members)
        cost = sum(float(self.w[np.ix_(mem, mem)].sum()) / 2.0 for mem in members)
        self.best_cost = cost
        self.best_clusters = [list(mem) for mem in members]

    def _greedy_sizes(self) -> list[int] | None:
        return [self.m + 1] * self.r_big + [self.m] * (self.n_clusters - self.r_big)

    def _polish(self, members: list[list[int]]) -> None:
        """Hill-climb on single swaps between clusters until no improvement."""
        label = np.empty(self.n, dtype=np.int32)
        for c, mem in enumerate(members):
            label[mem] = c
        improved = True
        while improved:
            improved = False
            for u in range(self.n):
                for v in range(u + 1, self.n):
                    cu, cv = label[u], label[v]
                    if cu == cv:
                        continue
                    mem_u = [x for x in members[cu] if x != u]
                    mem_v = [x for x in members[cv] if x != v]
                    if not all(self.adj[v, x] for x in mem_u):
                        continue
                    if not all(self.adj[u, x] for x in mem_v):
                        continue
                    delta = (
                        float(self.w[v, mem_u].sum())
                        + float(self.w[u, mem_v].sum())
                        - float(self.w[u, mem_u].sum())
                        - float(self.w[v, mem_v].sum())
                    )
                    if delta < -1e-15:
                        members[cu].remove(u)
                        members[cv].remove(v)
                        members[cu].append(v)
                        members[cv].append(u)
                        label[u], label[v] = cv, cu
                        improved = True

    # -- search --------------------------------------------------------

    def _dfs(self, u: int, cost: float) -> None:
        self.expansions += 1
        if self.deadline is not None and (self.expansions & self.CHECK_MASK) == 0:
            if time.perf_counter() > self.deadline:
                raise _TimeUp
        if u == self.n:
            if cost < self.best_cost - 1e-12:
                self.best_cost = cost
                self.best_clusters = [list(mem) for mem in self.members]
            return
        lb_after = self.lb_rest - self.node_lb[u]
        if cost + lb_after >= self.best_cost - 1e-12:
            return
        joins = []
        for c in range(self.opened):
            size = len(self.members[c])
            if size >= self.m + 1:
                continue
            if size == self.m and self.big_used >= self.r_big:
                continue
            if self.blocked[u, c]:
                continue
            joins.append((float(self.join_cost[u, c]), c))
        joins.sort()
        for inc, c in joins:
            if cost + inc + lb_after >= self.best_cost - 1e-12:
                break  # joins are sorted; later ones only cost more
            if self._apply(u, c):
                self._dfs(u + 1, cost + inc)
                self._undo(u, c)
        if self.opened < self.n_clusters and cost + lb_after < self.best_cost - 1e-12:
            c = self.opened
            if self._apply(u, c):
                self._dfs(u + 1, cost)
                self._undo(u, c)

    def _apply(self, u: int, c: int) -> bool:
        new_cluster = c == self.opened
        size = len(self.members[c]) if not new_cluster else 0
        # capacity feasibility after the move
        opened = self.opened + (1 if new_cluster else 0)
        big_used = self.big_used + (1 if size == self.m else 0)
        min_fill = self.min_fill - (1 if size < self.m else 0)
        remaining = self.n - u - 1
        slack = remaining - min_fill
        if slack < 0 or slack > self.r_big - big_used:
            return False
        self.opened = opened
        self.big_used = big_used
        self.min_fill = min_fill
        self.members[c].append(u)
        self.assign[u] = c
        self.join_cost[:, c] += self.w[:, u]
        self.blocked[:, c] += ~self.adj[:, u]
        self.lb_rest -= self.node_lb[u]
        return True

    def _undo(self, u: int, c: int) -> None:
        self.members[c].pop()
        self.assign[u] = -1
        self.join_cost[:, c] -= self.w[:, u]
        self.blocked[:, c] -= ~self.adj[:, u]
        self.lb_rest += self.node_lb[u]
        size = len(self.members[c])
        if size == 0:
            self.opened -= 1
        if size == self.m:
            self.big_used -= 1
        else:
            self.min_fill += 1


class _TimeUp(Exception):
    pass


# ---------------------------------------------------------------------------
# Edge-list text format:  one "u v weight" line per edge
# ---------------------------------------------------------------------------


def read_edge_list(path) -> SimilarityGraph:
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 'u v weight'")
        try:
            edges.append((parts[0], parts[1], float(parts[2])))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: bad weight {parts[2]!r}") from exc
    if not edges:
        raise DataFormatError(f"{path}: no edges")
    return SimilarityGraph.from_edges(edges)


def write_edge_list(path, graph: SimilarityGraph) -> None:
    lines = []
    iu, ju = np.triu_indices(graph.n, k=1)
    for i, j in zip(iu, ju):
        if graph.adjacency[i, j]:
            lines.append(f"{graph.node_ids[i]} {graph.node_ids[j]} {graph.weights[i, j]!r}")
    Path(path).write_text("\n".join(lines) + "\n")
