"""Exact ground truth for value functions on discrete deterministic MDPs.

Shortest-path costs on the dynamics graph equal the negated optimal
goal-conditioned values, so every learned distance can be scored against
an exact oracle. Also houses the constructions used as executable theory
checks: any quasimetric is the optimal value of some MDP (complete-graph
construction), and every quasimetric feasible for the local transition
constraints is dominated entrywise by the shortest-path distances.
"""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import envs
from .envs import GridWorldSpec, TransitionDataset


@dataclass
class DiscreteMdpGraph:
    n: int
    edge_u: np.ndarray  # (E,) int
    edge_v: np.ndarray  # (E,) int
    edge_cost: np.ndarray  # (E,) float, >= 0
    node_keys: list = field(default_factory=list)  # index -> hashable state key
    key_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.edge_cost < 0) or not np.all(np.isfinite(self.edge_cost)):
            raise ValueError("edge costs must be finite and >= 0")

    def reverse_adjacency(self):
        """CSR-style (indptr, sources, costs) of the edge-reversed graph."""
        order = np.argsort(self.edge_v, kind="stable")
        v_sorted = self.edge_v[order]
        indptr = np.searchsorted(v_sorted, np.arange(self.n + 1))
        return indptr, self.edge_u[order], self.edge_cost[order]


def shortest_paths(graph: DiscreteMdpGraph, goals) -> np.ndarray:
    """Distance-to-goal column: least cost from every node into `goals`.

    `goals` is a node index or an iterable of node indices (a goal set:
    the distance is to the nearest member). Dijkstra on the reversed
    graph; unreachable nodes get +inf.
    """
    if np.isscalar(goals):
        goals = [int(goals)]
    indptr, src, cost = graph.reverse_adjacency()
    dist = np.full(graph.n, np.inf)
    heap = []
    for g in goals:
        dist[g] = 0.0
        heapq.heappush(heap, (0.0, int(g)))
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for i in range(indptr[u], indptr[u + 1]):
            w = src[i]
            nd = d + cost[i]
            if nd < dist[w]:
                dist[w] = nd
                heapq.heappush(heap, (nd, int(w)))
    return dist


def all_pairs_shortest_paths(graph: DiscreteMdpGraph) -> np.ndarray:
    """D[u, v] = least cost u -> v, via one search per goal column."""
    D = np.empty((graph.n, graph.n))
    for g in range(graph.n):
        D[:, g] = shortest_paths(graph, g)
    return D


def floyd_warshall(costs: np.ndarray) -> np.ndarray:
    """Brute-force all-pairs shortest paths; the designated oracle for
    cross-checking the label-setting search."""
    D = np.array(costs, dtype=np.float64)
    n = D.shape[0]
    for k in range(n):
        np.minimum(D, D[:, k, None] + D[None, k, :], out=D)
    return D


def graph_cost_matrix(graph: DiscreteMdpGraph) -> np.ndarray:
    """Direct-edge cost matrix (inf off-edges, 0 diagonal)."""
    C = np.full((graph.n, graph.n), np.inf)
    np.fill_diagonal(C, 0.0)
    np.minimum.at(C, (graph.edge_u, graph.edge_v), graph.edge_cost)
    return C


def check_quasimetric(D: np.ndarray, slack: float = 0.0) -> list[tuple]:
    """All quasimetric-axiom violations of a distance matrix.

    Returns tuples ('diag', i), ('neg', i, j), or ('tri', i, j, k) where
    D[i,k] > D[i,j] + D[j,k] + slack. Empty list means D is a
    quasimetric within the slack.
    """
    D = np.asarray(D, dtype=np.float64)
    out: list[tuple] = []
    for i in np.flatnonzero(D.diagonal() != 0.0):
        out.append(("diag", int(i)))
    for i, j in zip(*np.nonzero(D < 0)):
        out.append(("neg", int(i), int(j)))
    with np.errstate(invalid="ignore"):
        # via[i, j, k] = D[i,j] + D[j,k]
        via = D[:, :, None] + D[None, :, :]
        bad = D[:, None, :] > via + slack
    for i, j, k in zip(*np.nonzero(bad)):
        out.append(("tri", int(i), int(j), int(k)))
    return out


def mdp_from_quasimetric(D: np.ndarray) -> DiscreteMdpGraph:
    """Complete graph with edge cost D[u, v]: the MDP whose optimal
    goal-conditioned values reproduce D exactly."""
    viol = check_quasimetric(D)
    if viol:
        raise ValueError(f"not a quasimetric: {viol[:3]} ...")
    n = D.shape[0]
    u, v = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = u != v
    return DiscreteMdpGraph(n, u[mask], v[mask], D[mask].astype(np.float64))


def minplus_closure(costs: np.ndarray) -> np.ndarray:
    """All-pairs shortest paths of a complete cost matrix; canonical
    generator of valid quasimetrics."""
    costs = np.asarray(costs, dtype=np.float64)
    if np.any(costs < 0):
        raise ValueError("costs must be >= 0")
    if np.any(np.diagonal(costs) != 0):
        raise ValueError("diagonal must be zero")
    return floyd_warshall(costs)


def feasible_quasimetric_sample(
    d_star: np.ndarray, graph: DiscreteMdpGraph, seed: int
) -> np.ndarray:
    """Random quasimetric satisfying d(u,v) <= cost(u,v) on every graph
    edge; entrywise dominated by the shortest-path matrix d_star."""
    rng = np.random.default_rng(seed)
    C = np.full((graph.n, graph.n), np.inf)
    np.fill_diagonal(C, 0.0)
    gamma = rng.uniform(0.0, 1.0, size=len(graph.edge_u))
    np.minimum.at(C, (graph.edge_u, graph.edge_v), graph.edge_cost * gamma)
    d = floyd_warshall(C)
    assert d.shape == d_star.shape
    return d


# ---- graph builders ----


def mountaincar_graph(bins: int, goal_edge_cost: float = 0.0) -> DiscreteMdpGraph:
    """Full-dynamics graph over the discretized grid plus the goal token.

    Node index = pos_bin * bins + vel_bin; the token is the last node.
    Goal-set states get a goal_edge_cost edge to the token (0 for the
    exact oracle).
    """
    pos = np.linspace(envs.POS_MIN, envs.POS_MAX, bins)
    vel = np.linspace(envs.VEL_MIN, envs.VEL_MAX, bins)
    P, V = np.meshgrid(pos, vel, indexing="ij")
    p_flat, v_flat = P.ravel(), V.ravel()
    n = bins * bins
    token = n
    eu, ev, ec = [], [], []
    for a in range(envs.MC_ACTIONS):
        np_, nv = envs.mountain_car_step_batch(p_flat, v_flat, np.full(n, a))
        np_, nv = envs.discretize_state(np_, nv, bins)
        ip = np.rint((np_ - envs.POS_MIN) / (envs.POS_MAX - envs.POS_MIN) * (bins - 1)).astype(int)
        iv = np.rint((nv - envs.VEL_MIN) / (envs.VEL_MAX - envs.VEL_MIN) * (bins - 1)).astype(int)
        eu.append(np.arange(n))
        ev.append(ip * bins + iv)
        ec.append(np.ones(n))
    goal_mask = (p_flat >= 0.5) & (v_flat >= 0.0)
    gidx = np.flatnonzero(goal_mask)
    eu.append(gidx)
    ev.append(np.full(len(gidx), token))
    ec.append(np.full(len(gidx), float(goal_edge_cost)))
    keys = [(int(i // bins), int(i % bins)) for i in range(n)] + ["goal_token"]
    g = DiscreteMdpGraph(
        n + 1, np.concatenate(eu), np.concatenate(ev), np.concatenate(ec), keys,
        {k: i for i, k in enumerate(keys)},
    )
    return g


def mountaincar_node_index(obs: np.ndarray, bins: int) -> int:
    """Map an augmented observation to its graph node index."""
    obs = np.asarray(obs)
    if obs[2] >= 0.5:
        return bins * bins
    ip = int(round((obs[0] - envs.POS_MIN) / (envs.POS_MAX - envs.POS_MIN) * (bins - 1)))
    iv = int(round((obs[1] - envs.VEL_MIN) / (envs.VEL_MAX - envs.VEL_MIN) * (bins - 1)))
    return ip * bins + iv


def gridworld_graph(spec: GridWorldSpec) -> DiscreteMdpGraph:
    cells = spec.cells()
    index = {c: i for i, c in enumerate(cells)}
    eu, ev, ec = [], [], []
    for c in cells:
        for a in range(envs.GRID_ACTIONS):
            nxt, _ = envs.gridworld_step(spec, c, a)
            eu.append(index[c])
            ev.append(index[nxt])
            ec.append(1.0)
    return DiscreteMdpGraph(
        len(cells), np.array(eu), np.array(ev), np.array(ec), cells, index
    )


def gridworld_node_indexer(spec: GridWorldSpec):
    """Observation -> node index function matching gridworld_graph."""
    index = {c: i for i, c in enumerate(spec.cells())}

    def node_index(obs: np.ndarray) -> int:
        x = int(round(float(obs[0]) * spec.width))
        y = int(round(float(obs[1]) * spec.height))
        return index[(x, y)]

    return node_index


def dataset_graph(dataset: TransitionDataset, node_index_fn, n_nodes: int | None = None) -> DiscreteMdpGraph:
    """Graph restricted to states and transitions observed in a dataset.

    node_index_fn maps an observation row to a full-graph node index; the
    returned graph reuses those indices (node count = full graph size),
    so its distance columns align with the full-dynamics ones.
    """
    eu, ev, ec = [], [], []
    seen = set()
    n = 0
    for s, sn, r in zip(dataset.s, dataset.s_next, dataset.r):
        u = node_index_fn(s)
        v = node_index_fn(sn)
        n = max(n, u + 1, v + 1)
        key = (u, v)
        if key in seen:
            continue
        seen.add(key)
        eu.append(u)
        ev.append(v)
        ec.append(float(-r))
    if n_nodes is not None:
        n = n_nodes
    return DiscreteMdpGraph(
        n,
        np.array(eu, dtype=np.int64),
        np.array(ev, dtype=np.int64),
        np.array(ec, dtype=np.float64),
    )


# ---- metrics & export ----


@dataclass
class ValueErrorReport:
    mae: float
    mean_relative_error: float
    spearman: float
    degenerate: bool
    n_pairs: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mean_relative_error": self.mean_relative_error,
            "spearman": self.spearman,
            "degenerate": self.degenerate,
            "n_pairs": self.n_pairs,
        }


def value_error_report(
    model_distances: np.ndarray, d_star: np.ndarray, mask: np.ndarray
) -> ValueErrorReport:
    """MAE / mean relative error / Spearman over masked (finite) pairs."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    m = np.asarray(model_distances, dtype=np.float64)[mask]
    d = np.asarray(d_star, dtype=np.float64)[mask]
    mae = float(np.mean(np.abs(m - d)))
    pos = d > 0
    rel = float(np.mean(np.abs(m[pos] - d[pos]) / d[pos])) if pos.any() else 0.0
    if np.all(m == m[0]) or np.all(d == d[0]):
        return ValueErrorReport(mae, rel, 0.0, True, int(mask.sum()))
    rho = stats.spearmanr(m, d).statistic
    if not np.isfinite(rho):
        return ValueErrorReport(mae, rel, 0.0, True, int(mask.sum()))
    return ValueErrorReport(mae, rel, float(rho), False, int(mask.sum()))


def save_distance_csv(path: str, grid: np.ndarray) -> None:
    """CSV grid, 'inf' for unreachable; row = source, column = goal."""
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for row in np.atleast_2d(grid):
            f.write(",".join("inf" if not np.isfinite(x) else f"{x:.6g}" for x in row))
            f.write("\n")
    os.replace(tmp, path)
