"""Shortest-path search: Dijkstra, A* and obstacle re-planning."""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .graph import RoadGraph


@dataclass
class PlanResult:
    path: list[int]
    cost: float
    expansions: int
    elapsed: float = 0.0
    edges: list[int] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return bool(self.path)


def dijkstra(graph: RoadGraph, source: int, weights=None, *, reverse: bool = False) -> np.ndarray:
    """Exact cost from ``source`` to every node (``inf`` when unreachable).

    With ``reverse=True`` edges are followed backwards, giving the cost of
    reaching ``source`` from every node.
    """
    w = graph.weights if weights is None else weights
    adj = graph.in_edges if reverse else graph.out_edges
    dist = np.full(graph.n_nodes, np.inf)
    dist[source] = 0.0
    done = np.zeros(graph.n_nodes, dtype=bool)
    pq = [(0.0, source)]
    while pq:
        d, u = heapq.heappop(pq)
        if done[u]:
            continue
        done[u] = True
        for v, k in adj[u]:
            nd = d + w[k]
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(pq, (nd, v))
    return dist


def _as_heuristic(heuristic, n):
    if heuristic is None:
        return None
    if callable(heuristic):
        return heuristic
    h = np.asarray(heuristic, dtype=np.float64)
    if h.shape != (n,):
        raise ValueError(f"heuristic must have one value per node ({n}), got shape {h.shape}")
    return h.tolist()


def astar(graph: RoadGraph, source: int, goal: int, heuristic=None, weights=None,
          *, eta: float = 1.0) -> PlanResult:
    """A* from ``source`` to ``goal``.

    ``heuristic`` is a per-node array or a callable ``node -> float`` and is
    scaled by ``eta``; ``None`` means zero (Dijkstra order). ``weights``
    defaults to ``graph.weights``; infinite weights mark closed edges. Ties
    on ``f`` prefer larger ``g``, then lower node id. A closed node is
    reopened when a cheaper route to it appears, so any admissible heuristic
    yields an optimal path. On failure the result has an empty path and
    infinite cost; with a consistent heuristic ``expansions`` is then the
    size of the reachable set.
    """
    n = graph.n_nodes
    for name, v in (("source", source), ("goal", goal)):
        if not 0 <= v < n:
            raise IndexError(f"{name} {v} not in graph of {n} nodes")
    t0 = time.perf_counter()
    w = (graph.weights if weights is None else np.asarray(weights)).tolist()
    h = _as_heuristic(heuristic, n)
    if h is None:
        hv = lambda v: 0.0  # noqa: E731
    elif callable(h):
        hv = lambda v: eta * h(v)  # noqa: E731
    else:
        hv = lambda v: eta * h[v]  # noqa: E731
    adj = graph.out_edges

    g = [math.inf] * n
    parent = [-1] * n
    parent_edge = [-1] * n
    closed = [False] * n
    g[source] = 0.0
    pq = [(hv(source), -0.0, source)]
    expansions = 0
    while pq:
        _, neg_g, u = heapq.heappop(pq)
        if closed[u] or -neg_g > g[u]:
            continue
        closed[u] = True
        expansions += 1
        if u == goal:
            break
        gu = g[u]
        for v, k in adj[u]:
            wk = w[k]
            if wk == math.inf:
                continue
            ng = gu + wk
            if ng < g[v]:
                g[v] = ng
                closed[v] = False
                parent[v] = u
                parent_edge[v] = k
                heapq.heappush(pq, (ng + hv(v), -ng, v))

    elapsed = time.perf_counter() - t0
    if not closed[goal]:
        return PlanResult([], math.inf, expansions, elapsed)
    path, edges = [goal], []
    while path[-1] != source:
        edges.append(parent_edge[path[-1]])
        path.append(parent[path[-1]])
    path.reverse()
    edges.reverse()
    cost = 0.0
    for k in edges:
        cost += w[k]
    return PlanResult(path, cost, expansions, elapsed, edges)


def replan(graph: RoadGraph, current: PlanResult, blocked, position: int, heuristic=None,
           *, goal: int | None = None, eta: float = 1.0) -> PlanResult:
    """Close ``blocked`` edges and search again from ``position``.

    ``blocked`` holds edge indices or ``(u, v)`` pairs. The graph itself is
    not modified; a blocked copy of the weight vector is used instead.
    """
    if current.found:
        if position not in current.path:
            raise ValueError(f"position {position} is not on the current path")
        goal = current.path[-1] if goal is None else goal
    elif goal is None:
        raise ValueError("goal required when the current plan is empty")
    t0 = time.perf_counter()
    w = graph.blocked_weights(blocked)
    result = astar(graph, position, goal, heuristic, w, eta=eta)
    result.elapsed = time.perf_counter() - t0
    return result
