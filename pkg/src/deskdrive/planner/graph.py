"""Road graphs: storage, generators and the line-oriented text format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Directed road network.

    ``coords`` is ``(n, 2)`` in metres; edge ``k`` runs ``edges[k, 0] -> edges[k, 1]``
    with ``travel_time[k]`` seconds and ``density[k]`` in [0, 1].
    """

    coords: np.ndarray
    edges: np.ndarray
    travel_time: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        tt = np.asarray(self.travel_time, dtype=np.float64).reshape(-1)
        dens = np.asarray(self.density, dtype=np.float64).reshape(-1)
        n = coords.shape[0]
        if not (edges.shape[0] == tt.shape[0] == dens.shape[0]):
            raise ValueError("edges, travel_time and density must have equal length")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError(f"edge endpoint outside node range 0..{n - 1}")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        if np.any(~(tt > 0)) or not np.all(np.isfinite(tt)):
            raise ValueError("travel_time must be positive and finite")
        if np.any((dens < 0) | (dens > 1)):
            raise ValueError("traffic density must lie in [0, 1]")
        for name, arr in (("coords", coords), ("edges", edges), ("travel_time", tt), ("density", dens)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @cached_property
    def weights(self) -> np.ndarray:
        """Edge cost ``travel_time * (1 + density)``."""
        w = self.travel_time * (1.0 + self.density)
        w.setflags(write=False)
        return w

    @cached_property
    def out_edges(self) -> list[list[tuple[int, int]]]:
        """Per node, ``(target, edge_index)`` pairs in edge order."""
        adj = [[] for _ in range(self.n_nodes)]
        for k, (u, v) in enumerate(self.edges.tolist()):
            adj[u].append((v, k))
        return adj

    @cached_property
    def in_edges(self) -> list[list[tuple[int, int]]]:
        adj = [[] for _ in range(self.n_nodes)]
        for k, (u, v) in enumerate(self.edges.tolist()):
            adj[v].append((u, k))
        return adj

    @cached_property
    def neighbors(self) -> list[list[int]]:
        """Undirected neighbourhood (in- plus out-neighbours), sorted by id."""
        nb = [set() for _ in range(self.n_nodes)]
        for u, v in self.edges.tolist():
            nb[u].add(v)
            nb[v].add(u)
        return [sorted(s) for s in nb]

    def edge_ids(self, u: int, v: int) -> list[int]:
        return [k for t, k in self.out_edges[u] if t == v]

    def edge_length(self, k: int) -> float:
        a, b = self.coords[self.edges[k]]
        return float(math.hypot(*(b - a)))

    def path_cost(self, path, weights=None) -> float:
        """Sum of the cheapest edge weight between consecutive path nodes."""
        w = self.weights if weights is None else weights
        total = 0.0
        for u, v in zip(path, path[1:]):
            ids = self.edge_ids(u, v)
            if not ids:
                raise ValueError(f"no edge {u} -> {v}")
            total += min(w[k] for k in ids)
        return total

    def blocked_weights(self, blocked) -> np.ndarray:
        """Copy of :attr:`weights` with the given edges set to infinity.

        ``blocked`` holds edge indices or ``(u, v)`` pairs.
        """
        w = np.array(self.weights)
        for e in blocked:
            if isinstance(e, (tuple, list)):
                w[self.edge_ids(*e)] = np.inf
            else:
                w[int(e)] = np.inf
        return w


# ----------------------------------------------------------------------
# generators
# ----------------------------------------------------------------------

def grid_graph(rows: int, cols: int, rng: np.random.Generator | None = None, *,
               spacing: float = 100.0, jitter: float = 0.2, chord_fraction: float = 0.1,
               speed_range=(8.0, 16.0), bidirectional: bool = True) -> RoadGraph:
    """Perturbed grid plus random diagonal chords.

    Node ``r * cols + c`` sits near ``(c * spacing, r * spacing)``. Travel
    time is edge length over a random speed; density is uniform in [0, 1].
    With ``rng=None`` the grid is regular, speeds are the range midpoint and
    density is zero.
    """
    n = rows * cols
    xs, ys = np.meshgrid(np.arange(cols) * spacing, np.arange(rows) * spacing)
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if rng is not None and jitter:
        coords = coords + rng.uniform(-jitter, jitter, coords.shape) * spacing

    pairs = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                pairs.append((v, v + 1))
            if r + 1 < rows:
                pairs.append((v, v + cols))
    if rng is not None and chord_fraction > 0 and rows > 1 and cols > 1:
        cells = [(r, c) for r in range(rows - 1) for c in range(cols - 1)]
        k = int(round(chord_fraction * len(cells)))
        for idx in rng.choice(len(cells), size=k, replace=False):
            r, c = cells[idx]
            if rng.random() < 0.5:
                pairs.append((r * cols + c, (r + 1) * cols + c + 1))
            else:
                pairs.append((r * cols + c + 1, (r + 1) * cols + c))

    edges = []
    for u, v in pairs:
        edges.append((u, v))
        if bidirectional:
            edges.append((v, u))
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    lengths = np.linalg.norm(coords[edges[:, 1]] - coords[edges[:, 0]], axis=1)
    if rng is None:
        speed = np.full(len(edges), 0.5 * sum(speed_range))
        density = np.zeros(len(edges))
    else:
        speed = rng.uniform(*speed_range, size=len(edges))
        density = rng.uniform(0.0, 1.0, size=len(edges))
    return RoadGraph(coords, edges, lengths / speed, density)


def random_graph(n: int, rng: np.random.Generator, edge_prob: float = 0.3,
                 max_weight: float = 10.0) -> RoadGraph:
    """Erdos-Renyi style directed graph with random positive edge times."""
    coords = rng.uniform(0, 1000, size=(n, 2))
    mask = rng.random((n, n)) < edge_prob
    np.fill_diagonal(mask, False)
    edges = np.argwhere(mask)
    tt = rng.uniform(0.1, max_weight, size=len(edges))
    density = rng.uniform(0, 1, size=len(edges))
    return RoadGraph(coords, edges, tt, density)


# ----------------------------------------------------------------------
# text format
# ----------------------------------------------------------------------

def format_graph(graph: RoadGraph) -> str:
    lines = [f"nodes {graph.n_nodes} edges {graph.n_edges}"]
    for i, (x, y) in enumerate(graph.coords.tolist()):
        lines.append(f"{i} {x!r} {y!r}")
    for (u, v), t, d in zip(graph.edges.tolist(), graph.travel_time.tolist(), graph.density.tolist()):
        lines.append(f"{u} {v} {t!r} {d!r}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> RoadGraph:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GraphFormatError("empty graph file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "nodes" or head[2] != "edges":
        raise GraphFormatError(f"bad header: {lines[0]!r}")
    n, m = int(head[1]), int(head[3])
    if len(lines) != 1 + n + m:
        raise GraphFormatError(f"expected {n} node and {m} edge lines, got {len(lines) - 1} lines")
    coords = np.zeros((n, 2))
    for ln in lines[1:1 + n]:
        parts = ln.split()
        if len(parts) != 3:
            raise GraphFormatError(f"bad node line: {ln!r}")
        i = int(parts[0])
        if not 0 <= i < n:
            raise GraphFormatError(f"node id {i} outside 0..{n - 1}")
        coords[i] = float(parts[1]), float(parts[2])
    edges, tt, dens = [], [], []
    for ln in lines[1 + n:]:
        parts = ln.split()
        if len(parts) != 4:
            raise GraphFormatError(f"bad edge line: {ln!r}")
        edges.append((int(parts[0]), int(parts[1])))
        tt.append(float(parts[2]))
        dens.append(float(parts[3]))
    return RoadGraph(coords, np.array(edges, dtype=np.int64).reshape(-1, 2), tt, dens)


def save_graph(graph: RoadGraph, path) -> None:
    Path(path).write_text(format_graph(graph))


def load_graph(path) -> RoadGraph:
    return parse_graph(Path(path).read_text())


def save_path(nodes, path) -> None:
    Path(path).write_text("".join(f"{v}\n" for v in nodes))


def load_path(path) -> list[int]:
    return [int(ln) for ln in Path(path).read_text().split()]
