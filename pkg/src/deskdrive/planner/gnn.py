"""Mean-aggregation message passing and the learned cost-to-goal heuristic.

Each layer maps node features ``H`` to ``relu(A H W^T + H B^T)`` where ``A``
averages over a node's undirected neighbourhood. Isolated nodes get a zero
neighbour aggregate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..tensor import OptimizerState, ShapeError, he_normal, sgd_step
from .graph import RoadGraph, grid_graph
from .search import astar, dijkstra

log = logging.getLogger(__name__)

N_FEATURES = 6


@dataclass
class GnnLayer:
    w_nbr: np.ndarray   # (out, in), applied to the neighbour mean
    w_self: np.ndarray  # (out, in), applied to the node's own features

    def __post_init__(self):
        self.w_nbr = np.asarray(self.w_nbr, dtype=np.float64)
        self.w_self = np.asarray(self.w_self, dtype=np.float64)
        if self.w_nbr.shape != self.w_self.shape or self.w_nbr.ndim != 2:
            raise ShapeError(f"w_nbr {self.w_nbr.shape} and w_self {self.w_self.shape} must be equal 2-D shapes")

    @property
    def in_dim(self) -> int:
        return self.w_nbr.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w_nbr.shape[0]


def mean_aggregator(graph: RoadGraph) -> np.ndarray:
    """Dense ``(n, n)`` matrix with ``A[v, u] = 1/|N(v)|`` for ``u`` in ``N(v)``."""
    n = graph.n_nodes
    a = np.zeros((n, n))
    for v, nb in enumerate(graph.neighbors):
        if nb:
            a[v, nb] = 1.0 / len(nb)
    return a


def gnn_layer_forward(graph, h: np.ndarray, layer: GnnLayer) -> np.ndarray:
    """One message-passing step. ``graph`` may be a RoadGraph or a precomputed aggregator."""
    a = mean_aggregator(graph) if isinstance(graph, RoadGraph) else graph
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != a.shape[0]:
        raise ShapeError(f"nodes: features {h.shape} do not match graph of {a.shape[0]} nodes")
    if h.shape[1] != layer.in_dim:
        raise ShapeError(f"in_dim: features have width {h.shape[1]}, layer expects {layer.in_dim}")
    return np.maximum((a @ h) @ layer.w_nbr.T + h @ layer.w_self.T, 0.0)


def node_features(graph: RoadGraph, goal: int, coord_scale: float = 1000.0,
                  time_scale: float = 10.0) -> np.ndarray:
    """Layer-0 features: x, y, mean incident travel time, mean incident density, goal dx, goal dy.

    Lengths are divided by ``coord_scale`` and times by ``time_scale``.
    """
    n = graph.n_nodes
    count = np.zeros(n)
    tt = np.zeros(n)
    dens = np.zeros(n)
    for col in (0, 1):
        ends = graph.edges[:, col]
        np.add.at(count, ends, 1.0)
        np.add.at(tt, ends, graph.travel_time)
        np.add.at(dens, ends, graph.density)
    safe = np.maximum(count, 1.0)
    delta = graph.coords[goal] - graph.coords
    return np.column_stack([
        graph.coords / coord_scale,
        tt / safe / time_scale,
        dens / safe,
        delta / coord_scale,
    ])


@dataclass
class HeuristicModel:
    """Stacked GNN layers plus a linear readout clamped at zero."""

    layers: list[GnnLayer]
    readout_w: np.ndarray
    readout_b: float = 0.0
    coord_scale: float = 1000.0
    time_scale: float = 10.0
    cost_scale: float = 100.0

    @classmethod
    def init(cls, rng: np.random.Generator, depth: int = 3, width: int = 16, **scales) -> "HeuristicModel":
        layers = []
        d = N_FEATURES
        for _ in range(depth):
            layers.append(GnnLayer(he_normal(rng, (width, d), 2 * d), he_normal(rng, (width, d), 2 * d)))
            d = width
        # positive bias keeps the clamped readout alive at the start of training
        return cls(layers, he_normal(rng, (d,), d) * 0.5, 1.0, **scales)

    @classmethod
    def zeros(cls, depth: int = 3, width: int = 16) -> "HeuristicModel":
        dims = [N_FEATURES] + [width] * depth
        layers = [GnnLayer(np.zeros((o, i)), np.zeros((o, i))) for i, o in zip(dims, dims[1:])]
        return cls(layers, np.zeros(width), 0.0)

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        for i, layer in enumerate(self.layers):
            p[f"gnn.{i}.w_nbr"] = layer.w_nbr
            p[f"gnn.{i}.w_self"] = layer.w_self
        p["gnn.readout.w"] = self.readout_w
        p["gnn.readout.b"] = np.array([self.readout_b])
        p["gnn.scales"] = np.array([self.coord_scale, self.time_scale, self.cost_scale])
        return p

    def set_params(self, p) -> None:
        for i, layer in enumerate(self.layers):
            layer.w_nbr = np.asarray(p[f"gnn.{i}.w_nbr"], dtype=np.float64)
            layer.w_self = np.asarray(p[f"gnn.{i}.w_self"], dtype=np.float64)
        self.readout_w = np.asarray(p["gnn.readout.w"], dtype=np.float64)
        self.readout_b = float(np.asarray(p["gnn.readout.b"]).reshape(-1)[0])
        if "gnn.scales" in p:
            self.coord_scale, self.time_scale, self.cost_scale = map(float, p["gnn.scales"])

    @classmethod
    def from_params(cls, p) -> "HeuristicModel":
        depth = sum(1 for k in p if k.startswith("gnn.") and k.endswith(".w_nbr"))
        m = cls.zeros(depth, int(np.asarray(p["gnn.readout.w"]).shape[0]))
        m.set_params(p)
        return m

    def trainable(self) -> dict[str, np.ndarray]:
        p = self.params()
        del p["gnn.scales"]
        return p

    # -- forward / backward ------------------------------------------

    def _forward(self, a, x):
        hs, zs = [x], []
        for layer in self.layers:
            z = (a @ hs[-1]) @ layer.w_nbr.T + hs[-1] @ layer.w_self.T
            zs.append(z)
            hs.append(np.maximum(z, 0.0))
        out = hs[-1] @ self.readout_w + self.readout_b
        return out, hs, zs

    def predict_scaled(self, a, x) -> np.ndarray:
        return np.maximum(self._forward(a, x)[0], 0.0)

    def loss_and_grads(self, a, x, target):
        """Mean squared error on scaled costs and its gradient per parameter."""
        out, hs, zs = self._forward(a, x)
        pred = np.maximum(out, 0.0)
        diff = pred - target
        n = len(target)
        loss = float(diff @ diff) / n
        g_out = np.where(out > 0, 2.0 * diff / n, 0.0)
        grads = {"gnn.readout.w": hs[-1].T @ g_out, "gnn.readout.b": np.array([g_out.sum()])}
        g_h = np.outer(g_out, self.readout_w)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g_z = g_h * (zs[i] > 0)
            agg = a @ hs[i]
            grads[f"gnn.{i}.w_nbr"] = g_z.T @ agg
            grads[f"gnn.{i}.w_self"] = g_z.T @ hs[i]
            if i:
                g_h = a.T @ (g_z @ layer.w_nbr) + g_z @ layer.w_self
        return loss, grads

    def estimate_costs(self, graph: RoadGraph, goal: int) -> np.ndarray:
        x = node_features(graph, goal, self.coord_scale, self.time_scale)
        return self.predict_scaled(mean_aggregator(graph), x) * self.cost_scale


def estimate_costs(graph: RoadGraph, goal: int, model: HeuristicModel) -> np.ndarray:
    """Per-node nonnegative cost-to-goal estimate in seconds."""
    return model.estimate_costs(graph, goal)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class PlannerConfig:
    depth: int = 3
    width: int = 16
    epochs: int = 60
    learning_rate: float = 5e-3
    momentum: float = 0.9
    train_graphs: int = 60
    val_graphs: int = 100
    goals_per_graph: int = 4
    min_side: int = 8
    max_side: int = 14
    eta: float = 1.0
    grid_side: int = 20


@dataclass
class HeuristicReport:
    train_error: float
    val_error: float
    baseline_error: float
    losses: list[float] = field(default_factory=list)
    cost_scale: float = 100.0

    @property
    def train_rmse(self) -> float:
        """Root of the last epoch's mean squared error, in seconds."""
        return float(np.sqrt(self.losses[-1]) * self.cost_scale) if self.losses else float("nan")


def cost_to_goal(graph: RoadGraph, goal: int) -> np.ndarray:
    return dijkstra(graph, goal, reverse=True)


def euclidean_heuristic(graph: RoadGraph, goal: int) -> np.ndarray:
    """Straight-line distance over the fastest edge speed; admissible baseline."""
    speed = max(graph.edge_length(k) / graph.weights[k] for k in range(graph.n_edges))
    return np.linalg.norm(graph.coords - graph.coords[goal], axis=1) / speed


def mean_relative_error(est: np.ndarray, truth: np.ndarray) -> float:
    ok = np.isfinite(truth) & (truth > 0)
    if not ok.any():
        return 0.0
    return float(np.mean(np.abs(est[ok] - truth[ok]) / truth[ok]))


def make_graphs(rng: np.random.Generator, count: int, cfg: PlannerConfig) -> list[RoadGraph]:
    out = []
    for _ in range(count):
        r, c = rng.integers(cfg.min_side, cfg.max_side + 1, size=2)
        out.append(grid_graph(int(r), int(c), rng))
    return out


@dataclass
class _Instance:
    a: np.ndarray
    x: np.ndarray
    target: np.ndarray
    truth: np.ndarray
    graph: RoadGraph
    goal: int


def _instances(graphs, goals_per_graph, rng, model) -> list[_Instance]:
    out = []
    for g in graphs:
        a = mean_aggregator(g)
        for goal in rng.choice(g.n_nodes, size=min(goals_per_graph, g.n_nodes), replace=False):
            goal = int(goal)
            truth = cost_to_goal(g, goal)
            target = np.where(np.isfinite(truth), truth, 0.0) / model.cost_scale
            x = node_features(g, goal, model.coord_scale, model.time_scale)
            out.append(_Instance(a, x, target, truth, g, goal))
    return out


def _eval_error(model, instances) -> float:
    errs = [mean_relative_error(model.predict_scaled(i.a, i.x) * model.cost_scale, i.truth)
            for i in instances]
    return float(np.mean(errs)) if errs else 0.0


class HeuristicTrainer:
    """Supervised regression of cost-to-goal against Dijkstra targets.

    Each epoch visits every (graph, goal) instance once in an order drawn
    from ``epoch_rng(epoch)``, so training can stop after any epoch and
    resume from a checkpoint with an identical continuation.
    """

    def __init__(self, graphs, cfg: PlannerConfig, rng: np.random.Generator, epoch_rng,
                 val_graphs=(), model: HeuristicModel | None = None):
        if not graphs:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.model = model or HeuristicModel.init(rng, cfg.depth, cfg.width)
        self.train = _instances(graphs, cfg.goals_per_graph, rng, self.model)
        self.val = _instances(val_graphs, 1, rng, self.model)
        self.epoch_rng = epoch_rng
        self.state = OptimizerState(cfg.learning_rate, cfg.momentum)
        self.epoch = 0
        self.losses: list[float] = []

    def full_loss(self) -> float:
        return float(np.mean([self.model.loss_and_grads(i.a, i.x, i.target)[0] for i in self.train]))

    def run_epoch(self) -> float:
        order = self.epoch_rng(self.epoch).permutation(len(self.train))
        total = 0.0
        for idx in order:
            inst = self.train[idx]
            loss, grads = self.model.loss_and_grads(inst.a, inst.x, inst.target)
            total += loss
            new = sgd_step(self.model.trainable(), grads, self.state)
            new["gnn.scales"] = self.model.params()["gnn.scales"]
            self.model.set_params(new)
        self.epoch += 1
        mean = total / len(order)
        self.losses.append(mean)
        return mean

    def fit(self, epochs: int | None = None) -> HeuristicModel:
        target = self.cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            loss = self.run_epoch()
            log.debug("planner epoch %d loss %.6f", self.epoch, loss)
        return self.model

    def report(self) -> HeuristicReport:
        base = [mean_relative_error(euclidean_heuristic(i.graph, i.goal), i.truth) for i in self.val]
        return HeuristicReport(_eval_error(self.model, self.train), _eval_error(self.model, self.val),
                               float(np.mean(base)) if base else 0.0, list(self.losses),
                               self.model.cost_scale)

    # checkpoint blocks: parameters, velocities and the epoch counter
    def state_blocks(self) -> dict[str, np.ndarray]:
        blocks = dict(self.model.params())
        for k, v in self.state.velocity.items():
            blocks[f"velocity.{k}"] = v
        blocks["trainer.epoch"] = np.array([float(self.epoch)])
        return blocks

    def load_state_blocks(self, blocks) -> None:
        self.model.set_params(blocks)
        self.state.velocity = {k[len("velocity."):]: np.array(v) for k, v in blocks.items()
                               if k.startswith("velocity.")}
        self.epoch = int(blocks["trainer.epoch"][0])


def train_heuristic(graphs, cfg: PlannerConfig, rng: np.random.Generator, epoch_rng=None,
                    val_graphs=()) -> tuple[HeuristicModel, HeuristicReport]:
    if epoch_rng is None:
        seeds = rng.integers(0, 2**63, size=cfg.epochs)
        epoch_rng = lambda e: np.random.default_rng(seeds[e])  # noqa: E731
    trainer = HeuristicTrainer(graphs, cfg, rng, epoch_rng, val_graphs)
    model = trainer.fit()
    return model, trainer.report()


@dataclass
class PlanQuality:
    ratios: list[float]             # learned-heuristic cost / optimal cost, per query
    expansions: list[tuple[int, int]]  # (learned, zero heuristic) expansions, per query

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios else 1.0

    def within(self, bound: float = 1.05) -> float:
        """Fraction of queries whose plan costs at most ``bound`` times the optimum."""
        return float(np.mean([r <= bound for r in self.ratios])) if self.ratios else 1.0

    @property
    def fewer_expansions(self) -> float:
        """Fraction of queries where the learned heuristic expands fewer nodes than plain Dijkstra order."""
        return float(np.mean([a < b for a, b in self.expansions])) if self.expansions else 1.0


def plan_quality(model: HeuristicModel, graphs, rng: np.random.Generator, eta: float = 1.0) -> PlanQuality:
    """One random source/goal query per graph, planned with and without the learned heuristic."""
    ratios, expansions = [], []
    for g in graphs:
        src, goal = (int(v) for v in rng.choice(g.n_nodes, size=2, replace=False))
        learned = astar(g, src, goal, model.estimate_costs(g, goal), eta=eta)
        plain = astar(g, src, goal)
        if not plain.found:
            continue
        ratios.append(learned.cost / plain.cost)
        expansions.append((learned.expansions, plain.expansions))
    return PlanQuality(ratios, expansions)
