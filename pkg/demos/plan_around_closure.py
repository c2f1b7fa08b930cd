"""Plan across a random road grid, close a road on the route, and replan.

Trains the learned heuristic on small grids first (default settings, a few
seconds), then compares both A* variants on one larger query.

    python demos/plan_around_closure.py
"""

import numpy as np

from deskdrive.planner import PlannerConfig, astar, grid_graph, replan, train_heuristic
from deskdrive.planner.gnn import make_graphs

rng = np.random.default_rng(7)
cfg = PlannerConfig()
model, report = train_heuristic(make_graphs(rng, cfg.train_graphs, cfg), cfg, rng,
                                val_graphs=make_graphs(rng, 20, cfg))
print(f"held-out relative error {report.val_error:.3f} (straight-line baseline {report.baseline_error:.3f})")

g = grid_graph(20, 20, np.random.default_rng(1))
goal = g.n_nodes - 1
h = model.estimate_costs(g, goal)

plain = astar(g, 0, goal)
learned = astar(g, 0, goal, h)
print(f"zero heuristic:    cost {plain.cost:.2f} s, {plain.expansions} expansions")
print(f"learned heuristic: cost {learned.cost:.2f} s, {learned.expansions} expansions")

# close the road segment halfway along the route and replan from the node before it
k = len(learned.edges) // 2
here = learned.path[k]
detour = replan(g, learned, {learned.edges[k]}, here, h)
print(f"closure on edge {learned.edges[k]}: replanned from node {here} in {1e3 * detour.elapsed:.2f} ms, "
      f"remaining cost {detour.cost:.2f} s")
