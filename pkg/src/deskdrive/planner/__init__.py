"""Road-network planning with a learned A* heuristic."""

from .graph import RoadGraph, grid_graph, load_graph, random_graph, save_graph
from .gnn import (GnnLayer, HeuristicModel, PlanQuality, PlannerConfig, estimate_costs, gnn_layer_forward,
                  plan_quality, train_heuristic)
from .search import PlanResult, astar, dijkstra, replan

__all__ = [
    "RoadGraph", "grid_graph", "random_graph", "load_graph", "save_graph",
    "GnnLayer", "HeuristicModel", "PlannerConfig", "estimate_costs", "gnn_layer_forward",
    "train_heuristic", "PlanQuality", "plan_quality", "PlanResult", "astar", "dijkstra", "replan",
]
