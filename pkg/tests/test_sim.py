import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskdrive import sim
from deskdrive.planner.search import astar, dijkstra, replan

FIXTURES = Path(__file__).parent / "fixtures"
CFG = sim.EnvConfig()


def test_reset_deterministic():
    assert sim.reset(CFG, 7) == sim.reset(CFG, 7)
    assert sim.reset(CFG, 7) != sim.reset(CFG, 8)


def test_reset_without_obstacles():
    w = sim.reset(dataclasses.replace(CFG, n_static=0, n_moving=0), 3)
    assert w.obstacles() == [] and not w.occupancy.any()


def test_reset_never_starts_in_collision():
    cfg = dataclasses.replace(CFG, n_static=4, n_moving=2)
    assert not any(sim.collides(sim.reset(cfg, s), cfg) for s in range(1000))


def test_reset_impossible_placement():
    # an obstacle spanning the road at the start line always overlaps the ego
    cfg = dataclasses.replace(CFG, half_width=6.0, obstacle_size=(12.0, 12.0), obstacle_zone=(5.0, 5.0),
                              max_retries=20)
    with pytest.raises(sim.PlacementError):
        sim.reset(cfg, 0)
    with pytest.raises(ValueError):
        sim.EnvConfig(obstacle_size=(3.0, 2.0))


def test_keep_at_zero_speed():
    w = dataclasses.replace(sim.reset(CFG, 0), speed=0.0)
    w2, r, done = sim.step(w, sim.Action.KEEP, CFG)
    assert (w2.x, w2.y) == (w.x, w.y)
    assert r == sim.STEP_PENALTY and not done


def test_forced_goal():
    w = sim.reset(dataclasses.replace(CFG, n_static=0), 0)
    w = dataclasses.replace(w, x=w.goal[0] - 1.0, y=w.goal[1], heading=0.0, speed=1.0)
    w2, r, done = sim.step(w, sim.Action.ACCELERATE, CFG)
    assert done and w2.reached_goal
    assert r >= sim.GOAL_REWARD


def test_collision_precedes_goal():
    w = sim.reset(dataclasses.replace(CFG, n_static=0), 0)
    gx, gy = w.goal
    w = dataclasses.replace(w, x=gx - 1.0, y=gy, heading=0.0, speed=1.0,
                            static=((gx - 0.5, gy - 0.5, gx + 0.5, gy + 0.5),))
    w2, r, _ = sim.step(w, sim.Action.KEEP, CFG)
    assert w2.collided and not w2.reached_goal
    assert r < 0


def test_timeout():
    cfg = dataclasses.replace(CFG, horizon=3, n_static=0)
    w = dataclasses.replace(sim.reset(cfg, 0), speed=0.0)
    for _ in range(3):
        w, _, done = sim.step(w, sim.Action.KEEP, cfg)
    assert done and w.timed_out and w.flags() == "T"
    with pytest.raises(sim.TerminalStateError):
        sim.step(w, sim.Action.KEEP, cfg)


def _random_actions(seed, n=200):
    return np.random.default_rng(seed).integers(0, sim.N_ACTIONS, n).tolist()


def test_golden_trace():
    # pinned so the fixture only changes when the dynamics do
    cfg = sim.EnvConfig(dt=0.25, v_max=8.0, half_width=8.0, n_static=2, n_moving=1)
    trace = sim.rollout_trace(cfg, 2024, _random_actions(99))
    assert trace == sim.rollout_trace(cfg, 2024, _random_actions(99))
    assert trace == (FIXTURES / "golden_trace.txt").read_text()


def test_observe_empty_world():
    w = sim.reset(dataclasses.replace(CFG, n_static=0), 0)
    s = sim.observe(w, CFG)
    assert s.shape == (CFG.state_dim,) == (4 + 3 * 4 + 2,)
    assert not s[4:4 + 12].any()


def test_observe_goal_ahead():
    w = dataclasses.replace(sim.reset(CFG, 0), y=0.0, goal=(40.0, 0.0), heading=0.0)
    assert sim.observe(w, CFG)[-2] == 0.0
    assert sim.observe(w, CFG)[-1] == pytest.approx(35.0)


def test_observe_nearest_k_selection():
    cfg = dataclasses.replace(CFG, k_nearest=2)
    rects = ((20.0, -1.0, 22.0, 1.0),   # centre (21, 0): distance 16
             (10.0, 2.0, 12.0, 4.0),    # centre (11, 3): distance sqrt(36 + 9) = 6.708
             (8.0, -5.0, 10.0, -3.0))   # centre (9, -4): distance sqrt(16 + 16) = 5.657
    w = dataclasses.replace(sim.reset(dataclasses.replace(CFG, n_static=0), 0),
                            x=5.0, y=0.0, heading=0.0, static=rects)
    s = sim.observe(w, cfg)
    np.testing.assert_allclose(s[4:7], [4.0, -4.0, 1.0])
    np.testing.assert_allclose(s[7:10], [6.0, 3.0, 1.0])


def test_observe_ego_frame_rotation():
    w = dataclasses.replace(sim.reset(dataclasses.replace(CFG, n_static=0), 0), x=5.0, y=0.0,
                            heading=math.pi / 2, static=((9.0, -1.0, 11.0, 1.0),))
    s = sim.observe(w, CFG)
    np.testing.assert_allclose(s[4:6], [0.0, -5.0], atol=1e-12)


def test_observation_noise_hook():
    cfg = dataclasses.replace(CFG, obs_noise=0.1)
    w = sim.reset(cfg, 0)
    clean = sim.observe(w, CFG)
    noisy = sim.observe(w, cfg, np.random.default_rng(0))
    assert not np.array_equal(clean, noisy)
    assert np.array_equal(sim.observe(w, cfg), clean)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 4), min_size=1, max_size=80))
def test_step_invariants(seed, actions):
    cfg = dataclasses.replace(CFG, n_moving=1)
    w = sim.reset(cfg, seed)
    for a in actions:
        if w.done:
            break
        w2, _, _ = sim.step(w, a, cfg)
        assert sim.step(w, a, cfg)[0] == w2
        assert 0.0 <= w2.speed <= cfg.v_max
        assert -math.pi < w2.heading <= math.pi
        assert math.hypot(w2.x - w.x, w2.y - w.y) <= cfg.v_max * cfg.dt + 1e-9
        assert w2.collided == sim.collides(w2, cfg)
        assert sum([w2.collided, w2.reached_goal, w2.timed_out]) <= 1
        w = w2


def test_wrap_angle():
    assert sim.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert sim.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert sim.wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


# ---------------------------------------------------------------- obstacles and the planner view

def _graph_world():
    cfg = dataclasses.replace(CFG, n_static=0)
    return cfg, sim.reset(cfg, 0), sim.road_graph(cfg)


def test_inject_marks_cells_and_rejects_bad_rects():
    cfg, w, _ = _graph_world()
    w2 = sim.inject_obstacle(w, (30.0, -1.0, 32.0, 1.0), cfg)
    assert w2.occupancy.sum() == 4 and not w.occupancy.any()
    with pytest.raises(ValueError, match="ego"):
        sim.inject_obstacle(w, (4.0, -1.0, 6.0, 1.0), cfg)
    with pytest.raises(ValueError, match="outside"):
        sim.inject_obstacle(w, (58.0, 0.0, 61.0, 1.0), cfg)


def test_inject_far_from_path_keeps_plan():
    cfg, w, g = _graph_world()
    src, dst = sim.nearest_node(g, w.x, w.y), sim.nearest_node(g, *w.goal)
    plan = astar(g, src, dst)
    far = sim.inject_obstacle(w, (30.0, 4.4, 31.0, 4.9), cfg)
    blocked = sim.blocked_edges(far, g, cfg)
    assert not blocked & set(plan.edges)
    assert replan(g, plan, blocked, src).path == plan.path


def test_inject_on_unique_corridor_gives_no_path():
    cfg, w, g = _graph_world()
    src, dst = sim.nearest_node(g, w.x, w.y), sim.nearest_node(g, *w.goal)
    plan = astar(g, src, dst)
    wall = sim.inject_obstacle(w, (29.0, -cfg.half_width, 31.0, cfg.half_width), cfg)
    assert not replan(g, plan, sim.blocked_edges(wall, g, cfg), src).found


def test_inject_on_optimal_path_matches_dijkstra():
    cfg, w, g = _graph_world()
    src, dst = sim.nearest_node(g, w.x, w.y), sim.nearest_node(g, *w.goal)
    plan = astar(g, src, dst)
    mid = g.coords[plan.path[len(plan.path) // 2]]
    w2 = sim.inject_obstacle(w, (mid[0] - 1, mid[1] - 1, mid[0] + 1, mid[1] + 1), cfg)
    blocked = sim.blocked_edges(w2, g, cfg)
    assert blocked & set(plan.edges)
    new = replan(g, plan, blocked, src)
    assert new.cost == pytest.approx(dijkstra(g, src, g.blocked_weights(blocked))[dst], rel=1e-12)
    assert not blocked & set(new.edges)
