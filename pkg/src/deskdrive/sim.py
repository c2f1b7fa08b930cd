"""Deterministic 2-D straight-road driving world.

The road runs along +x from ``x = 0`` to ``x = cfg.length`` with edges at
``y = +-cfg.half_width``. The ego vehicle is a disc of radius
``cfg.ego_radius``; obstacles are axis-aligned rectangles, either static or
moving at constant velocity. Leaving the road counts as a collision.

A world is a value: :func:`step` and :func:`inject_obstacle` return new
worlds and never modify their input.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np


class Action(enum.IntEnum):
    ACCELERATE = 0
    BRAKE = 1
    STEER_LEFT = 2
    STEER_RIGHT = 3
    KEEP = 4


N_ACTIONS = len(Action)

GOAL_REWARD = 10.0
COLLISION_REWARD = -10.0
STEP_PENALTY = -0.01
PROGRESS_WEIGHT = 0.1


class PlacementError(RuntimeError):
    pass


class TerminalStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.25
    v_max: float = 8.0
    accel: float = 3.0          # m/s^2 applied by accelerate/brake
    steer_rate: float = 1.0     # rad/s applied by steer_left/right
    horizon: int = 500
    length: float = 60.0
    half_width: float = 8.0
    ego_radius: float = 1.0
    start_speed: float = 5.0
    goal_radius: float = 2.5
    n_static: int = 2
    n_moving: int = 0
    obstacle_size: tuple[float, float] = (2.0, 3.0)
    obstacle_speed: float = 2.0
    obstacle_zone: tuple[float, float] = (15.0, 45.0)
    cell_size: float = 1.0
    k_nearest: int = 4
    obs_noise: float = 0.0
    max_retries: int = 1000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.obstacle_size[0] > self.obstacle_size[1]:
            raise ValueError("obstacle_size range is inverted")

    @property
    def state_dim(self) -> int:
        return 4 + 3 * self.k_nearest + 2


Rect = tuple[float, float, float, float]  # x_min, y_min, x_max, y_max


@dataclass(frozen=True, eq=False)
class WorldState:
    x: float
    y: float
    heading: float
    speed: float
    acceleration: float
    static: tuple[Rect, ...]
    moving: tuple[tuple[Rect, float, float], ...]  # rectangle, vx, vy
    goal: tuple[float, float]
    occupancy: np.ndarray = field(repr=False)
    steps: int = 0
    collided: bool = False
    reached_goal: bool = False
    timed_out: bool = False

    @property
    def done(self) -> bool:
        return self.collided or self.reached_goal or self.timed_out

    def obstacles(self) -> list[Rect]:
        """All rectangles, static first then moving, in id order."""
        return list(self.static) + [r for r, _, _ in self.moving]

    def key(self) -> tuple:
        return (self.x, self.y, self.heading, self.speed, self.acceleration, self.static,
                self.moving, self.goal, self.occupancy.tobytes(), self.steps, self.collided,
                self.reached_goal, self.timed_out)

    def __eq__(self, other):
        return isinstance(other, WorldState) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def flags(self) -> str:
        return "C" if self.collided else "G" if self.reached_goal else "T" if self.timed_out else "-"


# ----------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------

def wrap_angle(a: float) -> float:
    """Map to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def disc_hits_rect(cx: float, cy: float, r: float, rect: Rect) -> bool:
    nx = min(max(cx, rect[0]), rect[2])
    ny = min(max(cy, rect[1]), rect[3])
    return (cx - nx) ** 2 + (cy - ny) ** 2 < r * r


def collides(world: WorldState, cfg: EnvConfig) -> bool:
    """Pure geometric check of the ego disc against the road edges and every obstacle."""
    r = cfg.ego_radius
    if world.x - r < 0 or world.x + r > cfg.length or abs(world.y) + r > cfg.half_width:
        return True
    return any(disc_hits_rect(world.x, world.y, r, rect) for rect in world.obstacles())


def _grid_shape(cfg: EnvConfig) -> tuple[int, int]:
    return (int(math.ceil(2 * cfg.half_width / cfg.cell_size)), int(math.ceil(cfg.length / cfg.cell_size)))


def _mark(occ: np.ndarray, rect: Rect, cfg: EnvConfig) -> None:
    rows, cols = occ.shape
    c0 = max(int(math.floor(rect[0] / cfg.cell_size)), 0)
    c1 = min(int(math.ceil(rect[2] / cfg.cell_size)), cols)
    r0 = max(int(math.floor((rect[1] + cfg.half_width) / cfg.cell_size)), 0)
    r1 = min(int(math.ceil((rect[3] + cfg.half_width) / cfg.cell_size)), rows)
    occ[r0:r1, c0:c1] = True


def occupied(world: WorldState, cfg: EnvConfig, x: float, y: float) -> bool:
    rows, cols = world.occupancy.shape
    c = int(math.floor(x / cfg.cell_size))
    r = int(math.floor((y + cfg.half_width) / cfg.cell_size))
    return 0 <= r < rows and 0 <= c < cols and bool(world.occupancy[r, c])


# ----------------------------------------------------------------------
# dynamics
# ----------------------------------------------------------------------

def reset(cfg: EnvConfig, seed) -> WorldState:
    """Place ego, goal and obstacles deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.obstacle_size
    zx0, zx1 = cfg.obstacle_zone
    if zx0 > zx1:
        raise PlacementError("obstacle_zone is inverted")
    ego = (5.0, 0.0)
    goal = (cfg.length - 5.0, float(rng.uniform(-2.0, 2.0)))
    clearance = cfg.ego_radius + 2.0

    def place():
        for _ in range(cfg.max_retries):
            w, h = rng.uniform(lo, hi, size=2)
            cx = rng.uniform(zx0, zx1)
            cy = rng.uniform(-cfg.half_width + h / 2, cfg.half_width - h / 2)
            rect = (float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2))
            if disc_hits_rect(*ego, clearance, rect) or disc_hits_rect(*goal, cfg.goal_radius + 1.0, rect):
                continue
            return rect
        raise PlacementError(f"could not place an obstacle in {cfg.max_retries} tries")

    static = tuple(place() for _ in range(cfg.n_static))
    moving = []
    for _ in range(cfg.n_moving):
        rect = place()
        angle = rng.uniform(-math.pi, math.pi)
        moving.append((rect, cfg.obstacle_speed * math.cos(angle), cfg.obstacle_speed * math.sin(angle)))
    occ = np.zeros(_grid_shape(cfg), dtype=bool)
    for rect in static:
        _mark(occ, rect, cfg)
    world = WorldState(ego[0], ego[1], 0.0, cfg.start_speed, 0.0, static, tuple(moving), goal, occ)
    if collides(world, cfg):
        raise PlacementError("ego starts in collision")
    return world


def _goal_distance(world: WorldState) -> float:
    return math.hypot(world.goal[0] - world.x, world.goal[1] - world.y)


def step(world: WorldState, action, cfg: EnvConfig) -> tuple[WorldState, float, bool]:
    """Advance one time step; returns ``(world', reward, done)``.

    Terminal flags are evaluated in the order collision, goal, timeout and
    at most one is set.
    """
    if world.done:
        raise TerminalStateError("cannot step a terminal world")
    action = Action(int(action))
    speed, heading, acc = world.speed, world.heading, 0.0
    if action is Action.ACCELERATE:
        acc = cfg.accel
    elif action is Action.BRAKE:
        acc = -cfg.accel
    elif action is Action.STEER_LEFT:
        heading = wrap_angle(heading + cfg.steer_rate * cfg.dt)
    elif action is Action.STEER_RIGHT:
        heading = wrap_angle(heading - cfg.steer_rate * cfg.dt)
    new_speed = min(max(speed + acc * cfg.dt, 0.0), cfg.v_max)
    acc = (new_speed - speed) / cfg.dt
    x = world.x + new_speed * math.cos(heading) * cfg.dt
    y = world.y + new_speed * math.sin(heading) * cfg.dt
    moving = tuple(((r[0] + vx * cfg.dt, r[1] + vy * cfg.dt, r[2] + vx * cfg.dt, r[3] + vy * cfg.dt), vx, vy)
                   for r, vx, vy in world.moving)
    nxt = dataclasses.replace(world, x=x, y=y, heading=heading, speed=new_speed, acceleration=acc,
                              moving=moving, steps=world.steps + 1)

    reward = STEP_PENALTY + PROGRESS_WEIGHT * (_goal_distance(world) - _goal_distance(nxt))
    if collides(nxt, cfg):
        nxt = dataclasses.replace(nxt, collided=True)
        reward += COLLISION_REWARD
    elif _goal_distance(nxt) <= cfg.goal_radius:
        nxt = dataclasses.replace(nxt, reached_goal=True)
        reward += GOAL_REWARD
    elif nxt.steps >= cfg.horizon:
        nxt = dataclasses.replace(nxt, timed_out=True)
    return nxt, reward, nxt.done


def observe(world: WorldState, cfg: EnvConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """State vector of length ``4 + 3K + 2``.

    Layout: speed, acceleration, heading (the steering angle relative to the
    road axis), lateral offset from the road centre line; then for each of
    the K nearest obstacles (by centre distance, ties by id) the offset of
    its centre in the ego frame and a presence flag; then goal bearing in
    (-pi, pi] and goal distance. Missing obstacles are zeros with flag 0.
    With ``cfg.obs_noise > 0`` and an ``rng``, Gaussian noise is added.
    """
    k = cfg.k_nearest
    out = np.zeros(4 + 3 * k + 2)
    out[:4] = world.speed, world.acceleration, world.heading, world.y
    c, s = math.cos(world.heading), math.sin(world.heading)
    dists = []
    for i, rect in enumerate(world.obstacles()):
        dx = 0.5 * (rect[0] + rect[2]) - world.x
        dy = 0.5 * (rect[1] + rect[3]) - world.y
        dists.append((math.hypot(dx, dy), i, dx, dy))
    dists.sort()
    for slot, (_, _, dx, dy) in enumerate(dists[:k]):
        base = 4 + 3 * slot
        out[base:base + 3] = c * dx + s * dy, -s * dx + c * dy, 1.0
    gx, gy = world.goal[0] - world.x, world.goal[1] - world.y
    out[-2] = wrap_angle(math.atan2(gy, gx) - world.heading)
    out[-1] = math.hypot(gx, gy)
    if cfg.obs_noise > 0 and rng is not None:
        out += rng.normal(0.0, cfg.obs_noise, out.shape)
    return out


def inject_obstacle(world: WorldState, rect: Rect, cfg: EnvConfig) -> WorldState:
    """Add a static obstacle and mark its occupancy cells."""
    rect = tuple(float(v) for v in rect)
    if not (rect[0] < rect[2] and rect[1] < rect[3]):
        raise ValueError(f"degenerate rectangle {rect}")
    if rect[0] < 0 or rect[2] > cfg.length or rect[1] < -cfg.half_width or rect[3] > cfg.half_width:
        raise ValueError(f"rectangle {rect} outside the world")
    if disc_hits_rect(world.x, world.y, cfg.ego_radius, rect):
        raise ValueError("rectangle covers the ego vehicle")
    occ = world.occupancy.copy()
    _mark(occ, rect, cfg)
    return dataclasses.replace(world, static=world.static + (rect,), occupancy=occ)


# ----------------------------------------------------------------------
# planner view
# ----------------------------------------------------------------------

def road_graph(cfg: EnvConfig, spacing: float = 5.0):
    """Regular lattice over the drivable area as a :class:`RoadGraph`."""
    from .planner.graph import grid_graph

    cols = int(cfg.length // spacing) + 1
    rows = int((2 * cfg.half_width - 2 * cfg.ego_radius) // spacing) + 1
    g = grid_graph(rows, cols, None, spacing=spacing)
    y0 = -0.5 * (rows - 1) * spacing
    coords = g.coords + np.array([0.0, y0])
    return type(g)(coords, g.edges, g.travel_time, g.density)


def blocked_edges(world: WorldState, graph, cfg: EnvConfig) -> set[int]:
    """Indices of edges whose segment crosses an occupied cell."""
    out = set()
    step_len = cfg.cell_size / 4
    for k, (u, v) in enumerate(graph.edges.tolist()):
        (x0, y0), (x1, y1) = graph.coords[u], graph.coords[v]
        n = max(int(math.ceil(math.hypot(x1 - x0, y1 - y0) / step_len)), 1)
        for i in range(n + 1):
            t = i / n
            if occupied(world, cfg, x0 + t * (x1 - x0), y0 + t * (y1 - y0)):
                out.add(k)
                break
    return out


def nearest_node(graph, x: float, y: float) -> int:
    return int(np.argmin(np.hypot(graph.coords[:, 0] - x, graph.coords[:, 1] - y)))


# ----------------------------------------------------------------------
# traces
# ----------------------------------------------------------------------

TRACE_HEADER = "step action x y heading speed reward flags"


def trace_line(world: WorldState, action, reward: float) -> str:
    return (f"{world.steps} {int(action)} {world.x!r} {world.y!r} {world.heading!r} "
            f"{world.speed!r} {reward!r} {world.flags()}")


def rollout_trace(cfg: EnvConfig, seed, actions) -> str:
    """Golden-trace text for a fixed action sequence (stops at termination)."""
    world = reset(cfg, seed)
    lines = [TRACE_HEADER]
    for a in actions:
        world, r, done = step(world, a, cfg)
        lines.append(trace_line(world, a, r))
        if done:
            break
    return "\n".join(lines) + "\n"
