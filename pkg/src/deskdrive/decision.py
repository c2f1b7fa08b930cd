"""Double-DQN driving agent.

The Q-network is a small multilayer perceptron built from the dense/relu
pairs in :mod:`deskdrive.tensor`. With ``double_dqn`` off, targets are the
single-estimator ``r + gamma * max_a Q_target(s', a)``; with it on, the
online network picks the next action and the target network scores it.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import sim
from .tensor import OptimizerState, dense, dense_grad, exponential_lr, he_normal, relu, relu_grad, sgd_step, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class AgentConfig:
    learning_rate: float = 0.02
    lr_end: float | None = None  # exponential decay target over train_steps; None keeps the rate fixed
    momentum: float = 0.9
    gamma: float = 0.95
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    replay_capacity: int = 10_000
    batch_size: int = 64
    target_sync: int = 100
    double_dqn: bool = True
    hidden: int = 128
    train_steps: int = 20_000
    reward_scale: float = 1.0   # learner-side multiplier; returns are reported unscaled

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if self.replay_capacity <= 0 or self.batch_size <= 0 or self.target_sync <= 0:
            raise ValueError("replay_capacity, batch_size and target_sync must be positive")

    def epsilon(self, step: int) -> float:
        """Linear decay from ``eps_start`` to ``eps_end`` over ``eps_decay_steps``."""
        if self.eps_decay_steps <= 0:
            return self.eps_end
        frac = min(max(step, 0) / self.eps_decay_steps, 1.0)
        eps = self.eps_start + frac * (self.eps_end - self.eps_start)
        return min(max(eps, self.eps_end), self.eps_start)  # rounding can overshoot either end


# ----------------------------------------------------------------------
# network
# ----------------------------------------------------------------------

def default_input_scale(cfg: sim.EnvConfig) -> np.ndarray:
    """Divisors that bring every state entry to roughly unit range."""
    k = cfg.k_nearest
    obstacle = [cfg.length / 2, cfg.half_width, 1.0] * k
    return np.array([cfg.v_max, cfg.accel, 1.0, cfg.half_width, *obstacle, math.pi, cfg.length])


class QNetwork:
    """State vector to one Q-value per action."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], input_scale=None):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        n_in = self.weights[0].shape[1]
        self.input_scale = np.ones(n_in) if input_scale is None else np.asarray(input_scale, dtype=np.float64)

    @classmethod
    def init(cls, rng: np.random.Generator, sizes, input_scale=None) -> "QNetwork":
        ws, bs = [], []
        for i, o in zip(sizes, sizes[1:]):
            ws.append(he_normal(rng, (o, i), i))
            bs.append(np.zeros(o))
        ws[-1] *= 0.1
        return cls(ws, bs, input_scale)

    @property
    def n_actions(self) -> int:
        return self.weights[-1].shape[0]

    def clone(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.input_scale.copy())

    def params(self, prefix: str = "q") -> dict[str, np.ndarray]:
        p = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            p[f"{prefix}.{i}.w"] = w
            p[f"{prefix}.{i}.b"] = b
        return p

    def set_params(self, p, prefix: str = "q") -> None:
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(p[f"{prefix}.{i}.w"], dtype=np.float64)
            self.biases[i] = np.asarray(p[f"{prefix}.{i}.b"], dtype=np.float64)

    def forward(self, states) -> np.ndarray:
        h = np.asarray(states, dtype=np.float64) / self.input_scale
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = dense(h, w, b)
            if i < last:
                h = relu(h)
        return h

    __call__ = forward

    def backward(self, states, grad_out) -> dict[str, np.ndarray]:
        """Gradient of ``sum(grad_out * forward(states))`` with respect to every parameter."""
        h = np.asarray(states, dtype=np.float64) / self.input_scale
        acts, pre = [h], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = dense(acts[-1], w, b)
            pre.append(z)
            acts.append(relu(z) if i < last else z)
        grads = {}
        g = np.asarray(grad_out, dtype=np.float64)
        for i in range(last, -1, -1):
            if i < last:
                g = relu_grad(pre[i], g)
            g_in, gw, gb = dense_grad(acts[i], self.weights[i], g)
            grads[f"q.{i}.w"], grads[f"q.{i}.b"] = gw, gb
            g = g_in
        return grads


def action_probabilities(net: QNetwork, state) -> np.ndarray:
    """Softmax readout of Q-values, for reporting only."""
    return softmax(net(state))


def argmax_first(q: np.ndarray) -> np.ndarray | int:
    """Argmax with ties broken toward the lowest index (numpy's rule)."""
    return np.argmax(q, axis=-1)


def select_action(net: QNetwork, state, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy: uniform random with probability ``epsilon``, else greedy."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(argmax_first(net(state)))


# ----------------------------------------------------------------------
# targets
# ----------------------------------------------------------------------

def _stack(batch):
    s = np.stack([t.state for t in batch])
    a = np.array([t.action for t in batch], dtype=np.intp)
    r = np.array([t.reward for t in batch], dtype=np.float64)
    s2 = np.stack([t.next_state for t in batch])
    done = np.array([t.terminal for t in batch], dtype=np.float64)
    return s, a, r, s2, done


def q_targets(batch, online: QNetwork, target: QNetwork, gamma: float, double_dqn: bool = True,
              reward_scale: float = 1.0) -> np.ndarray:
    """Bootstrapped regression targets, one per transition.

    Terminal transitions get the bare (scaled) reward.
    """
    _, _, r, s2, done = _stack(batch)
    q_next = target(s2)
    if double_dqn:
        pick = argmax_first(online(s2))
        boot = q_next[np.arange(len(batch)), pick]
    else:
        boot = q_next.max(axis=1)
    return reward_scale * r + gamma * boot * (1.0 - done)


def q_update_tabular(q_table: np.ndarray, transition: Transition, alpha: float, gamma: float) -> np.ndarray:
    """One tabular Q-learning update at ``(state, action)``; returns a new table.

    States and next-states are integer row indices.
    """
    q = np.array(q_table, dtype=np.float64)
    s, a = int(transition.state), int(transition.action)
    if not (0 <= s < q.shape[0] and 0 <= a < q.shape[1]):
        raise KeyError(f"unknown state/action ({s}, {a})")
    boot = 0.0
    if not transition.terminal:
        s2 = int(transition.next_state)
        if not 0 <= s2 < q.shape[0]:
            raise KeyError(f"unknown next state {s2}")
        boot = gamma * q[s2].max()
    q[s, a] += alpha * (transition.reward + boot - q[s, a])
    return q


# ----------------------------------------------------------------------
# replay
# ----------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring buffer; uniform sampling with replacement."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: list[Transition] = []
        self.head = 0

    def __len__(self):
        return len(self.items)

    def push(self, t: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(t)
        else:
            self.items[self.head] = t
        self.head = (self.head + 1) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if not self.items:
            raise IndexError("cannot sample from an empty replay buffer")
        return [self.items[i] for i in rng.integers(0, len(self.items), size=n)]


def replay_push(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def replay_sample(buffer: ReplayBuffer, n: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(n, rng)


# ----------------------------------------------------------------------
# agent
# ----------------------------------------------------------------------

@dataclass
class EpisodeStats:
    episode: int
    ret: float
    steps: int
    collisions: int
    success: bool
    latencies: list[float] = field(default_factory=list, repr=False)

    @property
    def mean_latency_us(self) -> float:
        return 1e6 * float(np.mean(self.latencies)) if self.latencies else 0.0


class Agent:
    def __init__(self, cfg: AgentConfig, env_cfg: sim.EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.rng = rng
        sizes = [env_cfg.state_dim, cfg.hidden, cfg.hidden, sim.N_ACTIONS]
        self.online = QNetwork.init(rng, sizes, default_input_scale(env_cfg))
        self.target = self.online.clone()
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.opt = OptimizerState(cfg.learning_rate, cfg.momentum)
        self.steps = 0
        self.episodes = 0

    @property
    def epsilon(self) -> float:
        return self.cfg.epsilon(self.steps)

    def learn(self) -> float:
        """One gradient step on a replay minibatch with a Huber TD loss."""
        if self.cfg.lr_end is not None:
            self.opt.learning_rate = exponential_lr(min(self.steps, self.cfg.train_steps), self.cfg.train_steps + 1,
                                                    self.cfg.learning_rate, self.cfg.lr_end)
        batch = self.replay.sample(self.cfg.batch_size, self.rng)
        y = q_targets(batch, self.online, self.target, self.cfg.gamma, self.cfg.double_dqn,
                      self.cfg.reward_scale)
        s, a, *_ = _stack(batch)
        q = self.online(s)
        rows = np.arange(len(batch))
        td = q[rows, a] - y
        g = np.zeros_like(q)
        g[rows, a] = np.clip(td, -1.0, 1.0) / len(batch)
        grads = self.online.backward(s, g)
        self.online.set_params(sgd_step(self.online.params(), grads, self.opt))
        return float(np.mean(np.where(np.abs(td) < 1, 0.5 * td * td, np.abs(td) - 0.5)))

    def sync_target(self) -> None:
        self.target = self.online.clone()

    def act(self, state, epsilon: float | None = None) -> int:
        return select_action(self.online, state, self.epsilon if epsilon is None else epsilon, self.rng)

    # checkpoint blocks: everything that influences the rest of training
    def state_blocks(self) -> dict[str, np.ndarray]:
        blocks = dict(self.online.params("q"))
        blocks.update(self.target.params("target"))
        for k, v in self.opt.velocity.items():
            blocks[f"velocity.{k}"] = v
        items = self.replay.items
        d = self.env_cfg.state_dim
        blocks["replay.state"] = np.array([t.state for t in items]).reshape(len(items), d)
        blocks["replay.next_state"] = np.array([t.next_state for t in items]).reshape(len(items), d)
        blocks["replay.action"] = np.array([t.action for t in items], dtype=np.float64)
        blocks["replay.reward"] = np.array([t.reward for t in items], dtype=np.float64)
        blocks["replay.terminal"] = np.array([t.terminal for t in items], dtype=np.float64)
        blocks["agent.counters"] = np.array([self.steps, self.episodes, self.replay.head], dtype=np.float64)
        blocks["agent.rng"] = rng_state_array(self.rng)
        return blocks

    def load_state_blocks(self, blocks) -> None:
        self.online.set_params(blocks, "q")
        self.target.set_params(blocks, "target")
        self.opt.velocity = {k[len("velocity."):]: np.array(v) for k, v in blocks.items()
                             if k.startswith("velocity.")}
        self.replay.items = [Transition(s, int(a), float(r), s2, bool(d)) for s, a, r, s2, d in zip(
            np.array(blocks["replay.state"]), blocks["replay.action"], blocks["replay.reward"],
            np.array(blocks["replay.next_state"]), blocks["replay.terminal"])]
        steps, episodes, head = (int(v) for v in blocks["agent.counters"])
        self.steps, self.episodes, self.replay.head = steps, episodes, head
        set_rng_state(self.rng, blocks["agent.rng"])


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    """A PCG64 generator's state as float64 values, each an exact 32-bit chunk."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {st['bit_generator']}")
    words = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        words += [(v >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.float64)


def set_rng_state(rng: np.random.Generator, arr) -> None:
    w = [int(v) for v in np.asarray(arr)]
    join = lambda ws: sum(x << (32 * i) for i, x in enumerate(ws))  # noqa: E731
    rng.bit_generator.state = {"bit_generator": "PCG64",
                               "state": {"state": join(w[0:4]), "inc": join(w[4:8])},
                               "has_uint32": w[8], "uinteger": w[9]}


def train_episode(agent: Agent, seed, *, learn: bool = True, max_steps: int | None = None,
                  trace: list[str] | None = None) -> EpisodeStats:
    """Run one epsilon-greedy episode, learning online when ``learn`` is set."""
    cfg, env_cfg = agent.cfg, agent.env_cfg
    world = sim.reset(env_cfg, seed)
    state = sim.observe(world, env_cfg)
    ret, n, lat = 0.0, 0, []
    while not world.done and (max_steps is None or n < max_steps):
        t0 = time.perf_counter()
        action = agent.act(state)
        lat.append(time.perf_counter() - t0)
        world, reward, done = sim.step(world, action, env_cfg)
        nxt = sim.observe(world, env_cfg)
        if trace is not None:
            trace.append(sim.trace_line(world, action, reward))
        if learn:
            agent.replay.push(Transition(state, action, reward, nxt, bool(world.collided or world.reached_goal)))
            agent.steps += 1
            if len(agent.replay) >= cfg.batch_size:
                agent.learn()
            if agent.steps % cfg.target_sync == 0:
                agent.sync_target()
        state = nxt
        ret += reward
        n += 1
    agent.episodes += 1
    return EpisodeStats(agent.episodes, ret, n, int(world.collided), bool(world.reached_goal), lat)


def train(agent: Agent, seeds, total_steps: int | None = None, on_episode=None) -> list[EpisodeStats]:
    """Train until ``total_steps`` environment steps; ``seeds`` yields episode seeds."""
    total = agent.cfg.train_steps if total_steps is None else total_steps
    history = []
    seeds = iter(seeds)
    while agent.steps < total:
        stats = train_episode(agent, next(seeds), max_steps=total - agent.steps)
        history.append(stats)
        if on_episode is not None:
            on_episode(stats)
    return history


def run_policy(env_cfg: sim.EnvConfig, seed, policy, rng=None) -> EpisodeStats:
    """Roll out ``policy(state, rng) -> action`` without learning."""
    world = sim.reset(env_cfg, seed)
    state = sim.observe(world, env_cfg)
    ret, n, lat = 0.0, 0, []
    while not world.done:
        t0 = time.perf_counter()
        a = policy(state, rng)
        lat.append(time.perf_counter() - t0)
        world, r, _ = sim.step(world, a, env_cfg)
        state = sim.observe(world, env_cfg)
        ret += r
        n += 1
    return EpisodeStats(0, ret, n, int(world.collided), bool(world.reached_goal), lat)


def evaluate(agent: Agent, seeds) -> list[EpisodeStats]:
    """Greedy rollouts on the given seeds."""
    net = agent.online
    return [run_policy(agent.env_cfg, s, lambda st, _: int(argmax_first(net(st)))) for s in seeds]


def random_baseline(env_cfg: sim.EnvConfig, seeds, rng: np.random.Generator) -> list[EpisodeStats]:
    return [run_policy(env_cfg, s, lambda st, r: int(r.integers(sim.N_ACTIONS)), rng) for s in seeds]
