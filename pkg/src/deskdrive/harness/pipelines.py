"""End-to-end experiments: train, evaluate, checkpoint, trace, benchmark.

Every pipeline takes an :class:`ExperimentConfig` and an output directory
and returns an :class:`Outcome` (plus the trained model where there is
one). ``Outcome.metrics`` depends only on the config and seed;
``Outcome.timing`` holds wall-clock measurements. All randomness comes
from named streams of the master seed.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import decision as D
from .. import sim
from ..perception import (ConvTrunk, MultiTaskNet, PerceptionModel, SvmModel, Tracker, evaluate_detector,
                          generate_scene, generate_sequence, run_tracker, train_perception)
from ..planner import astar, grid_graph, replan
from ..planner.gnn import HeuristicModel, HeuristicTrainer, make_graphs, plan_quality
from .bench import LatencyStats, benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, format_config
from .report import build_report, emit_table, read_metrics, read_timing, write_metrics, write_timing
from .rng import indexed_seed, stream, stream_ints

log = logging.getLogger(__name__)


@dataclass
class Outcome:
    metrics: dict[str, float] = field(default_factory=dict)
    timing: dict[str, LatencyStats] = field(default_factory=dict)

    def update(self, other: "Outcome") -> "Outcome":
        self.metrics.update(other.metrics)
        self.timing.update(other.timing)
        return self


def _wall(seconds: float) -> LatencyStats:
    ms = 1e3 * seconds
    return LatencyStats(ms, ms, ms, ms, 1)


def _dirs(out) -> tuple[Path, Path]:
    out = Path(out)
    traces = out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    return out, traces


# ----------------------------------------------------------------------
# perception
# ----------------------------------------------------------------------

def scene_seeds(cfg: ExperimentConfig) -> list[int]:
    return stream_ints(cfg.seed, "perception.eval", cfg.eval.detection_scenes)


def tracking_sequences(cfg: ExperimentConfig):
    seeds = stream_ints(cfg.seed, "perception.tracking", cfg.eval.tracking_sequences)
    return [generate_sequence(s, cfg.eval.sequence_frames, cfg.perception.scene) for s in seeds]


def train_perception_model(cfg: ExperimentConfig) -> PerceptionModel:
    return train_perception(cfg.perception, stream(cfg.seed, "perception.train"),
                            on_epoch=lambda e, h: log.info("perception epoch %d loss %.4f", e + 1, h.total[-1]))


def load_perception(cfg: ExperimentConfig, out) -> PerceptionModel:
    return PerceptionModel.from_params(load_checkpoint(Path(out) / "perception.ckpt"), cfg.perception.channels)


def run_perception(cfg: ExperimentConfig, out) -> tuple[Outcome, PerceptionModel]:
    out, traces = _dirs(out)
    t0 = time.perf_counter()
    model = train_perception_model(cfg)
    res = Outcome(timing={"perception.train": _wall(time.perf_counter() - t0)})
    save_checkpoint(model.params(), out / "perception.ckpt")

    scenes = [generate_scene(s, cfg.perception.scene) for s in scene_seeds(cfg)]
    two = evaluate_detector(model.two_stage(cfg.perception), scenes)
    multi = evaluate_detector(model.multitask(cfg.perception), scenes)
    log.info("two-stage accuracy %.4f, multi-task accuracy %.4f", two.accuracy, multi.accuracy)
    track_acc, _ = run_tracker(model.multitask(cfg.perception), tracking_sequences(cfg), cfg.tracker)
    log.info("tracking frame accuracy %.4f", track_acc)
    res.metrics.update({
        "perception.detection_accuracy": two.accuracy,
        "perception.detection_precision": two.precision,
        "perception.multitask_accuracy": multi.accuracy,
        "perception.multitask_precision": multi.precision,
        "perception.tracking_accuracy": track_acc,
        "perception.final_train_loss": model.history.total[-1],
    })
    (traces / "perception_loss.txt").write_text(
        "epoch total classification regression\n" + "".join(
            f"{i + 1} {t!r} {c!r} {r!r}\n" for i, (t, c, r) in enumerate(
                zip(model.history.total, model.history.classification, model.history.regression))))
    return res, model


# ----------------------------------------------------------------------
# decision
# ----------------------------------------------------------------------

def episode_seeds(cfg: ExperimentConfig, start: int = 0):
    return (indexed_seed(cfg.seed, "decision.episodes", i) for i in itertools.count(start))


def make_agent(cfg: ExperimentConfig) -> D.Agent:
    return D.Agent(cfg.decision, cfg.env, stream(cfg.seed, "decision.agent"))


def train_agent(agent: D.Agent, cfg: ExperimentConfig, total_steps: int | None = None,
                trace: list[str] | None = None) -> list[D.EpisodeStats]:
    """Train from the agent's current state; episode ``i`` always uses the same seed."""
    def note(stats):
        if trace is not None:
            trace.append(f"{stats.episode} {stats.ret!r} {stats.steps} {stats.collisions} {int(stats.success)}")
    return D.train(agent, episode_seeds(cfg, agent.episodes), total_steps, on_episode=note)


def greedy_trace(agent: D.Agent, env_cfg: sim.EnvConfig, seed) -> str:
    world = sim.reset(env_cfg, seed)
    lines = [sim.TRACE_HEADER]
    while not world.done:
        a = int(D.argmax_first(agent.online(sim.observe(world, env_cfg))))
        world, r, _ = sim.step(world, a, env_cfg)
        lines.append(sim.trace_line(world, a, r))
    return "\n".join(lines) + "\n"


def load_agent(cfg: ExperimentConfig, out) -> D.Agent:
    agent = make_agent(cfg)
    agent.load_state_blocks(load_checkpoint(Path(out) / "decision.ckpt"))
    return agent


def run_decision(cfg: ExperimentConfig, out) -> tuple[Outcome, D.Agent]:
    out, traces = _dirs(out)
    agent = make_agent(cfg)
    train_log: list[str] = []
    t0 = time.perf_counter()
    history = train_agent(agent, cfg, trace=train_log)
    res = Outcome(timing={"decision.train": _wall(time.perf_counter() - t0),
                          "decision.act": LatencyStats.from_samples(
                              [1e3 * t for ep in history for t in ep.latencies])})
    save_checkpoint(agent.state_blocks(), out / "decision.ckpt")
    # per-episode rows; decision latency is wall-clock, so it goes to timing.csv instead
    (traces / "decision_train.txt").write_text(
        "episode return steps collisions success\n" + "".join(line + "\n" for line in train_log))

    seeds = stream_ints(cfg.seed, "decision.eval", cfg.eval.decision_episodes)
    ev = D.evaluate(agent, seeds)
    base = D.random_baseline(cfg.env, seeds, stream(cfg.seed, "decision.baseline"))
    rets = np.array([e.ret for e in ev])
    base_rets = np.array([e.ret for e in base])
    res.metrics.update({
        "decision.success_rate": float(np.mean([e.success for e in ev])),
        "decision.collision_rate": float(np.mean([e.collisions for e in ev])),
        "decision.mean_return": float(rets.mean()),
        "decision.random_mean_return": float(base_rets.mean()),
        "decision.random_std_return": float(base_rets.std()),
        "decision.train_steps": float(agent.steps),
    })
    log.info("decision success %.3f (random baseline return %.2f +- %.2f, agent %.2f)",
             res.metrics["decision.success_rate"], base_rets.mean(), base_rets.std(), rets.mean())
    (traces / "decision_eval.txt").write_text(greedy_trace(agent, cfg.env, seeds[0]))
    return res, agent


# ----------------------------------------------------------------------
# planner
# ----------------------------------------------------------------------

def make_trainer(cfg: ExperimentConfig) -> HeuristicTrainer:
    pc = cfg.planner
    graphs_rng = stream(cfg.seed, "planner.graphs")
    train_graphs = make_graphs(graphs_rng, pc.train_graphs, pc)
    val_graphs = make_graphs(graphs_rng, pc.val_graphs, pc)
    return HeuristicTrainer(train_graphs, pc, stream(cfg.seed, "planner.train"),
                            lambda e: np.random.default_rng(indexed_seed(cfg.seed, "planner.epochs", e)),
                            val_graphs)


def load_heuristic(out) -> HeuristicModel:
    return HeuristicModel.from_params(load_checkpoint(Path(out) / "planner.ckpt"))


def run_planner(cfg: ExperimentConfig, out) -> tuple[Outcome, HeuristicModel]:
    out, traces = _dirs(out)
    trainer = make_trainer(cfg)
    t0 = time.perf_counter()
    model = trainer.fit()
    res = Outcome(timing={"planner.train": _wall(time.perf_counter() - t0)})
    save_checkpoint(trainer.state_blocks(), out / "planner.ckpt")
    rep = trainer.report()
    test = make_graphs(stream(cfg.seed, "planner.eval"), cfg.eval.planner_graphs, cfg.planner)
    q = plan_quality(model, test, stream(cfg.seed, "planner.queries"), cfg.planner.eta)
    res.metrics.update({
        "planner.within_bound": q.within(cfg.eval.plan_bound),
        "planner.mean_ratio": q.mean_ratio,
        "planner.fewer_expansions": q.fewer_expansions,
        "planner.val_error": rep.val_error,
        "planner.baseline_error": rep.baseline_error,
    })
    log.info("planner mean cost ratio %.4f, fewer expansions on %.0f%%", q.mean_ratio, 100 * q.fewer_expansions)
    (traces / "planner_queries.txt").write_text("ratio learned_expansions zero_expansions\n" + "".join(
        f"{r!r} {a} {b}\n" for r, (a, b) in zip(q.ratios, q.expansions)))
    return res, model


# ----------------------------------------------------------------------
# end-to-end episode
# ----------------------------------------------------------------------

def _blocking_rect(world: sim.WorldState, graph, plan, env: sim.EnvConfig):
    """A 2 m square on the first planned edge at least 10 m ahead of the ego, if one fits."""
    for k in plan.edges:
        u, v = graph.edges[k]
        mid = (graph.coords[u] + graph.coords[v]) / 2
        if mid[0] < world.x + 10.0:
            continue
        x, y = float(mid[0]), float(mid[1])
        rect = (x - 1.0, y - 1.0, x + 1.0, y + 1.0)
        if (rect[0] >= 0 and rect[2] <= env.length and rect[1] >= -env.half_width
                and rect[3] <= env.half_width):
            return rect
    return None


def simulate_episode(cfg: ExperimentConfig, agent: D.Agent, heuristic: HeuristicModel | None,
                     inject_at: int = 10) -> tuple[str, dict[str, float], list[float]]:
    """Drive one greedy episode on the road lattice; inject a road closure and replan.

    Returns the trace text, episode metrics and replan latencies (ms).
    """
    env = cfg.env
    world = sim.reset(env, indexed_seed(cfg.seed, "simulate.episode", 0))
    graph = sim.road_graph(env)
    goal = sim.nearest_node(graph, *world.goal)
    h = heuristic.estimate_costs(graph, goal) if heuristic is not None else None
    plan = astar(graph, sim.nearest_node(graph, world.x, world.y), goal, h)
    blocked = sim.blocked_edges(world, graph, env)
    if blocked:
        plan = replan(graph, plan, blocked, plan.path[0], h, goal=goal)
    lines = [f"# plan cost {plan.cost!r} path {' '.join(map(str, plan.path))}", sim.TRACE_HEADER]
    latencies, replanned = [], 0
    while not world.done:
        if world.steps == inject_at and plan.found:
            rect = _blocking_rect(world, graph, plan, env)
            if rect is not None:
                world = sim.inject_obstacle(world, rect, env)
                blocked = sim.blocked_edges(world, graph, env)
                here = min(plan.path, key=lambda n: math.hypot(*(graph.coords[n] - (world.x, world.y))))
                plan = replan(graph, plan, blocked, here, h, goal=goal)
                latencies.append(1e3 * plan.elapsed)
                replanned = 1
                lines.append(f"# closure ({', '.join(f'{v:.3f}' for v in rect)}) blocks {len(blocked)} edges; "
                             f"replan cost {plan.cost!r} path {' '.join(map(str, plan.path))}")
        a = int(D.argmax_first(agent.online(sim.observe(world, env))))
        world, r, _ = sim.step(world, a, env)
        lines.append(sim.trace_line(world, a, r))
    metrics = {"simulate.success": float(world.reached_goal), "simulate.replanned": float(replanned),
               "simulate.replan_found": float(plan.found), "simulate.steps": float(world.steps)}
    return "\n".join(lines) + "\n", metrics, latencies


def run_simulate(cfg: ExperimentConfig, out, agent: D.Agent | None = None,
                 heuristic: HeuristicModel | None = None) -> Outcome:
    out, traces = _dirs(out)
    if agent is None:
        agent = load_agent(cfg, out) if (out / "decision.ckpt").exists() else run_decision(cfg, out)[1]
    if heuristic is None and (out / "planner.ckpt").exists():
        heuristic = load_heuristic(out)
    text, metrics, lat = simulate_episode(cfg, agent, heuristic)
    (traces / "simulate.txt").write_text(text)
    return Outcome(metrics, {"simulate.replan": LatencyStats.from_samples(lat)} if lat else {})


# ----------------------------------------------------------------------
# latency benchmarks
# ----------------------------------------------------------------------

def bench_targets(cfg: ExperimentConfig, out, modules) -> dict:
    """Callables to time, built from checkpoints in ``out`` when present, else fresh models."""
    out = Path(out)
    targets = {}
    if "perception" in modules:
        model = load_perception(cfg, out) if (out / "perception.ckpt").exists() else _fresh_perception(cfg)
        scene = generate_scene(indexed_seed(cfg.seed, "bench.scene", 0), cfg.perception.scene)
        det = model.two_stage(cfg.perception)
        targets["perception.frame"] = lambda: det.detect(scene)
        seq = generate_sequence(indexed_seed(cfg.seed, "bench.sequence", 0), cfg.eval.sequence_frames,
                                cfg.perception.scene)
        tracker = Tracker(model.multitask(cfg.perception), cfg.tracker)
        frames = itertools.cycle(seq.frames)
        targets["tracking.frame"] = lambda: tracker.step(next(frames))
    if "decision" in modules:
        agent = load_agent(cfg, out) if (out / "decision.ckpt").exists() else make_agent(cfg)
        state = sim.observe(sim.reset(cfg.env, indexed_seed(cfg.seed, "bench.world", 0)), cfg.env)
        targets["decision.forward"] = lambda: agent.act(state, 0.0)
    if "planner" in modules:
        side = cfg.bench.grid_side
        graph = grid_graph(side, side, stream(cfg.seed, "bench.grid"))
        goal = graph.n_nodes - 1
        heuristic = load_heuristic(out) if (out / "planner.ckpt").exists() else None
        h = heuristic.estimate_costs(graph, goal) if heuristic is not None else None
        plan = astar(graph, 0, goal, h)
        closure = {plan.edges[len(plan.edges) // 2]}
        targets["planner.replan"] = lambda: replan(graph, plan, closure, 0, h)
    return targets


def _fresh_perception(cfg: ExperimentConfig) -> PerceptionModel:
    """Untrained weights: latency does not depend on their values."""
    ch = cfg.perception.channels
    net = MultiTaskNet.init(stream(cfg.seed, "bench.perception"), ch)
    return PerceptionModel(net, SvmModel.zeros(3, ConvTrunk.feature_dim(channels=ch)))


def run_benchmark(cfg: ExperimentConfig, out, modules) -> Outcome:
    res = Outcome()
    for name, fn in bench_targets(cfg, out, modules).items():
        res.timing[name] = benchmark(fn, cfg.bench.iterations, cfg.bench.warmup)
        log.info("%s: mean %.3f ms, p95 %.3f ms", name, res.timing[name].mean_ms, res.timing[name].p95_ms)
    return res


# ----------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------

def modules_of(module: str) -> tuple[str, ...]:
    return ("perception", "decision", "planner") if module == "all" else (module,)


def write_outputs(cfg: ExperimentConfig, out, result: Outcome) -> str:
    """Merge ``result`` into the metrics and timing files of ``out`` and rewrite the report.

    Returns the report text. ``metrics.csv``, ``config.txt``, checkpoints and
    traces are byte-identical across runs with the same config; timing files
    and the report tables carry wall-clock latencies and are not.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, timing_path = out / "metrics.csv", out / "timing.csv"
    metrics = read_metrics(metrics_path) if metrics_path.exists() else {}
    timing = read_timing(timing_path) if timing_path.exists() else {}
    metrics.update(result.metrics)
    timing.update(result.timing)
    write_metrics(metrics, metrics_path)
    write_timing(timing, timing_path)
    # the output directory is left out so identical runs in different places match byte for byte
    (out / "config.txt").write_text("".join(line + "\n" for line in format_config(cfg).splitlines()
                                            if not line.startswith("out = ")))
    text, _ = emit_table(build_report(metrics, timing), out / "report.txt", out / "report.csv")
    return text


def run_all(cfg: ExperimentConfig, out=None, module: str | None = None, bench: bool = True) -> Outcome:
    """Train and evaluate the selected modules, run the end-to-end episode, time everything."""
    out = Path(cfg.out if out is None else out)
    mods = modules_of(module or cfg.module)
    res = Outcome()
    agent = heuristic = None
    if "perception" in mods:
        res.update(run_perception(cfg, out)[0])
    if "planner" in mods:
        part, heuristic = run_planner(cfg, out)
        res.update(part)
    if "decision" in mods:
        part, agent = run_decision(cfg, out)
        res.update(part)
        res.update(run_simulate(cfg, out, agent, heuristic))
    if bench:
        res.update(run_benchmark(cfg, out, mods))
    write_outputs(cfg, out, res)
    return res
