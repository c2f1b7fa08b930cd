"""Train the driving agent and print one greedy episode.

Uses the default 20k-step schedule, about 20 s on one core; the same
training with harness seeding is ``python -m deskdrive train-decision``.

    python demos/drive_episode.py
"""

import numpy as np

from deskdrive import decision as D
from deskdrive import sim

env = sim.EnvConfig()
agent = D.Agent(D.AgentConfig(), env, np.random.default_rng(3))
D.train(agent, range(10_000, 10**6), total_steps=20_000)

seeds = range(50)
trained = D.evaluate(agent, seeds)
random = D.random_baseline(env, seeds, np.random.default_rng(0))
print(f"success {np.mean([e.success for e in trained]):.2f} vs random {np.mean([e.success for e in random]):.2f}")
print(f"mean return {np.mean([e.ret for e in trained]):.2f} vs random {np.mean([e.ret for e in random]):.2f}")

world = sim.reset(env, 0)
print(sim.TRACE_HEADER)
while not world.done:
    a = int(D.argmax_first(agent.online(sim.observe(world, env))))
    world, r, _ = sim.step(world, a, env)
    print(sim.trace_line(world, a, r))
print("outcome:", {"C": "collision", "G": "goal", "T": "timeout"}[world.flags()])
