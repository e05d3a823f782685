"""Greedy evaluation, random-policy baselines and figure-data exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .env import CartPoleEnv, CartPoleState
from .qnet import NafNetwork

DEFAULT_AVERAGING = (-1.0, -0.5, 0.0, 0.5, 1.0)


@dataclass
class EvalSummary:
    episodes: int
    seed: int
    epsilon: float
    mean_length: float
    mean_return: list[float]
    lengths: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def rollout(nets: Sequence[NafNetwork] | None, env: CartPoleEnv, state: CartPoleState,
            epsilon: float = 0.0, rng: np.random.Generator | None = None):
    """Play one episode from ``state``; yields ``(state, controls, StepResult)`` per step."""
    env.start(state)
    u_max = env.physics.u_max
    while not env.done:
        x = env.state.as_array()
        controls = []
        for i in range(env.n_agents):
            if nets is None or (epsilon > 0 and rng.random() < epsilon):
                controls.append(float(rng.uniform(-u_max, u_max)))
            else:
                controls.append(nets[i].greedy_control(x))
        prev = env.state
        yield prev, controls, env.step(controls)


def run_policy(nets: Sequence[NafNetwork] | None, config: RunConfig, episodes: int, seed: int,
               epsilon: float = 0.0) -> EvalSummary:
    """Mean length and undiscounted return per agent; ``nets=None`` plays uniformly at random."""
    env = config.make_env()
    env_rng, act_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    lengths, returns = [], np.zeros(env.n_agents)
    for _ in range(episodes):
        start = env.reset(env_rng)
        n = 0
        for _, _, res in rollout(nets, env, start, epsilon, act_rng):
            returns += res.rewards
            n += 1
        lengths.append(n)
    return EvalSummary(episodes, seed, 1.0 if nets is None else epsilon,
                       float(np.mean(lengths)), (returns / episodes).tolist(), lengths)


def evaluate(nets: Sequence[NafNetwork], config: RunConfig, episodes: int, seed: int) -> EvalSummary:
    return run_policy(nets, config, episodes, seed, epsilon=0.0)


def random_baseline(config: RunConfig, episodes: int, seed: int) -> EvalSummary:
    return run_policy(None, config, episodes, seed)


def value_surface(net: NafNetwork, s_values: Sequence[float], theta_values: Sequence[float],
                  s_dot_values: Sequence[float] = DEFAULT_AVERAGING,
                  theta_dot_values: Sequence[float] = DEFAULT_AVERAGING) -> list[tuple[float, float, float]]:
    """``(s, theta, mean V)`` rows; V is averaged over the velocity grid."""
    if len(s_values) == 0 or len(theta_values) == 0:
        raise ValueError("value surface grid is empty")
    sd = np.asarray(s_dot_values if len(s_dot_values) else [0.0], dtype=np.float64)
    td = np.asarray(theta_dot_values if len(theta_dot_values) else [0.0], dtype=np.float64)
    sd_grid, td_grid = (a.ravel() for a in np.meshgrid(sd, td, indexing="ij"))
    rows = []
    for s in s_values:
        for theta in theta_values:
            xs = np.column_stack([np.full(sd_grid.size, s), sd_grid, np.full(sd_grid.size, theta), td_grid])
            rows.append((float(s), float(theta), float(np.mean(net.value(xs)))))
    return rows


TRAJECTORY_COLUMNS = ["k", "s", "s_dot", "theta", "theta_dot"]


def trajectory(nets: Sequence[NafNetwork], env: CartPoleEnv, initial: CartPoleState, steps: int) -> list[list]:
    """Greedy rollout of at most ``steps`` transitions.

    Row 0 is the initial state; row k holds x_k together with the controls
    and rewards of the transition that produced it.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    n = env.n_agents
    env.start(initial)
    rows = [[initial.k, initial.s, initial.s_dot, initial.theta, initial.theta_dot]
            + [None] * (2 * n) + [int(env.done)]]
    for _ in range(steps):
        if env.done:
            break
        x = env.state.as_array()
        controls = env.clip_controls([net.greedy_control(x) for net in nets])
        res = env.step(controls)
        nxt = res.state
        rows.append([nxt.k, nxt.s, nxt.s_dot, nxt.theta, nxt.theta_dot, *controls, *res.rewards,
                     int(res.terminated)])
    return rows


def trajectory_header(n_agents: int) -> list[str]:
    return (TRAJECTORY_COLUMNS + [f"u_{i}" for i in range(1, n_agents + 1)]
            + [f"r_{i}" for i in range(1, n_agents + 1)] + ["terminated"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path: str | Path | None, header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
