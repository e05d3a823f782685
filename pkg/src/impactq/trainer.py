"""Decentralized training loop: impact Q-learning with TER and IER.

Every agent owns its network, memory and exploration rate. At each step
the agents act on the same state, the environment moves once, and each
agent stores the transition with the full joint control it observed after
the fact, then runs one mini-batch update on its own memory.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .env import CartPoleEnv
from .imagination import imagine_coordination, imagine_marginal
from .impact import ImpactParams, Tier, coordination_coefficient, impact_factor, select_tier
from .qnet import NafNetwork, NetworkParams, NumericalDivergence
from .replay import Experience, InsufficientExperiences, ReplayMemory, TerParams, sample_ter

log = logging.getLogger(__name__)

COUNTER_KEYS = ("sampled", "high", "mid_coop", "mid_conflict", "low", "marginal", "coordination", "updates")


@dataclass
class UpdateStats:
    sampled: int = 0
    high: int = 0
    mid_coop: int = 0
    mid_conflict: int = 0
    low: int = 0
    marginal: int = 0
    coordination: int = 0  # events; each one trains on three imagined samples
    updates: int = 0  # sample-level gradient contributions
    loss_sum: float = 0.0
    loss_batches: int = 0

    def add(self, other: "UpdateStats") -> None:
        for key in COUNTER_KEYS:
            setattr(self, key, getattr(self, key) + getattr(other, key))
        self.loss_sum += other.loss_sum
        self.loss_batches += other.loss_batches

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_batches if self.loss_batches else float("nan")

    def reconciles(self) -> bool:
        tiers = self.high + self.mid_coop + self.mid_conflict + self.low
        return tiers == self.sampled and self.updates == self.sampled + self.marginal + 3 * self.coordination


@dataclass
class AgentStreams:
    act: np.random.Generator
    sample: np.random.Generator
    dropout: np.random.Generator


class Agent:
    """One decentralized learner.

    Its learning path only reads its own memory, network and reward model;
    partner controls enter solely through the stored joint control.
    """

    def __init__(self, index: int, net: NafNetwork, memory: ReplayMemory, ter: TerParams,
                 impact: ImpactParams, gamma: float, streams: AgentStreams,
                 epsilon: float = 1.0, eps_min: float = 0.01,
                 per_sample_updates: bool = False, independent_gate_draws: bool = False):
        self.index = index
        self.net = net
        self.memory = memory
        self.ter = ter
        self.impact = impact
        self.gamma = gamma
        self.streams = streams
        self.epsilon = epsilon
        self.eps_min = eps_min
        self.per_sample_updates = per_sample_updates
        self.independent_gate_draws = independent_gate_draws

    def act(self, x: np.ndarray) -> float:
        rng = self.streams.act
        if rng.random() < self.epsilon:
            u_max = self.net.cfg.u_max
            return float(rng.uniform(-u_max, u_max))
        return self.net.greedy_control(x)

    def decay(self, rate: float) -> None:
        self.epsilon = max(rate * self.epsilon, self.eps_min)

    def learn(self, model: CartPoleEnv, k_now: int) -> UpdateStats:
        """Sample a TER mini-batch and apply the tiered updates.

        Raises ``InsufficientExperiences`` while the memory is warming up.
        """
        i = self.index
        rng = self.streams.sample
        batch = sample_ter(self.memory, self.ter, self.epsilon, k_now, rng)
        stats = UpdateStats(sampled=len(batch))
        beta = self.impact.beta

        xs, us, rs, nexts, terms, lrs = [], [], [], [], [], []

        def add(x, u, r, x_next, terminal, lr):
            xs.append(x)
            us.append(u)
            rs.append(r)
            nexts.append(x_next)
            terms.append(terminal)
            lrs.append(lr)

        u_rows = batch.u.tolist()
        eps_rows = batch.eps_c.tolist()
        r_rows = batch.r.tolist()
        term_rows = batch.terminal.tolist()
        for c in range(len(batch)):
            x, u_joint, eps_c = batch.x[c], u_rows[c], eps_rows[c]
            w = rng.random()
            if w < eps_c:
                im = imagine_marginal(x, u_joint, model, i)
                add(im.x, im.own_control(i), im.r, im.x_next, im.terminal, beta)
                stats.marginal += 1

            lam = impact_factor(i, u_joint)
            psi = coordination_coefficient(i, u_joint)
            tier, lr, simulate = select_tier(lam, psi, self.impact)
            setattr(stats, tier.value, getattr(stats, tier.value) + 1)
            add(x, u_joint[i], r_rows[c], batch.x_next[c], term_rows[c], lr)

            if simulate:
                gate = rng.random() if self.independent_gate_draws else w
                if eps_c < gate:
                    for im in imagine_coordination(x, u_joint, model, i):
                        add(im.x, im.own_control(i), im.r, im.x_next, im.terminal, beta)
                    stats.coordination += 1

        y = self.net.td_target(np.array(rs), np.array(nexts), np.array(terms), self.gamma)
        loss = self.net.update(np.array(xs), np.array(us), y, np.array(lrs),
                               rng=self.streams.dropout, per_sample=self.per_sample_updates)
        stats.updates = len(rs)
        stats.loss_sum, stats.loss_batches = loss, 1
        return stats


@dataclass
class StepMetrics:
    rewards: tuple[float, ...]
    terminated: bool
    failed: bool
    synced: bool
    stats: list[UpdateStats | None]


def train_step(agents: list[Agent], env: CartPoleEnv, global_k: int, target_period: int) -> StepMetrics:
    """Advance the live episode by one step; ``global_k`` is this step's 1-based index."""
    x = env.state.as_array()
    controls = [a.act(x) for a in agents]
    res = env.step(controls)
    u_joint = env.clip_controls(controls)
    x_next = res.state.as_array()
    for a in agents:
        a.memory.push(Experience(x, u_joint, res.rewards[a.index], x_next, global_k, a.epsilon, res.failed))
    stats: list[UpdateStats | None] = []
    for a in agents:
        try:
            stats.append(a.learn(env, global_k))
        except InsufficientExperiences:
            stats.append(None)
    synced = global_k % target_period == 0
    if synced:
        for a in agents:
            a.net.sync_target()
    return StepMetrics(res.rewards, res.terminated, res.failed, synced, stats)


@dataclass
class EpisodeMetrics:
    episode: int
    length: int
    epsilon: list[float]
    returns: list[float]
    discounted: list[float]
    stats: list[UpdateStats] = field(default_factory=list)
    failed: bool = False


class Trainer:
    """Holds the agents, environment and random streams of one run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.env = config.make_env()
        n = self.env.n_agents
        root = np.random.SeedSequence(config.seed)
        env_seq, *agent_seqs = root.spawn(1 + n)
        self.env_rng = np.random.default_rng(env_seq)
        self.agents: list[Agent] = []
        net_cfg = config.network_params()
        for i, seq in enumerate(agent_seqs):
            init_seq, act_seq, sample_seq, drop_seq = seq.spawn(4)
            net = NafNetwork(net_cfg, rng=np.random.default_rng(init_seq))
            self.agents.append(Agent(
                i, net, ReplayMemory(config.ter.memory_capacity, n), config.ter_params(),
                config.impact_params(), config.train.gamma,
                AgentStreams(*(np.random.default_rng(s) for s in (act_seq, sample_seq, drop_seq))),
                epsilon=config.train.eps_start, eps_min=config.train.eps_min,
                per_sample_updates=config.train.per_sample_updates,
                independent_gate_draws=config.train.independent_gate_draws,
            ))
        self.global_k = 0
        self.episode = 0
        self.syncs: list[int] = []

    def run_episode(self) -> EpisodeMetrics:
        cfg = self.config.train
        n = len(self.agents)
        self.episode += 1
        self.env.reset(self.env_rng)
        metrics = EpisodeMetrics(self.episode, 0, [a.epsilon for a in self.agents],
                                 [0.0] * n, [0.0] * n, [UpdateStats() for _ in range(n)])
        discount = 1.0
        while not self.env.done:
            self.global_k += 1
            step = train_step(self.agents, self.env, self.global_k, cfg.target_period)
            if step.synced:
                self.syncs.append(self.global_k)
            for i, r in enumerate(step.rewards):
                metrics.returns[i] += r
                metrics.discounted[i] += discount * r
            for i, s in enumerate(step.stats):
                if s is not None:
                    metrics.stats[i].add(s)
            discount *= cfg.gamma
            metrics.length += 1
            metrics.failed = step.failed
        for a in self.agents:
            a.decay(cfg.decay)
        return metrics

    def save_checkpoints(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for a in self.agents:
            a.net.save(directory / f"agent_{a.index + 1}.ckpt",
                       extra={"agent": a.index, "epsilon": a.epsilon, "episode": self.episode,
                              "global_step": self.global_k})
            if self.config.train.save_memory:
                a.memory.save(directory / f"agent_{a.index + 1}.mem")


def metrics_header(n_agents: int) -> list[str]:
    cols = ["episode", "length", "failed"]
    for i in range(1, n_agents + 1):
        cols += [f"epsilon_{i}", f"return_{i}", f"discounted_return_{i}"]
    for i in range(1, n_agents + 1):
        cols += [f"{key}_{i}" for key in COUNTER_KEYS] + [f"mean_loss_{i}"]
    return cols


def metrics_row(m: EpisodeMetrics) -> list[str]:
    row = [str(m.episode), str(m.length), str(int(m.failed))]
    for eps, ret, disc in zip(m.epsilon, m.returns, m.discounted):
        row += [repr(eps), repr(ret), repr(disc)]
    for s in m.stats:
        row += [str(getattr(s, key)) for key in COUNTER_KEYS] + [repr(s.mean_loss)]
    return row


@dataclass
class RunResult:
    output_dir: Path
    episodes: list[EpisodeMetrics]
    trainer: Trainer


def train(config: RunConfig, output_dir: str | Path | None = None, progress=None) -> RunResult:
    """Run all episodes, writing ``config.yaml``, ``metrics.csv`` and checkpoints.

    On numerical divergence the last periodic checkpoint is kept, a
    ``diverged.txt`` note is written and the exception propagates.
    """
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.yaml")
    trainer = Trainer(config)
    cfg = config.train
    n = len(trainer.agents)
    history: list[EpisodeMetrics] = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(n))
        for _ in range(cfg.episodes):
            try:
                m = trainer.run_episode()
            except NumericalDivergence as exc:
                (out / "diverged.txt").write_text(
                    f"episode {trainer.episode}, global step {trainer.global_k}: {exc}\n")
                log.error("training diverged: %s", exc)
                raise
            history.append(m)
            writer.writerow(metrics_row(m))
            fh.flush()
            if progress is not None:
                progress(m)
            if cfg.checkpoint_every and m.episode % cfg.checkpoint_every == 0:
                trainer.save_checkpoints(out / "checkpoints" / f"episode_{m.episode:05d}")
    trainer.save_checkpoints(out / "checkpoints" / "final")
    return RunResult(out, history, trainer)


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metrics_text(history: list[EpisodeMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(len(history[0].returns) if history else 2))
    for m in history:
        writer.writerow(metrics_row(m))
    return buf.getvalue()


def build_networks(config: RunConfig) -> list[NafNetwork]:
    """Freshly initialized networks exactly as a run with ``config`` would create them."""
    return [a.net for a in Trainer(config).agents]


def load_networks(paths: list[Path], expect: NetworkParams | None = None) -> list[NafNetwork]:
    return [NafNetwork.load(p, expect) for p in paths]
