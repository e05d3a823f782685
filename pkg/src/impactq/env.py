"""Two-player cart-pole co-control environment.

Agents push the cart simultaneously; the summed force is clipped and the
nonlinear cart-pole equations are integrated with semi-implicit Euler.
Agent roles decide the reward: ``balance`` agents are paid for keeping the
pole inside its angle window, ``position`` agents for keeping the cart near
a target position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

S_LIMIT = 2.4
THETA_LIMIT = 0.21
S_INIT = 2.3
THETA_INIT = 0.085


@dataclass(frozen=True)
class PhysicsParams:
    g: float = -9.8
    m_pole: float = 0.1
    m_cart: float = 1.0
    l: float = 0.5  # half-pole length
    force_clip: float = 10.0
    dt: float = 0.02
    u_max: float = 10.0  # per-agent bound, the sum is clipped to force_clip

    def __post_init__(self) -> None:
        for name in ("m_pole", "m_cart", "l", "force_clip", "dt", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class RewardSpec:
    role: Literal["balance", "position"] = "balance"
    target: float = 0.0
    # (upper bound on |s - target|, reward) pairs, checked in order
    position_bands: tuple[tuple[float, float], ...] = ((0.1, 5.0), (0.5, 1.0), (2.4, 0.0))
    live_reward: float = 1.0
    terminal_reward: float = -1.0

    def __post_init__(self) -> None:
        bounds = [b for b, _ in self.position_bands]
        if any(lo >= hi for lo, hi in zip(bounds, bounds[1:])):
            raise ValueError(f"position band thresholds must be strictly increasing: {bounds}")


@dataclass(frozen=True)
class CartPoleState:
    s: float
    s_dot: float
    theta: float
    theta_dot: float
    k: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.s_dot, self.theta, self.theta_dot], dtype=np.float64)

    @classmethod
    def from_array(cls, x: Sequence[float], k: int = 0) -> "CartPoleState":
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]), k)


@dataclass(frozen=True)
class StepResult:
    state: CartPoleState
    rewards: tuple[float, ...]
    terminated: bool  # episode over, failure or time limit
    failed: bool  # left the admissible region


class EpisodeTerminated(RuntimeError):
    pass


def accelerations(
    theta: float, theta_dot: float, f_res: float, params: PhysicsParams = PhysicsParams()
) -> tuple[float, float]:
    """Return ``(theta_ddot, s_ddot)`` for an already clipped resultant force.

    The angular acceleration is evaluated first and fed into the cart
    acceleration. ``g`` enters with the sign it carries in ``params``.
    """
    total_mass = params.m_pole + params.m_cart
    sin_t = math.sin(theta)
    cos_t = math.cos(theta)
    bracket = (-f_res - params.m_pole * params.l * theta_dot**2 * sin_t) / total_mass
    theta_ddot = (params.g * sin_t - cos_t * bracket) / (
        params.l * (4.0 / 3.0 - params.m_pole * cos_t**2 / total_mass)
    )
    s_ddot = (
        f_res + params.m_pole * params.l * (theta_dot**2 * sin_t - theta_ddot * cos_t)
    ) / total_mass
    return theta_ddot, s_ddot


def is_failure(s: float, theta: float) -> bool:
    # |theta| == 0.21 counts as failure, |s| == 2.4 does not
    return not (-S_LIMIT <= s <= S_LIMIT) or not (-THETA_LIMIT < theta < THETA_LIMIT)


def reward(spec: RewardSpec, state: CartPoleState, failed: bool) -> float:
    if failed:
        return spec.terminal_reward
    if spec.role == "balance":
        return spec.live_reward
    dist = abs(state.s - spec.target)
    for bound, value in spec.position_bands:
        if dist < bound:
            return value
    # |s - s*| == 2.4 on a live state: last band still applies
    return spec.position_bands[-1][1]


def default_rewards() -> tuple[RewardSpec, RewardSpec]:
    return (RewardSpec(role="balance"), RewardSpec(role="position", target=0.0))


@dataclass
class CartPoleEnv:
    """Cart-pole driven by ``len(rewards)`` agents.

    ``simulate`` is a pure transition; ``reset``/``step`` manage one live
    episode held in ``state``.
    """

    physics: PhysicsParams = field(default_factory=PhysicsParams)
    rewards: tuple[RewardSpec, ...] = field(default_factory=default_rewards)
    max_steps: int = 3000
    state: CartPoleState | None = None
    done: bool = True

    @property
    def n_agents(self) -> int:
        return len(self.rewards)

    def clip_controls(self, controls: Sequence[float]) -> list[float]:
        if len(controls) != self.n_agents:
            raise ValueError(f"expected {self.n_agents} controls, got {len(controls)}")
        u_max = self.physics.u_max
        return [min(max(float(u), -u_max), u_max) for u in controls]

    def resultant_force(self, controls: Sequence[float]) -> float:
        clip = self.physics.force_clip
        return min(max(math.fsum(self.clip_controls(controls)), -clip), clip)

    def simulate(self, state: CartPoleState, controls: Sequence[float]) -> StepResult:
        p = self.physics
        f_res = self.resultant_force(controls)
        theta_ddot, s_ddot = accelerations(state.theta, state.theta_dot, f_res, p)
        s_dot = state.s_dot + p.dt * s_ddot
        theta_dot = state.theta_dot + p.dt * theta_ddot
        nxt = CartPoleState(
            s=state.s + p.dt * s_dot,
            s_dot=s_dot,
            theta=state.theta + p.dt * theta_dot,
            theta_dot=theta_dot,
            k=state.k + 1,
        )
        failed = is_failure(nxt.s, nxt.theta)
        rewards = tuple(reward(spec, nxt, failed) for spec in self.rewards)
        terminated = failed or nxt.k >= self.max_steps
        return StepResult(nxt, rewards, terminated, failed)

    def reset(self, rng: np.random.Generator) -> CartPoleState:
        s0 = rng.uniform(-S_INIT, S_INIT)
        theta0 = rng.uniform(-THETA_INIT, THETA_INIT)
        self.state = CartPoleState(float(s0), 0.0, float(theta0), 0.0, 0)
        self.done = False
        return self.state

    def start(self, state: CartPoleState) -> None:
        """Begin an episode from an explicit state."""
        self.state = state
        self.done = is_failure(state.s, state.theta) or state.k >= self.max_steps

    def step(self, controls: Sequence[float]) -> StepResult:
        if self.done or self.state is None:
            raise EpisodeTerminated("step() called on a terminated episode; call reset() first")
        result = self.simulate(self.state, controls)
        self.state = result.state
        self.done = result.terminated
        return result
