"""Single-step imagined transitions built from the known dynamics.

Each scenario substitutes part of a recorded joint control and re-simulates
the step with the true model. The reward is always the owning agent's.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .env import CartPoleEnv, CartPoleState

Tag = Literal["marginal", "idle", "coop1", "coop2"]


@dataclass(frozen=True)
class ImaginedExperience:
    x: np.ndarray
    u_joint: tuple[float, ...]  # substituted joint control that was simulated
    r: float
    x_next: np.ndarray
    terminal: bool
    tag: Tag

    def own_control(self, agent: int) -> float:
        return float(self.u_joint[agent])


def _simulate(env: CartPoleEnv, x, u_joint: list[float], agent: int, tag: Tag) -> ImaginedExperience:
    if isinstance(x, CartPoleState):
        state, x = x, x.as_array()
    else:
        state = CartPoleState.from_array(x)
    res = env.simulate(state, u_joint)
    return ImaginedExperience(x, tuple(u_joint), res.rewards[agent], res.state.as_array(), res.failed, tag)


def partner_mean(u_joint: Sequence[float], agent: int) -> float:
    others = [float(u) for j, u in enumerate(u_joint) if j != agent]
    return math.fsum(others) / len(others)


def imagine_marginal(x, u_joint, env: CartPoleEnv, agent: int) -> ImaginedExperience:
    """Own control kept, every partner control zeroed."""
    u = [0.0] * env.n_agents
    u[agent] = float(u_joint[agent])
    return _simulate(env, x, u, agent, "marginal")


def imagine_idle(x, u_joint, env: CartPoleEnv, agent: int) -> ImaginedExperience:
    u = [float(v) for v in u_joint]
    u[agent] = 0.0
    return _simulate(env, x, u, agent, "idle")


def imagine_coop1(x, u_joint, env: CartPoleEnv, agent: int) -> ImaginedExperience:
    """Agent copies the mean of its partners' controls."""
    u = [float(v) for v in u_joint]
    u[agent] = partner_mean(u_joint, agent)
    return _simulate(env, x, u, agent, "coop1")


def imagine_coop2(x, u_joint, env: CartPoleEnv, agent: int) -> ImaginedExperience:
    """Every partner copies the agent's control."""
    return _simulate(env, x, [float(u_joint[agent])] * env.n_agents, agent, "coop2")


def imagine_coordination(x, u_joint, env: CartPoleEnv, agent: int) -> list[ImaginedExperience]:
    return [
        imagine_idle(x, u_joint, env, agent),
        imagine_coop1(x, u_joint, env, agent),
        imagine_coop2(x, u_joint, env, agent),
    ]
