"""Run configuration: schema, defaults and YAML (de)serialization.

Defaults reproduce the reference hyperparameters. Every section rejects
unknown keys so that typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import env as env_mod
from .impact import ImpactParams
from .qnet import NetworkParams
from .replay import TerParams


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhysicsConfig(_Section):
    g: float = -9.8
    m_pole: float = Field(0.1, gt=0)
    m_cart: float = Field(1.0, gt=0)
    l: float = Field(0.5, gt=0)
    force_clip: float = Field(10.0, gt=0)
    dt: float = Field(0.02, gt=0)
    u_max: float = Field(10.0, gt=0)


class AgentRewardConfig(_Section):
    role: Literal["balance", "position"]
    target: float = 0.0
    position_bands: list[tuple[float, float]] = [(0.1, 5.0), (0.5, 1.0), (2.4, 0.0)]
    live_reward: float = 1.0
    terminal_reward: float = -1.0

    @model_validator(mode="after")
    def _ordered(self):
        bounds = [b for b, _ in self.position_bands]
        if not bounds or any(lo >= hi for lo, hi in zip(bounds, bounds[1:])):
            raise ValueError(f"position_bands thresholds must be strictly increasing, got {bounds}")
        return self


class NetworkConfig(_Section):
    hidden: list[int] = [64, 64, 64]
    dropout: float = Field(0.2, ge=0, lt=1)
    leaky_slope: float = Field(0.01, ge=0)
    hidden_init_bound: float = Field(0.5, gt=0)
    head_init_bound: float = Field(1.0, gt=0)


class TerConfig(_Section):
    macro_batch: int = Field(256, gt=0)
    mini_batch: int = Field(80, gt=0)
    xi_temp: float = Field(0.0, ge=0)
    memory_capacity: int = Field(100_000, gt=0)

    @model_validator(mode="after")
    def _sizes(self):
        if not self.mini_batch < self.macro_batch <= self.memory_capacity:
            raise ValueError("need mini_batch < macro_batch <= memory_capacity")
        return self


class ImpactConfig(_Section):
    lambda_high: float = 0.8
    lambda_low: float = 0.2
    alpha: float = 5e-4
    sigma: float = 2e-4
    beta: float = 5e-5

    @model_validator(mode="after")
    def _order(self):
        ImpactParams(**self.model_dump())
        return self


class TrainSection(_Section):
    episodes: int = Field(2000, ge=0)
    max_steps: int = Field(3000, gt=0)
    decay: float = Field(0.999, gt=0, le=1)
    eps_min: float = Field(0.01, gt=0, le=1)
    eps_start: float = Field(1.0, ge=0, le=1)
    gamma: float = Field(0.999, ge=0, lt=1)
    target_period: int = Field(4000, gt=0)
    per_sample_updates: bool = False
    independent_gate_draws: bool = False
    checkpoint_every: int = Field(100, ge=0)
    save_memory: bool = False

    @model_validator(mode="after")
    def _eps(self):
        if self.eps_start < self.eps_min:
            raise ValueError("eps_start must be >= eps_min")
        return self


class RunConfig(_Section):
    seed: int = 0
    output_dir: str = "runs/default"
    physics: PhysicsConfig = PhysicsConfig()
    agents: list[AgentRewardConfig] = [
        AgentRewardConfig(role="balance"),
        AgentRewardConfig(role="position", target=0.0),
    ]
    network: NetworkConfig = NetworkConfig()
    ter: TerConfig = TerConfig()
    impact: ImpactConfig = ImpactConfig()
    train: TrainSection = TrainSection()

    @model_validator(mode="after")
    def _agents(self):
        if len(self.agents) < 2:
            raise ValueError("at least two agents are required")
        return self

    # -- conversions to the engine's parameter objects ---------------------
    def physics_params(self) -> env_mod.PhysicsParams:
        return env_mod.PhysicsParams(**self.physics.model_dump())

    def reward_specs(self) -> tuple[env_mod.RewardSpec, ...]:
        return tuple(
            env_mod.RewardSpec(
                role=a.role, target=a.target,
                position_bands=tuple(tuple(b) for b in a.position_bands),
                live_reward=a.live_reward, terminal_reward=a.terminal_reward,
            )
            for a in self.agents
        )

    def network_params(self) -> NetworkParams:
        n = self.network
        return NetworkParams(
            hidden=tuple(n.hidden), dropout=n.dropout, leaky_slope=n.leaky_slope,
            hidden_init_bound=n.hidden_init_bound, head_init_bound=n.head_init_bound,
            u_max=self.physics.u_max,
        )

    def ter_params(self) -> TerParams:
        return TerParams(self.ter.macro_batch, self.ter.mini_batch, self.ter.xi_temp)

    def impact_params(self) -> ImpactParams:
        return ImpactParams(**self.impact.model_dump())

    def make_env(self) -> env_mod.CartPoleEnv:
        return env_mod.CartPoleEnv(self.physics_params(), self.reward_specs(), self.train.max_steps)

    # -- IO ---------------------------------------------------------------
    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError("config root must be a mapping")
        return cls.model_validate(data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text())

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides, e.g. ``{"train.episodes": 5}``, and revalidate."""
        data = self.model_dump(mode="json")
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if not isinstance(node, dict) or key not in node:
                    raise ValueError(f"unknown config key: {dotted}")
                node = node[key]
            if not isinstance(node, dict) or leaf not in node:
                raise ValueError(f"unknown config key: {dotted}")
            node[leaf] = value
        return type(self).model_validate(data)
