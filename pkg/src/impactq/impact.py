"""Impact factor, coordination coefficient and learning-rate tiers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence


class Tier(str, Enum):
    HIGH = "high"
    MID_COOP = "mid_coop"
    MID_CONFLICT = "mid_conflict"
    LOW = "low"


@dataclass(frozen=True)
class ImpactParams:
    lambda_high: float = 0.8
    lambda_low: float = 0.2
    alpha: float = 5e-4
    sigma: float = 2e-4
    beta: float = 5e-5

    def __post_init__(self) -> None:
        if not 0 <= self.lambda_low < self.lambda_high <= 1:
            raise ValueError("need 0 <= lambda_low < lambda_high <= 1")
        if not 0 < self.beta < self.sigma < self.alpha < 1:
            raise ValueError("need 0 < beta < sigma < alpha < 1")


def impact_factor(agent: int, u_joint: Sequence[float]) -> float:
    """Share ``|u_i| / sum_j |u_j|`` of the total actuation; ``1/N`` if nobody acts."""
    mag = [abs(float(u)) for u in u_joint]
    total = math.fsum(mag)
    if total == 0.0:
        return 1.0 / len(mag)
    return mag[agent] / total


def coordination_coefficient(agent: int, u_joint: Sequence[float]) -> int:
    if len(u_joint) < 2:
        raise ValueError("coordination needs at least two agents")
    own = float(u_joint[agent])
    mean_others = math.fsum(float(u) for j, u in enumerate(u_joint) if j != agent) / (len(u_joint) - 1)
    prod = mean_others * own
    return (prod > 0) - (prod < 0)


def select_tier(lam: float, psi: int, params: ImpactParams) -> tuple[Tier, float, bool]:
    """Return ``(tier, learning_rate, simulate_coordination)``.

    Both middle-tier bounds are inclusive. Cooperative middle-impact samples
    are promoted to the high rate; conflicting ones use the middle rate and
    ask for the coordination scenarios.
    """
    if lam > params.lambda_high:
        return Tier.HIGH, params.alpha, False
    if lam >= params.lambda_low:
        if psi >= 0:
            return Tier.MID_COOP, params.alpha, False
        return Tier.MID_CONFLICT, params.sigma, True
    return Tier.LOW, params.beta, False
