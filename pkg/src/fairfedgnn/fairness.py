"""Group-fairness controller.

Clients never reveal their group. Each one reports four noised numbers
(its metric and a unit count, routed to the S0 or S1 slot); the server's
ratio of sums estimates the two group means P and Q. A client then rescales
its gradient by

    L = 1 - beta * R * |P - Q| ** (alpha - 1)
    R = alpha * (-1)**[P < Q] * (-1)**[u not in S0]

so the better-off group learns more slowly and the worse-off group faster.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .data import S0, S1, ConfigurationError

logger = logging.getLogger(__name__)

SCALE_MIN, SCALE_MAX = 0.05, 2.0
DENOMINATOR_FLOOR = 0.1


class EvaluationError(Exception):
    """Raised when a disparity is requested for an empty group."""


@dataclass(frozen=True)
class FairnessConfig:
    beta: float = 0.0
    alpha: int = 1
    sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.alpha not in (1, 2):
            raise ConfigurationError(f"alpha must be 1 or 2, got {self.alpha}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class GroupStats:
    P: float = 1.0
    Q: float = 1.0

    @property
    def gap(self) -> float:
        return abs(self.P - self.Q)


@dataclass(frozen=True)
class StatsContribution:
    P_per: float
    P_add: float
    Q_per: float
    Q_add: float


def performance(utility_loss: float) -> float:
    """Per-user performance used for training-time statistics: the negated local loss."""
    return -float(utility_loss)


def disparity(per_user_metric: Mapping[int, float], groups, alpha: int = 1) -> float:
    """``|mean_S0 M - mean_S1 M| ** alpha`` over users present in ``per_user_metric``."""
    group_of = groups.group_of if hasattr(groups, "group_of") else groups
    sums = {S0: 0.0, S1: 0.0}
    counts = {S0: 0, S1: 0}
    for u, value in per_user_metric.items():
        g = group_of[u]
        sums[g] += value
        counts[g] += 1
    for g, name in ((S0, "S0"), (S1, "S1")):
        if counts[g] == 0:
            raise EvaluationError(f"group {name} is empty")
    return abs(sums[S0] / counts[S0] - sums[S1] / counts[S1]) ** alpha


def scale_factor(config: FairnessConfig, stats: GroupStats, membership: int) -> float:
    """Learning-rate multiplier for a user in ``membership`` given the broadcast stats."""
    if config.beta == 0.0 or stats.P == stats.Q:
        return 1.0
    sign_pq = -1.0 if stats.P < stats.Q else 1.0
    sign_member = -1.0 if membership != S0 else 1.0
    R = config.alpha * sign_pq * sign_member
    L = 1.0 - config.beta * R * stats.gap ** (config.alpha - 1)
    return float(min(max(L, SCALE_MIN), SCALE_MAX))


def make_contribution(metric: float, membership: int, sigma: float, epoch_noise=None) -> StatsContribution:
    """Route ``metric`` to the caller's group slot and add the per-epoch noise.

    ``epoch_noise`` is the four draws (eps1, eps2, eps3, eps4) for P_per,
    Q_per, P_add, Q_add; ``None`` means no noise.
    """
    if sigma < 0:
        raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
    e1, e2, e3, e4 = (0.0, 0.0, 0.0, 0.0) if epoch_noise is None else map(float, epoch_noise)
    in0 = 1.0 if membership == S0 else 0.0
    in1 = 1.0 - in0
    return StatsContribution(
        P_per=in0 * metric + e1,
        P_add=in0 + e3,
        Q_per=in1 * metric + e2,
        Q_add=in1 + e4,
    )


class EpochNoise:
    """Gaussian noise fixed per (user, epoch); re-reads return the cached draw."""

    def __init__(self, sigma: float, seed: int, stream: int = 0):
        if sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {sigma}")
        self.sigma = sigma
        self.seed = seed
        self.stream = stream
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def draw(self, user: int, epoch: int) -> np.ndarray:
        key = (int(user), int(epoch))
        if key not in self._cache:
            if self.sigma == 0:
                self._cache[key] = np.zeros(4)
            else:
                rng = np.random.default_rng([self.seed, self.stream, epoch, user])
                self._cache[key] = rng.normal(0.0, self.sigma, size=4)
        return self._cache[key]

    def forget_before(self, epoch: int) -> None:
        self._cache = {k: v for k, v in self._cache.items() if k[1] >= epoch}


def aggregate_stats(contributions: Iterable[StatsContribution], previous: GroupStats = GroupStats(),
                    floor: float = DENOMINATOR_FLOOR) -> GroupStats:
    """``P = sum P_per / sum P_add`` and likewise for Q.

    A denominator whose magnitude is below ``floor`` keeps the previous value.
    """
    contributions = list(contributions)
    if not contributions:
        raise ValueError("aggregate_stats needs at least one contribution")
    p_num = sum(c.P_per for c in contributions)
    p_den = sum(c.P_add for c in contributions)
    q_num = sum(c.Q_per for c in contributions)
    q_den = sum(c.Q_add for c in contributions)
    P, Q = previous.P, previous.Q
    if abs(p_den) >= floor:
        P = p_num / p_den
    else:
        logger.info("S0 denominator %.4g below floor; keeping P=%.6g", p_den, P)
    if abs(q_den) >= floor:
        Q = q_num / q_den
    else:
        logger.info("S1 denominator %.4g below floor; keeping Q=%.6g", q_den, Q)
    return GroupStats(P, Q)
