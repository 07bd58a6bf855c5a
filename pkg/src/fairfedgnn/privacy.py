"""Local differential privacy for released gradients: L2 clipping plus Laplace noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ConfigurationError
from .model import GradientSet


class NonFiniteGradientError(Exception):
    """The client's gradient contains NaN or inf; the client aborts this round."""


@dataclass(frozen=True)
class LdpConfig:
    """``delta`` is the clipping threshold, ``lam`` the Laplace scale b (variance 2 b**2)."""

    delta: float = 0.4
    lam: float = 0.15
    enabled: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigurationError(f"clipping threshold must be > 0, got {self.delta}")
        if self.lam < 0:
            raise ConfigurationError(f"Laplace scale must be >= 0, got {self.lam}")


def clip(grad: GradientSet, delta: float) -> GradientSet:
    """Rescale the whole gradient so its global L2 norm is at most ``delta``."""
    norm = grad.norm()
    if norm > delta:
        return grad.scaled(delta / norm)
    return grad


def clip_and_noise(grad: GradientSet, config: LdpConfig, rng: np.random.Generator | None = None) -> GradientSet:
    if not grad.is_finite():
        raise NonFiniteGradientError("gradient has non-finite entries")
    if not config.enabled:
        return grad
    out = clip(grad, config.delta)
    if config.lam > 0:
        if rng is None:
            raise ValueError("Laplace noise needs an rng")
        out = out.map(lambda b: b + rng.laplace(0.0, config.lam, size=b.shape))
    return out


def privacy_budget(config: LdpConfig) -> float:
    """Upper bound 2*delta/lambda on epsilon; ``math.inf`` when there is no noise."""
    if config.lam == 0:
        return math.inf
    return 2.0 * config.delta / config.lam
