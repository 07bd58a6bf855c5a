import math

import numpy as np
import pytest

from fairfedgnn.data import ConfigurationError
from fairfedgnn.model import GradientSet
from fairfedgnn.privacy import LdpConfig, NonFiniteGradientError, clip, clip_and_noise, privacy_budget
from fairfedgnn.verify import suite_ldp


def _grad(vec):
    vec = np.asarray(vec, float)
    return GradientSet([vec[:4].reshape(2, 2)], [vec[4:8]], vec[8:10], np.array([3]), vec[10:12].reshape(1, 2))


def _vector_with_norm(norm, seed=0):
    v = np.random.default_rng(seed).normal(size=12)
    return v / np.linalg.norm(v) * norm


def test_inside_ball_unchanged():
    g = _grad(_vector_with_norm(0.1))
    out = clip_and_noise(g, LdpConfig(0.4, 0.0, True))
    np.testing.assert_array_equal(out.flat(), g.flat())


def test_outside_ball_rescaled_direction_kept():
    v = _vector_with_norm(2.0)
    out = clip_and_noise(_grad(v), LdpConfig(0.4, 0.0, True))
    assert out.norm() == pytest.approx(0.4, rel=1e-12)
    np.testing.assert_allclose(out.flat(), v * 0.2, rtol=1e-12)


def test_clip_is_global_not_per_block():
    v = np.zeros(12)
    v[0], v[8] = 3.0, 4.0
    out = clip(_grad(v), 1.0)
    assert out.thetas[0][0, 0] == pytest.approx(0.6)
    assert out.user[0] == pytest.approx(0.8)


def test_disabled_is_identity_and_nonfinite_rejected():
    g = _grad(_vector_with_norm(5.0))
    assert clip_and_noise(g, LdpConfig(enabled=False)) is g
    v = np.ones(12)
    v[3] = np.nan
    with pytest.raises(NonFiniteGradientError):
        clip_and_noise(_grad(v), LdpConfig(enabled=True), np.random.default_rng(0))


def test_noise_needs_rng():
    with pytest.raises(ValueError):
        clip_and_noise(_grad(np.ones(12)), LdpConfig(0.4, 0.15, True))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LdpConfig(0.0, 0.1)
    with pytest.raises(ConfigurationError):
        LdpConfig(0.4, -0.1)


def test_noise_statistics():
    result = suite_ldp(0)
    assert result.passed, result.detail


def test_noise_is_laplace_with_scale_lambda():
    rng = np.random.default_rng(1)
    n = 100_000
    g = GradientSet([np.zeros((1, 1))], [np.zeros(2)], np.zeros(1), np.arange(n), np.zeros((n, 1)))
    noise = clip_and_noise(g, LdpConfig(0.4, 0.15, True), rng).flat()
    # Laplace(0, b): variance 2 b^2, P(|X| > b) = 1/e
    assert noise.var() == pytest.approx(2 * 0.15 ** 2, rel=0.03)
    assert np.mean(np.abs(noise) > 0.15) == pytest.approx(math.exp(-1), abs=0.01)


def test_budget_formula():
    assert privacy_budget(LdpConfig(0.4, 0.15)) == 2 * 0.4 / 0.15
    assert privacy_budget(LdpConfig(0.2, 0.4)) == 1.0
    assert privacy_budget(LdpConfig(0.1, 0.4)) == privacy_budget(LdpConfig(0.2, 0.4)) / 2
    assert privacy_budget(LdpConfig(0.4, 0.0)) == math.inf
