import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairfedgnn.data import S0, S1, ConfigurationError
from fairfedgnn.fairness import (
    SCALE_MAX,
    SCALE_MIN,
    EpochNoise,
    EvaluationError,
    FairnessConfig,
    GroupStats,
    StatsContribution,
    aggregate_stats,
    disparity,
    make_contribution,
    performance,
    scale_factor,
)
from fairfedgnn.verify import suite_group_stats


def exact_scale(beta, alpha, P, Q, member):
    """Rational-arithmetic evaluation of 1 - beta*R*|P-Q|^(alpha-1)."""
    beta, P, Q = Fraction(beta), Fraction(P), Fraction(Q)
    if beta == 0 or P == Q:
        return Fraction(1)
    R = alpha * (-1 if P < Q else 1) * (-1 if member != S0 else 1)
    return 1 - beta * R * abs(P - Q) ** (alpha - 1)


def test_performance_is_negated_loss():
    assert performance(0.81) == -0.81


def test_disparity_examples():
    groups = {0: S0, 1: S1, 2: S0}
    assert disparity({0: -1.0, 1: -1.0, 2: -1.0}, groups) == 0.0
    assert disparity({0: 0.5, 1: 0.3}, groups) == pytest.approx(0.2)
    with pytest.raises(EvaluationError):
        disparity({0: 0.5, 2: 0.1}, groups)


def test_disparity_alpha_two_matches_bruteforce():
    rng = np.random.default_rng(0)
    groups = {u: S0 if u < 9 else S1 for u in range(20)}
    metric = {u: float(rng.normal()) for u in range(20)}
    s0 = [metric[u] for u in range(20) if groups[u] == S0]
    s1 = [metric[u] for u in range(20) if groups[u] == S1]
    expected = (sum(s0) / len(s0) - sum(s1) / len(s1)) ** 2
    assert disparity(metric, groups, alpha=2) == pytest.approx(expected, rel=1e-12)


def test_scale_beta_zero_is_one():
    for member in (S0, S1):
        assert scale_factor(FairnessConfig(0.0, 1), GroupStats(0.2, -3.0), member) == 1.0


def test_scale_superior_group_slowed():
    assert scale_factor(FairnessConfig(0.5, 1), GroupStats(-0.5, -0.9), S0) == 0.5


def test_scale_alpha_two_example():
    got = scale_factor(FairnessConfig(0.3, 2), GroupStats(0.8, 0.5), S1)
    assert exact_scale("0.3", 2, "0.8", "0.5", S1) == Fraction(118, 100)
    assert got == pytest.approx(1.18, abs=1e-12)


@pytest.mark.parametrize("member", [S0, S1])
@pytest.mark.parametrize("P,Q", [(-0.5, -0.9), (-0.9, -0.5)])
def test_scale_alpha_one_four_sign_cases(member, P, Q):
    expected = float(exact_scale("0.3", 1, P, Q, member))
    assert scale_factor(FairnessConfig(0.3, 1), GroupStats(P, Q), member) == pytest.approx(expected, abs=1e-15)
    assert expected in (pytest.approx(0.7), pytest.approx(1.3))


def test_scale_tie_rule_and_clamp():
    assert scale_factor(FairnessConfig(0.9, 2), GroupStats(0.4, 0.4), S1) == 1.0
    assert scale_factor(FairnessConfig(0.9, 2), GroupStats(5.0, 0.0), S0) == SCALE_MIN
    assert scale_factor(FairnessConfig(0.9, 2), GroupStats(5.0, 0.0), S1) == SCALE_MAX


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 0.99), st.sampled_from([1, 2]), st.floats(-5, 5), st.floats(-5, 5),
       st.sampled_from([S0, S1]))
def test_scale_matches_rational_oracle(beta, alpha, P, Q, member):
    got = scale_factor(FairnessConfig(beta, alpha), GroupStats(P, Q), member)
    exp = min(max(float(exact_scale(beta, alpha, P, Q, member)), SCALE_MIN), SCALE_MAX)
    assert got == pytest.approx(exp, rel=1e-12, abs=1e-12)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FairnessConfig(1.0, 1)
    with pytest.raises(ConfigurationError):
        FairnessConfig(0.5, 3)
    with pytest.raises(ConfigurationError):
        FairnessConfig(0.5, 1, sigma=-1)


def test_contribution_routing_without_noise():
    assert make_contribution(-0.9, S0, 0.0) == StatsContribution(P_per=-0.9, P_add=1.0, Q_per=0.0, Q_add=0.0)
    assert make_contribution(-1.2, S1, 0.0) == StatsContribution(P_per=0.0, P_add=0.0, Q_per=-1.2, Q_add=1.0)


def test_contribution_with_seeded_noise():
    noise = EpochNoise(0.1, seed=3, stream=4)
    e = np.random.default_rng([3, 4, 7, 12]).normal(0.0, 0.1, size=4)
    c = make_contribution(-0.9, S0, 0.1, noise.draw(12, 7))
    assert (c.P_per, c.Q_per, c.P_add, c.Q_add) == (-0.9 + e[0], e[1], 1.0 + e[2], e[3])


def test_epoch_noise_fixed_within_epoch():
    noise = EpochNoise(0.2, seed=1)
    a = noise.draw(5, 2)
    assert noise.draw(5, 2) is a
    assert not np.array_equal(noise.draw(5, 3), a)
    noise.forget_before(3)
    np.testing.assert_array_equal(noise.draw(5, 2), a)  # regenerated identically
    assert np.all(EpochNoise(0.0, 1).draw(0, 0) == 0)


def test_aggregate_exact_means():
    contribs = [make_contribution(-1.0, S0, 0), make_contribution(-3.0, S0, 0), make_contribution(-2.0, S1, 0)]
    assert aggregate_stats(contribs) == GroupStats(-2.0, -2.0)


def test_aggregate_floor_keeps_previous(caplog):
    with caplog.at_level(logging.INFO, logger="fairfedgnn.fairness"):
        stats = aggregate_stats([make_contribution(-0.7, S0, 0)], previous=GroupStats(0.1, -0.4))
    assert stats == GroupStats(-0.7, -0.4)
    assert "below floor" in caplog.text
    with pytest.raises(ValueError):
        aggregate_stats([])


def test_aggregate_random_fixture_exact():
    rng = np.random.default_rng(2)
    metric = rng.uniform(-3, 0, 300)
    member = rng.integers(0, 2, 300)
    stats = aggregate_stats(make_contribution(m, g, 0) for m, g in zip(metric, member))
    assert abs(stats.P - metric[member == S0].mean()) < 1e-12
    assert abs(stats.Q - metric[member == S1].mean()) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_noisy_aggregate_within_three_standard_errors(seed):
    result = suite_group_stats(seed)
    assert result.passed, result.detail
