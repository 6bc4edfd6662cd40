import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sembid.auction_env import STATE_DIM, CampaignState, MarketConfig, run_episode
from sembid.baselines import BcConfig, PidConfig, PidController, bc_train, pid_step
from sembid.errors import ConfigurationError, DomainError


# ----------------------------------------------------------------------
# PID pacing
# ----------------------------------------------------------------------
def test_zero_error_gives_zero_multiplier():
    cfg = PidConfig()
    assert pid_step(cfg, [], 0.5) == 0.0
    assert pid_step(cfg, [0.0] * 10, 0.5) == 0.0


def test_constant_error_grows_linearly_under_integral_gain():
    cfg = PidConfig(kp=0.0, ki=1.0)
    for n in (1, 5, 20):
        assert pid_step(cfg, [0.1] * n, 0.5) == pytest.approx(0.1 * n)


def test_integral_does_not_wind_up_at_the_cap():
    cfg = PidConfig(kp=0.0, ki=1.0, lambda_max=1.0)
    assert pid_step(cfg, [1.0] * 10, 0.5) == 1.0
    # a wound-up integral would keep the output pinned at the cap
    assert pid_step(cfg, [1.0] * 10 + [-0.5], 0.5) == pytest.approx(0.5)


def test_gain_multiplier_bands():
    cfg = PidConfig()
    assert cfg.gain_multiplier(0.9) == 1.5
    assert cfg.gain_multiplier(0.5) == 1.0
    assert cfg.gain_multiplier(0.1) == 0.5
    assert pid_step(cfg, [0.01], 0.9) == pytest.approx(1.5 * pid_step(cfg, [0.01], 0.5))


@pytest.mark.parametrize(
    "overrides",
    [dict(kp=-1.0), dict(ki=math.nan), dict(budget_low=0.8, budget_high=0.7), dict(lambda_max=0.0)],
)
def test_invalid_pid_config(overrides):
    with pytest.raises(ConfigurationError):
        PidConfig(**overrides)


@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=30))
def test_controller_matches_replay(errors):
    cfg = PidConfig(lambda_max=150.0)
    controller = PidController(cfg)
    for error in errors:
        output = controller.update(error, 0.5)
    assert output == pytest.approx(pid_step(cfg, errors, 0.5))
    assert 0.0 <= output <= 150.0


def test_pid_paces_stationary_medium_market():
    on_target = 0
    for seed in range(20):
        market = MarketConfig.preset("Medium", seed=seed, budget_scale=1.0, traffic_amplitude=0.0)
        record = run_episode(market, PidController())
        if abs(record.ledger.total_spend - market.budget) <= 0.1 * market.budget:
            on_target += 1
    assert on_target >= 18


def test_controller_respects_market_cap():
    market = MarketConfig.preset("High", seed=0)
    record = run_episode(market, PidController(PidConfig(kp=1e6)))
    assert max(record.actions) <= market.lambda_max


# ----------------------------------------------------------------------
# Behavior cloning
# ----------------------------------------------------------------------
def _state(features):
    return CampaignState(
        period=1,
        n_periods=48,
        budget=100.0,
        budget_remaining=100.0,
        target_cpa=9.0,
        lambda_max=150.0,
        features=np.asarray(features, dtype=np.float64),
        batch_mean_pvalue=0.05,
    )


def test_bc_recovers_linear_policy():
    rng = np.random.default_rng(0)
    states = rng.normal(size=(400, 4))
    actions = 2.0 * states[:, 0] - states[:, 1] + 5.0
    policy = bc_train(states, actions, cfg=BcConfig(hidden=(32, 32), lr=3e-3, steps=1500, batch_size=64))
    test = rng.normal(size=(100, 4))
    expected = 2.0 * test[:, 0] - test[:, 1] + 5.0
    error = np.mean((policy.predict(test) - expected) ** 2)
    assert error < 0.05 * np.var(expected)


def test_bc_ignores_masked_steps():
    rng = np.random.default_rng(1)
    states = rng.normal(size=(2, 10, 3))
    actions = np.full((2, 10), 4.0)
    actions[:, 5:] = 1000.0
    mask = np.zeros((2, 10))
    mask[:, :5] = 1.0
    policy = bc_train(states, actions, mask, BcConfig(hidden=(8,), steps=5))
    assert policy.action_mean == pytest.approx(4.0)


def test_bc_output_is_clipped_to_market_range():
    states = np.zeros((20, STATE_DIM))
    high = bc_train(states, np.full(20, 400.0), cfg=BcConfig(hidden=(4,), steps=1), lambda_max=150.0)
    low = bc_train(states, np.full(20, -50.0), cfg=BcConfig(hidden=(4,), steps=1), lambda_max=150.0)
    assert high.act(_state(np.zeros(STATE_DIM))) == 150.0
    assert low.act(_state(np.zeros(STATE_DIM))) == 0.0


def test_bc_rejects_bad_inputs():
    with pytest.raises(DomainError):
        bc_train(np.zeros((5, 3)), np.zeros(4))
    with pytest.raises(DomainError):
        bc_train(np.zeros((5, 3)), np.zeros(5), np.zeros(5))
    with pytest.raises(ConfigurationError):
        BcConfig(steps=0)
