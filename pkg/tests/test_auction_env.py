import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sembid.auction_env import (
    BUDGET_SCALES,
    PRESETS,
    STATE_DIM,
    STATE_FEATURES,
    AuctionEnv,
    EpisodeLedger,
    ImpressionBatch,
    MarketConfig,
    PeriodOutcome,
    Scenario,
    StateNormalizer,
    _spendable,
    compute_rtg,
    compute_score,
    compute_state_features,
    run_auction,
    run_episode,
    sample_impressions,
    sample_target_cpa,
    score_from_totals,
)
from sembid.errors import ConfigurationError, DomainError, EpisodeStateError


def _outcome(value, spend, conversions=0.0, wins=1, multiplier=1.0):
    return PeriodOutcome(
        value=value,
        conversions=conversions,
        spend=spend,
        wins=wins,
        bids_dropped_for_budget=0,
        impressions=10,
        multiplier=multiplier,
    )


def _ledger(pairs, target_cpa=9.0, budget=1000.0):
    return EpisodeLedger(budget=budget, target_cpa=target_cpa, outcomes=[_outcome(v, c) for v, c in pairs])


def _brute_force(items, multiplier, budget):
    value = conversions = spend = 0.0
    wins = dropped = 0
    for pvalue, price, draw in items:
        if not multiplier * pvalue > price:
            continue
        if spend + price > budget:
            dropped += 1
            continue
        spend += price
        wins += 1
        value += pvalue
        conversions += 1.0 if draw < pvalue else 0.0
    return value, conversions, spend, wins, dropped


class ConstantPolicy:
    def __init__(self, value):
        self.value = value

    def reset(self, cfg):
        pass

    def act(self, state):
        return self.value


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------
def test_presets_match_scenario_constants():
    assert PRESETS[Scenario.HIGH].cpa_range == (6.0, 12.0)
    assert PRESETS[Scenario.MEDIUM].base_budget == 4000.0
    assert PRESETS[Scenario.LOW].lambda_max == 3000.0
    assert PRESETS[Scenario.HIGH].cpa_midpoint == 9.0


def test_preset_samples_target_cpa_inside_range():
    for scenario in Scenario:
        low, high = PRESETS[scenario].cpa_range
        for seed in range(20):
            cfg = MarketConfig.preset(scenario, seed=seed)
            assert low <= cfg.target_cpa <= high
            assert cfg.target_cpa == sample_target_cpa(scenario, seed)


def test_budget_scales_nominal_budget():
    for rho in BUDGET_SCALES:
        cfg = MarketConfig.preset("High", seed=1, budget_scale=rho)
        assert cfg.budget == pytest.approx(4500.0 * rho)


def test_invalid_scenario_and_budget_scale_rejected():
    with pytest.raises(ConfigurationError):
        MarketConfig.preset("Extreme")
    with pytest.raises(ConfigurationError):
        MarketConfig.preset("High", budget_scale=0.9)
    with pytest.raises(ConfigurationError):
        MarketConfig.preset("High", target_cpa=50.0)


def test_market_config_round_trips_through_dict():
    cfg = MarketConfig.preset("Medium", seed=3, budget_scale=0.75)
    assert MarketConfig.from_dict(cfg.to_dict()) == cfg


# ----------------------------------------------------------------------
# Auction
# ----------------------------------------------------------------------
def test_auction_strict_win_rule_and_gsp_price():
    batch = ImpressionBatch.from_items(1, [(0.5, 5.0, 0.9), (0.5, 4.0, 0.1)])
    outcome = run_auction(batch, 10.0, 100.0)
    # bid 5.0 ties the first price and loses; the second is won at its price
    assert outcome.wins == 1
    assert outcome.spend == 4.0
    assert outcome.value == 0.5
    assert outcome.conversions == 1.0


def test_auction_drops_bids_that_overrun_budget():
    batch = ImpressionBatch.from_items(1, [(0.2, 1.0, 0.5), (0.2, 3.0, 0.5), (0.2, 0.5, 0.5)])
    outcome = run_auction(batch, 100.0, 2.0)
    assert outcome.wins == 2
    assert outcome.bids_dropped_for_budget == 1
    assert outcome.spend == 1.5


def test_auction_rejects_out_of_range_multiplier():
    batch = ImpressionBatch.from_items(1, [(0.1, 1.0, 0.5)])
    with pytest.raises(DomainError):
        run_auction(batch, -1.0, 10.0)
    with pytest.raises(DomainError):
        run_auction(batch, 200.0, 10.0, lambda_max=150.0)
    with pytest.raises(DomainError):
        run_auction(batch, 1.0, -5.0)


def test_zero_multiplier_wins_nothing():
    cfg = MarketConfig.preset("High", seed=5)
    outcome = run_auction(sample_impressions(cfg, 1), 0.0, cfg.budget)
    assert outcome.wins == 0
    assert outcome.spend == 0.0


item = st.tuples(
    st.floats(0.0, 1.0),
    st.floats(0.0, 20.0),
    st.floats(0.0, 1.0, exclude_max=True),
)


@settings(max_examples=1000, deadline=None)
@given(st.lists(item, min_size=1, max_size=8), st.floats(0.0, 150.0), st.floats(0.0, 50.0))
def test_auction_matches_item_enumeration(items, multiplier, budget):
    outcome = run_auction(ImpressionBatch.from_items(1, items), multiplier, budget)
    value, conversions, spend, wins, dropped = _brute_force(items, multiplier, budget)
    assert outcome.value == value
    assert outcome.conversions == conversions
    assert outcome.spend == spend
    assert outcome.wins == wins
    assert outcome.bids_dropped_for_budget == dropped
    assert outcome.spend <= budget


def test_impressions_depend_only_on_seed_and_period():
    cfg = MarketConfig.preset("High", seed=11)
    first = sample_impressions(cfg, 7)
    second = sample_impressions(cfg, 7)
    np.testing.assert_array_equal(first.prices, second.prices)
    assert np.all((first.pvalues >= 0) & (first.pvalues <= 1))


def test_low_preset_converts_at_its_nominal_rate():
    cfg = MarketConfig.preset("Low", seed=0, impressions_per_period=20834.0, traffic_amplitude=0.0)
    rng = np.random.default_rng(5)
    items = conversions = 0
    for t in range(1, cfg.n_periods + 1):
        batch = sample_impressions(cfg, t, rng)
        items += batch.pvalues.size
        conversions += int(np.count_nonzero(batch.draws < batch.pvalues))
    assert items >= 990_000
    assert abs(conversions / items - 0.0145) < 0.002


# ----------------------------------------------------------------------
# Score
# ----------------------------------------------------------------------
SCORE_CASES = [
    ((10.0, 90.0), 9.0),
    ((10.0, 180.0), 9.0),
    ((0.0, 0.0), 9.0),
    ((0.0, 5.0), 9.0),
    ((3.0, 27.0), 9.0),
    ((3.0, 27.000001), 9.0),
    ((1.5, 0.0), 6.0),
    ((12.0, 60.0), 6.0),
    ((12.0, 144.0), 6.0),
    ((12.0, 288.0), 6.0),
    ((0.25, 10.0), 12.0),
    ((40.0, 400.0), 10.0),
    ((40.0, 401.0), 10.0),
    ((7.0, 1.0), 15.0),
    ((7.0, 700.0), 50.0),
    ((2.0, 200.0), 60.0),
    ((2.0, 120.0), 60.0),
    ((100.0, 13000.0), 130.0),
    ((1e-6, 1e-4), 100.0),
    ((5.0, 45.0), 9.0),
]


@pytest.mark.parametrize("totals, target", SCORE_CASES)
def test_score_matches_formula(totals, target):
    value, cost = totals
    ledger = _ledger([(value, cost)], target_cpa=target)
    result = compute_score(ledger, target)
    cpa = cost / (value + 1e-10)
    penalty = 1.0 if cpa == 0 else min((target / cpa) ** 2, 1.0)
    assert result.cpa == cpa
    assert result.penalty == penalty
    assert result.score == value * penalty


def test_score_boundary_and_zero_value():
    assert compute_score(_ledger([(10.0, 90.0)]), 9.0).penalty == 1.0
    assert compute_score(_ledger([(10.0, 180.0)]), 9.0).score == pytest.approx(2.5)
    assert compute_score(_ledger([(0.0, 0.0)]), 9.0).score == 0.0
    assert compute_score(_ledger([]), 9.0).score == 0.0


def test_conversion_value_source():
    ledger = EpisodeLedger(budget=100.0, target_cpa=9.0, outcomes=[_outcome(0.5, 9.0, conversions=2.0)])
    assert compute_score(ledger, 9.0, value_source="conversions").value == 2.0
    with pytest.raises(DomainError):
        compute_score(ledger, 9.0, value_source="clicks")


@given(st.floats(0.0, 100.0), st.floats(0.0, 100.0), st.floats(0.0, 100.0), st.floats(1.0, 130.0))
def test_score_is_monotone_in_value_and_bounded(value, extra, cost, target):
    low = score_from_totals(value, cost, target)
    high = score_from_totals(value + extra, cost, target)
    assert 0.0 <= low.penalty <= 1.0
    assert high.score >= low.score
    assert low.score <= value


@given(st.lists(st.floats(0.0, 10.0), max_size=48))
def test_rtg_suffix_sums(rewards):
    rtg = compute_rtg(rewards)
    assert rtg.shape == (len(rewards),)
    if rewards:
        assert rtg[0] == pytest.approx(sum(rewards))
        assert rtg[-1] == rewards[-1]
        np.testing.assert_allclose(rtg[:-1] - rtg[1:], rewards[:-1], atol=1e-9)
        assert np.all(np.diff(rtg) <= 1e-12)


@given(st.floats(0.0, 1e6), st.floats(0.0, 1e6))
def test_spendable_never_overruns(budget, spent):
    remaining = _spendable(budget, spent)
    assert remaining >= 0.0
    assert spent + remaining <= max(budget, spent)


# ----------------------------------------------------------------------
# Episodes and state
# ----------------------------------------------------------------------
def test_state_features_at_first_period():
    cfg = MarketConfig.preset("High", seed=2)
    ledger = EpisodeLedger(budget=cfg.budget, target_cpa=cfg.target_cpa)
    features = compute_state_features(ledger, cfg, 1)
    assert features.shape == (STATE_DIM,) == (len(STATE_FEATURES),)
    named = dict(zip(STATE_FEATURES, features))
    assert named["time_remaining_ratio"] == 1.0
    assert named["budget_remaining_ratio"] == 1.0
    assert named["avg_bid_last3"] == 0.0
    assert named["current_cpa"] == 0.0
    assert named["target_cpa"] == cfg.target_cpa
    assert named["batch_mean_pvalue"] > 0


def test_state_features_need_enough_history():
    cfg = MarketConfig.preset("High", seed=2)
    ledger = EpisodeLedger(budget=cfg.budget, target_cpa=cfg.target_cpa)
    with pytest.raises(DomainError):
        compute_state_features(ledger, cfg, 3)
    with pytest.raises(DomainError):
        compute_state_features(ledger, cfg, 0)


def test_episode_runs_all_periods_and_respects_budget():
    cfg = MarketConfig.preset("High", seed=4, budget_scale=0.5)
    record = run_episode(cfg, ConstantPolicy(cfg.target_cpa))
    ledger = record.ledger
    assert 1 <= len(ledger.outcomes) <= cfg.n_periods
    assert ledger.total_spend <= cfg.budget
    assert all(remaining >= 0 for remaining in ledger.budget_trace)
    assert len(ledger.budget_trace) == len(ledger.outcomes) + 1


def test_large_multiplier_exhausts_budget_early():
    cfg = MarketConfig.preset("High", seed=4, budget_scale=0.5)
    record = run_episode(cfg, ConstantPolicy(cfg.lambda_max))
    assert len(record.ledger.outcomes) < cfg.n_periods
    assert record.ledger.budget_remaining <= cfg.min_remaining_budget


def test_step_after_done_raises():
    cfg = MarketConfig.preset("High", seed=1, n_periods=2)
    env = AuctionEnv(cfg)
    _, _, done = env.step(5.0)
    assert not done
    _, _, done = env.step(5.0)
    assert done
    with pytest.raises(EpisodeStateError):
        env.step(5.0)
    env.reset()
    assert env.period == 1
    assert env.ledger.outcomes == []


def test_episodes_are_deterministic():
    cfg = MarketConfig.preset("Medium", seed=9)
    first = run_episode(cfg, ConstantPolicy(20.0)).ledger
    second = run_episode(cfg, ConstantPolicy(20.0)).ledger
    assert first.outcomes == second.outcomes


def test_policy_actions_are_clipped_to_lambda_max():
    cfg = MarketConfig.preset("High", seed=6)
    record = run_episode(cfg, ConstantPolicy(1e9))
    assert max(record.actions) == cfg.lambda_max
    record = run_episode(cfg, ConstantPolicy(-3.0))
    assert min(record.actions) == 0.0


def test_state_normalizer_fits_masked_rows():
    states = np.arange(2 * 3 * STATE_DIM, dtype=float).reshape(2, 3, STATE_DIM)
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    normalizer = StateNormalizer.fit(states, mask)
    kept = states.reshape(-1, STATE_DIM)[mask.reshape(-1) > 0]
    np.testing.assert_allclose(normalizer.mean, kept.mean(axis=0))
    restored = StateNormalizer.from_dict(normalizer.to_dict())
    np.testing.assert_allclose(restored.transform(kept), normalizer.transform(kept))
    with pytest.raises(DomainError):
        StateNormalizer.fit(states, np.zeros((2, 3)))


def test_rewards_equal_won_value():
    cfg = MarketConfig.preset("High", seed=8)
    env = AuctionEnv(cfg)
    _, reward, _ = env.step(10.0)
    assert reward == env.ledger.outcomes[0].value
    assert not math.isnan(reward)
