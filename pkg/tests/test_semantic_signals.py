from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sembid.auction_env import STATE_DIM, CampaignState, MarketConfig, Scenario
from sembid.dataset import generate_offline_dataset
from sembid.errors import ConfigurationError, DomainError
from sembid.semantic_signals import (
    PromptStyle,
    Regime,
    SemanticComposer,
    SemanticConfig,
    StepContext,
    TransitionSummary,
    classify_bid,
    classify_budget,
    classify_cpa_trend,
    classify_cvr_trend,
    classify_pvalue,
    classify_roi,
    generate_history_text,
    generate_strategy_text,
    generate_task_text,
    history_categories,
    load_template_pool,
    reference_bid,
    render_state_text,
    strategy_categories,
)

DELTA = 1e-9
HIGH = SemanticConfig()
LOW = SemanticConfig.for_scenario("Low")


def _decomposes(text, allowed):
    """True when *text* is a space-joined sequence of sentences from *allowed*."""
    if not text:
        return True
    for sentence in allowed:
        if text.startswith(sentence):
            rest = text[len(sentence):]
            if not rest or (rest[0] == " " and _decomposes(rest[1:], allowed)):
                return True
    return False


# ----------------------------------------------------------------------
# Classification thresholds
# ----------------------------------------------------------------------
def test_roi_boundaries():
    # ROI = (10 * d - 10) / 10 = d - 1 at a cost of 10
    assert classify_roi(1.5 - DELTA, 10.0) == "Low"
    assert classify_roi(1.5 + DELTA, 10.0) == "Moderate"
    assert classify_roi(2.5 - DELTA, 10.0) == "Moderate"
    assert classify_roi(2.5 + DELTA, 10.0) == "Good"


def test_cvr_boundaries():
    assert classify_cvr_trend(0.001 + DELTA) == "Increase"
    assert classify_cvr_trend(0.001 - DELTA) == "Flat"
    assert classify_cvr_trend(-0.001 + DELTA) == "Flat"
    assert classify_cvr_trend(-0.001 - DELTA) == "Decrease"


def test_pvalue_boundaries():
    assert classify_pvalue(0.01 + DELTA, HIGH) == "High"
    assert classify_pvalue(0.01 - DELTA, HIGH) == "Mid"
    assert classify_pvalue(0.001 + DELTA, HIGH) == "Mid"
    assert classify_pvalue(0.001 - DELTA, HIGH) == "Low"


def test_budget_boundaries():
    assert classify_budget(0.2 - DELTA, HIGH) == "Low"
    assert classify_budget(0.2 + DELTA, HIGH) == "Mid"
    assert classify_budget(0.7 - DELTA, HIGH) == "Mid"
    assert classify_budget(0.7 + DELTA, HIGH) == "High"


def test_bid_boundaries():
    assert classify_bid(50.0 + DELTA, HIGH) == "Aggressive"
    assert classify_bid(50.0 - DELTA, HIGH) == "Moderate"
    assert classify_bid(10.0 + DELTA, HIGH) == "Moderate"
    assert classify_bid(10.0 - DELTA, HIGH) == "Conservative"


def test_cpa_trend_dead_band():
    assert classify_cpa_trend(0.5 + DELTA, 0.5) == "Rose"
    assert classify_cpa_trend(0.5, 0.5) == "Flat"
    assert classify_cpa_trend(-0.5 - DELTA, 0.5) == "Dropped"
    with pytest.raises(DomainError):
        classify_cpa_trend(1.0, 0.0)


finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6)


@given(finite, st.floats(0.0, 1e6), finite, finite, finite)
def test_classifiers_are_total(conversions, cost, cvr, cpa, value):
    assert classify_roi(conversions, cost) in {"Low", "Moderate", "Good"}
    assert classify_cvr_trend(cvr) in {"Increase", "Decrease", "Flat"}
    assert classify_cpa_trend(cpa) in {"Rose", "Dropped", "Flat"}
    assert classify_pvalue(value, HIGH) in {"High", "Mid", "Low"}
    assert classify_budget(value, HIGH) in {"Low", "Mid", "High"}
    assert classify_bid(value, HIGH) in {"Aggressive", "Moderate", "Conservative"}


# ----------------------------------------------------------------------
# Configuration and pools
# ----------------------------------------------------------------------
def test_scenario_defaults():
    assert SemanticConfig.for_scenario("High").regime is Regime.HIGH_CONV
    assert SemanticConfig.for_scenario("Medium").regime is Regime.HIGH_CONV
    assert LOW.regime is Regime.LOW_CONV
    assert (LOW.bid_low, LOW.bid_high) == (100.0, 500.0)
    assert SemanticConfig.for_scenario("High").cpa_threshold == pytest.approx(0.5)
    assert SemanticConfig.for_scenario("Medium").cpa_threshold == pytest.approx(0.5 * 32.5 / 9.0)


def test_low_conversion_regime_only_has_standard_style():
    with pytest.raises(ConfigurationError):
        SemanticConfig(regime="LowConv", style="Concise")
    with pytest.raises(ConfigurationError):
        load_template_pool("LowConv", "Verbose")


@pytest.mark.parametrize("style", list(PromptStyle))
def test_every_high_conversion_style_loads(style):
    pool = load_template_pool(Regime.HIGH_CONV, style)
    assert pool.task
    assert all(pool.history.values())
    assert "Budget Mid" not in pool.strategy


def test_low_conversion_pool_has_mid_bands():
    pool = load_template_pool(Regime.LOW_CONV, PromptStyle.STANDARD)
    assert {"Mid pValue", "Budget Mid", "Conversion Happened", "No Conversion"} <= set(pool.strategy) | set(pool.history)


# ----------------------------------------------------------------------
# Text generation
# ----------------------------------------------------------------------
def test_task_text_formats_target_cpa():
    assert generate_task_text(9.0, variant=1) == "Maximize conversions while maintaining CPA below 9.0."
    assert "12.3" in generate_task_text(12.34, variant=0)
    with pytest.raises(DomainError):
        generate_task_text(0.0, variant=0)
    with pytest.raises(DomainError):
        generate_task_text(9.0)


@pytest.mark.parametrize("style", list(PromptStyle))
def test_template_variants_are_drawn_uniformly(style):
    count = len(load_template_pool(Regime.HIGH_CONV, style).task)
    rendered = [generate_task_text(9.0, style, variant=index) for index in range(count)]
    assert len(set(rendered)) == count
    rng = np.random.default_rng(17)
    draws = Counter(generate_task_text(9.0, style, rng) for _ in range(10_000))
    assert set(draws) == set(rendered)
    for text in rendered:
        assert abs(draws[text] / 10_000 - 1 / count) <= 0.05, text


def test_first_period_history_is_low_roi():
    summary = TransitionSummary()
    assert history_categories(summary, HIGH) == ["ROI Low"]
    assert history_categories(summary, LOW) == ["ROI Low", "No Conversion"]
    assert generate_history_text(summary, HIGH, variant=0) == "The ROI was low after the last bid."


def test_history_categories_follow_transition():
    summary = TransitionSummary(delta_conversions=3.0, delta_cost=10.0, delta_cvr=0.01, delta_cpa=-2.0)
    assert history_categories(summary, HIGH) == ["ROI Good", "CVR Increase", "CPA Decrease"]
    summary = TransitionSummary(delta_conversions=1.0, delta_cost=10.0, delta_cpa=10.0, conversion_happened=True)
    assert history_categories(summary, LOW) == ["ROI Low", "Conversion Happened", "CPA Increase"]


def test_strategy_categories_skip_mid_bands_for_high_conversion():
    assert strategy_categories(0.005, 0.5, 20.0, HIGH) == ["Moderate"]
    assert strategy_categories(0.005, 0.5, 200.0, LOW) == ["Mid pValue", "Budget Mid", "Moderate"]
    assert strategy_categories(0.2, 0.9, 60.0, HIGH) == ["High pValue", "Budget High", "Aggressive"]


def test_strategy_text_validates_ranges():
    with pytest.raises(DomainError):
        generate_strategy_text(1.5, 0.5, 10.0, HIGH, variant=0)
    with pytest.raises(DomainError):
        generate_strategy_text(0.1, -0.1, 10.0, HIGH, variant=0)
    with pytest.raises(DomainError):
        generate_strategy_text(0.1, 0.5, -1.0, HIGH, variant=0)


def test_reference_bid_scales_with_pace():
    assert reference_bid(9.0, 0.5, 0.5) == 9.0
    assert reference_bid(9.0, 1.0, 0.1) == 45.0
    assert reference_bid(9.0, 0.3, 0.0) == 45.0
    assert reference_bid(9.0, 0.0, 0.0) == 0.0


@pytest.mark.parametrize(
    "scenario, style",
    [("High", style) for style in PromptStyle] + [("Medium", "Standard"), ("Low", "Standard")],
)
def test_emitted_sentences_come_from_pool(scenario, style):
    market = MarketConfig.preset(scenario, seed=3)
    dataset = generate_offline_dataset(market, n_trajectories=2, seed=3)
    composer = SemanticComposer(SemanticConfig.for_scenario(scenario, style=style))
    for index in range(len(dataset)):
        contexts = dataset.contexts(index)
        for context, tokens in zip(contexts, composer.compose_episode(contexts, dataset.seeds[index])):
            allowed = composer.pool_sentences([context])
            for text in tokens.texts():
                assert _decomposes(text, allowed), text


def test_episode_composition_is_deterministic():
    market = MarketConfig.preset("High", seed=1)
    dataset = generate_offline_dataset(market, n_trajectories=1, seed=1)
    composer = SemanticComposer()
    contexts = dataset.contexts(0)
    first = composer.compose_episode(contexts, 42)
    second = composer.compose_episode(contexts, 42)
    assert [t.texts() for t in first] == [t.texts() for t in second]
    other = composer.compose_episode(contexts, 43)
    assert [t.texts() for t in first] != [t.texts() for t in other]


def test_step_context_from_fresh_ledger():
    from sembid.auction_env import AuctionEnv

    market = MarketConfig.preset("High", seed=5)
    env = AuctionEnv(market)
    context = StepContext.from_ledger(env.ledger, market, 1, env.current_batch)
    assert context.budget_ratio == 1.0
    assert context.time_remaining_ratio == 1.0
    assert context.summary == TransitionSummary()
    env.step(10.0)
    context = StepContext.from_ledger(env.ledger, market, 2, env.current_batch)
    assert context.summary.delta_cost == env.ledger.outcomes[0].spend


def _state(budget_ratio, period, pvalue=0.1):
    return CampaignState(
        period=period,
        n_periods=48,
        budget=100.0,
        budget_remaining=100.0 * budget_ratio,
        target_cpa=9.0,
        lambda_max=150.0,
        features=np.zeros(STATE_DIM),
        batch_mean_pvalue=pvalue,
    )


def test_render_state_text():
    assert render_state_text(_state(0.8, 25)) == "Budget: 80%. pValue: High. Time remaining: 11 hours."
    assert render_state_text(_state(0.31, 46, 0.005)) == "Budget: 30%. pValue: Medium. Time remaining: 1 hour."
    assert render_state_text(_state(0.0, 48, 0.0001)) == "Budget: 0%. pValue: Low. Time remaining: 0 hours."


def test_scenario_enum_parsing():
    assert Scenario.parse("low") is Scenario.LOW
    assert PromptStyle.parse("structured") is PromptStyle.STRUCTURED
    with pytest.raises(ConfigurationError):
        Regime.parse("MidConv")
