"""Verbalize campaign context into Task, History and Strategy texts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Dict, List, Optional, Sequence

import numpy as np

from .auction_env import (
    PRESETS,
    CampaignState,
    EpisodeLedger,
    ImpressionBatch,
    MarketConfig,
    Scenario,
    named_rng,
    sample_impressions,
)
from .errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

TEMPLATE_FORMAT_VERSION = 1


class Regime(str, Enum):
    HIGH_CONV = "HighConv"
    LOW_CONV = "LowConv"

    @classmethod
    def for_scenario(cls, scenario: Scenario | str) -> "Regime":
        # Medium reuses the high-conversion pool.
        return cls.LOW_CONV if Scenario.parse(scenario) is Scenario.LOW else cls.HIGH_CONV

    @classmethod
    def parse(cls, value: "Regime | str") -> "Regime":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ConfigurationError(f"Unknown regime {value!r}")


class PromptStyle(str, Enum):
    STANDARD = "Standard"
    CONCISE = "Concise"
    DIRECTIVE = "Directive"
    VERBOSE = "Verbose"
    STRUCTURED = "Structured"

    @classmethod
    def parse(cls, value: "PromptStyle | str") -> "PromptStyle":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ConfigurationError(f"Unknown prompt style {value!r}")


@dataclass(frozen=True)
class SemanticConfig:
    """Heuristic thresholds, conversion weight and template pool selection."""

    conversion_weight: float = 10.0
    roi_low_threshold: float = 0.5
    roi_high_threshold: float = 1.5
    cvr_epsilon: float = 0.001
    cpa_threshold: float = 0.5
    pvalue_high: float = 0.01
    pvalue_low: float = 0.001
    budget_low: float = 0.2
    budget_high: float = 0.7
    bid_high: float = 50.0
    bid_low: float = 10.0
    regime: Regime = Regime.HIGH_CONV
    style: PromptStyle = PromptStyle.STANDARD
    template_seed: int = 0
    roi_epsilon: float = 1e-10

    def __post_init__(self) -> None:
        object.__setattr__(self, "regime", Regime.parse(self.regime))
        object.__setattr__(self, "style", PromptStyle.parse(self.style))
        if self.roi_low_threshold >= self.roi_high_threshold:
            raise ConfigurationError("roi_low_threshold must be below roi_high_threshold")
        if self.pvalue_low >= self.pvalue_high:
            raise ConfigurationError("pvalue_low must be below pvalue_high")
        if self.budget_low >= self.budget_high:
            raise ConfigurationError("budget_low must be below budget_high")
        if self.bid_low >= self.bid_high:
            raise ConfigurationError("bid_low must be below bid_high")
        if self.cpa_threshold <= 0:
            raise ConfigurationError("cpa_threshold must be positive")
        if self.cvr_epsilon < 0:
            raise ConfigurationError("cvr_epsilon must be non-negative")
        if self.regime is Regime.LOW_CONV and self.style is not PromptStyle.STANDARD:
            raise ConfigurationError("prompt styles other than Standard exist only for the HighConv regime")

    @classmethod
    def for_scenario(
        cls,
        scenario: Scenario | str,
        *,
        style: PromptStyle | str = PromptStyle.STANDARD,
        template_seed: int = 0,
        **overrides,
    ) -> "SemanticConfig":
        """Defaults for *scenario*: the CPA dead band scales with the preset CPA midpoint."""

        scenario = Scenario.parse(scenario)
        reference = PRESETS[Scenario.HIGH].cpa_midpoint
        values: dict = dict(
            regime=Regime.for_scenario(scenario),
            style=style,
            template_seed=template_seed,
            cpa_threshold=0.5 * PRESETS[scenario].cpa_midpoint / reference,
        )
        if values["regime"] is Regime.LOW_CONV:
            values.update(bid_low=100.0, bid_high=500.0)
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class TemplatePool:
    """Task variants and per-category History/Strategy variants of one style."""

    style: PromptStyle
    regime: Regime
    task: tuple[str, ...]
    history: Dict[str, tuple[str, ...]]
    strategy: Dict[str, tuple[str, ...]]

    def sentences(self) -> list[str]:
        collected = list(self.task)
        for pool in (self.history, self.strategy):
            for variants in pool.values():
                collected.extend(variants)
        return collected


_POOL_FILES = {
    (Regime.HIGH_CONV, PromptStyle.STANDARD): "standard_high.json",
    (Regime.LOW_CONV, PromptStyle.STANDARD): "standard_low.json",
    (Regime.HIGH_CONV, PromptStyle.CONCISE): "concise.json",
    (Regime.HIGH_CONV, PromptStyle.DIRECTIVE): "directive.json",
    (Regime.HIGH_CONV, PromptStyle.VERBOSE): "verbose.json",
    (Regime.HIGH_CONV, PromptStyle.STRUCTURED): "structured.json",
}

_REQUIRED_HISTORY = {
    Regime.HIGH_CONV: {"ROI Low", "ROI Moderate", "ROI Good", "CVR Increase", "CVR Decrease", "CPA Increase", "CPA Decrease"},
    Regime.LOW_CONV: {"ROI Low", "ROI Moderate", "ROI Good", "Conversion Happened", "No Conversion", "CPA Increase", "CPA Decrease"},
}
_REQUIRED_STRATEGY = {
    Regime.HIGH_CONV: {"Conservative", "Moderate", "Aggressive", "High pValue", "Low pValue", "Budget Low", "Budget High"},
    Regime.LOW_CONV: {
        "Conservative", "Moderate", "Aggressive", "High pValue", "Mid pValue", "Low pValue",
        "Budget Low", "Budget Mid", "Budget High",
    },
}


@lru_cache(maxsize=None)
def load_template_pool(regime: Regime | str = Regime.HIGH_CONV, style: PromptStyle | str = PromptStyle.STANDARD) -> TemplatePool:
    """Load and validate the bundled template pool of ``(regime, style)``."""

    regime = Regime.parse(regime)
    style = PromptStyle.parse(style)
    try:
        filename = _POOL_FILES[(regime, style)]
    except KeyError:
        raise ConfigurationError(f"No template pool for regime {regime.value} and style {style.value}") from None

    text = resources.files(__package__).joinpath("templates").joinpath(filename).read_text(encoding="utf8")
    payload = json.loads(text)
    if payload.get("version") != TEMPLATE_FORMAT_VERSION:
        raise ConfigurationError(f"{filename}: unsupported template version {payload.get('version')!r}")
    if payload.get("regime") != regime.value or payload.get("style") != style.value:
        raise ConfigurationError(f"{filename}: header does not match ({regime.value}, {style.value})")

    history = {key: tuple(values) for key, values in payload["history"].items()}
    strategy = {key: tuple(values) for key, values in payload["strategy"].items()}
    if set(history) != _REQUIRED_HISTORY[regime]:
        raise ConfigurationError(f"{filename}: history categories {sorted(history)} are incomplete")
    if set(strategy) != _REQUIRED_STRATEGY[regime]:
        raise ConfigurationError(f"{filename}: strategy categories {sorted(strategy)} are incomplete")
    logger.debug("loaded template pool %s", filename)
    task = tuple(payload["task"])
    if not task or any(not variants for variants in (*history.values(), *strategy.values())):
        raise ConfigurationError(f"{filename}: every category needs at least one variant")
    return TemplatePool(style=style, regime=regime, task=task, history=history, strategy=strategy)


# ----------------------------------------------------------------------
# Classification rules
# ----------------------------------------------------------------------
def roi_value(delta_conversions: float, delta_cost: float, omega: float = 10.0, epsilon: float = 1e-10) -> float:
    return (omega * delta_conversions - delta_cost) / (delta_cost + epsilon)


def classify_roi(
    delta_conversions: float,
    delta_cost: float,
    omega: float = 10.0,
    epsilon: float = 1e-10,
    *,
    low: float = 0.5,
    high: float = 1.5,
) -> str:
    roi = roi_value(delta_conversions, delta_cost, omega, epsilon)
    if roi < low:
        return "Low"
    if roi < high:
        return "Moderate"
    return "Good"


def classify_cvr_trend(delta_cvr: float, epsilon: float = 0.001) -> str:
    if delta_cvr > epsilon:
        return "Increase"
    if delta_cvr < -epsilon:
        return "Decrease"
    return "Flat"


def classify_cpa_trend(delta_cpa: float, tau: float = 0.5) -> str:
    if tau <= 0:
        raise DomainError("the CPA dead band must be positive")
    if delta_cpa > tau:
        return "Rose"
    if delta_cpa < -tau:
        return "Dropped"
    return "Flat"


def classify_pvalue(pvalue: float, cfg: SemanticConfig) -> str:
    if pvalue > cfg.pvalue_high:
        return "High"
    if pvalue < cfg.pvalue_low:
        return "Low"
    return "Mid"


def classify_budget(budget_ratio: float, cfg: SemanticConfig) -> str:
    if budget_ratio < cfg.budget_low:
        return "Low"
    if budget_ratio > cfg.budget_high:
        return "High"
    return "Mid"


def classify_bid(reference_bid: float, cfg: SemanticConfig) -> str:
    if reference_bid > cfg.bid_high:
        return "Aggressive"
    if reference_bid < cfg.bid_low:
        return "Conservative"
    return "Moderate"


def reference_bid(target_cpa: float, budget_ratio: float, time_remaining_ratio: float) -> float:
    """Heuristic bid magnitude: target CPA scaled by how far budget runs ahead of time."""

    if time_remaining_ratio <= 0:
        pace = 5.0 if budget_ratio > 0 else 0.0
    else:
        pace = float(np.clip(budget_ratio / time_remaining_ratio, 0.0, 5.0))
    return target_cpa * pace


# ----------------------------------------------------------------------
# Text generation
# ----------------------------------------------------------------------
def _sentence(text: str) -> str:
    text = text.strip()
    return text if text.endswith((".", "!", "?")) else text + "."


def _pick(variants: Sequence[str], rng: Optional[np.random.Generator], variant: Optional[int]) -> str:
    if variant is not None:
        return variants[variant % len(variants)]
    if rng is None:
        raise DomainError("either an rng or a forced variant is required")
    return variants[int(rng.integers(len(variants)))]


def _placeholders(
    target_cpa: float = 0.0, pvalue: float = 0.0, budget_ratio: float = 0.0
) -> dict:
    return {
        "cpa": float(target_cpa),
        "pvalue": f"{pvalue:.4f}",
        "budget": f"{budget_ratio:.0%}",
        "spent": f"{1.0 - budget_ratio:.0%}",
    }


def generate_task_text(
    target_cpa: float,
    style: PromptStyle | str = PromptStyle.STANDARD,
    rng: Optional[np.random.Generator] = None,
    *,
    variant: Optional[int] = None,
    regime: Regime | str = Regime.HIGH_CONV,
) -> str:
    """Instantiate one task template with the target CPA."""

    if not target_cpa > 0:
        raise DomainError("target CPA must be positive")
    pool = load_template_pool(regime, style)
    return _sentence(_pick(pool.task, rng, variant).format(**_placeholders(target_cpa)))


@dataclass(frozen=True)
class TransitionSummary:
    """Changes observed over the previous bidding period."""

    delta_conversions: float = 0.0
    delta_cost: float = 0.0
    delta_cvr: float = 0.0
    delta_cpa: float = 0.0
    conversion_happened: bool = False


def history_categories(summary: TransitionSummary, cfg: SemanticConfig) -> list[str]:
    """Triggered History categories in emission order."""

    roi = classify_roi(
        summary.delta_conversions,
        summary.delta_cost,
        cfg.conversion_weight,
        cfg.roi_epsilon,
        low=cfg.roi_low_threshold,
        high=cfg.roi_high_threshold,
    )
    labels = [f"ROI {roi}"]
    if cfg.regime is Regime.LOW_CONV:
        labels.append("Conversion Happened" if summary.conversion_happened else "No Conversion")
    else:
        cvr = classify_cvr_trend(summary.delta_cvr, cfg.cvr_epsilon)
        if cvr != "Flat":
            labels.append(f"CVR {cvr}")
    cpa = classify_cpa_trend(summary.delta_cpa, cfg.cpa_threshold)
    if cpa == "Rose":
        labels.append("CPA Increase")
    elif cpa == "Dropped":
        labels.append("CPA Decrease")
    return labels


def generate_history_text(
    summary: TransitionSummary,
    cfg: SemanticConfig,
    rng: Optional[np.random.Generator] = None,
    *,
    variant: Optional[int] = None,
) -> str:
    pool = load_template_pool(cfg.regime, cfg.style)
    sentences = [_sentence(_pick(pool.history[label], rng, variant)) for label in history_categories(summary, cfg)]
    return " ".join(sentences)


def strategy_categories(pvalue: float, budget_ratio: float, bid: float, cfg: SemanticConfig) -> list[str]:
    """Triggered Strategy categories in emission order; HighConv has no mid bands."""

    labels: list[str] = []
    low_conv = cfg.regime is Regime.LOW_CONV
    level = classify_pvalue(pvalue, cfg)
    if level != "Mid" or low_conv:
        labels.append(f"{level} pValue")
    budget = classify_budget(budget_ratio, cfg)
    if budget != "Mid" or low_conv:
        labels.append(f"Budget {budget}")
    labels.append(classify_bid(bid, cfg))
    return labels


def generate_strategy_text(
    pvalue: float,
    budget_ratio: float,
    bid: float,
    cfg: SemanticConfig,
    rng: Optional[np.random.Generator] = None,
    *,
    variant: Optional[int] = None,
) -> str:
    if not 0.0 <= pvalue <= 1.0:
        raise DomainError(f"pValue {pvalue} outside [0, 1]")
    if not 0.0 <= budget_ratio <= 1.0:
        raise DomainError(f"budget ratio {budget_ratio} outside [0, 1]")
    if bid < 0:
        raise DomainError("reference bid must be non-negative")
    pool = load_template_pool(cfg.regime, cfg.style)
    values = _placeholders(pvalue=pvalue, budget_ratio=budget_ratio)
    sentences = [
        _sentence(_pick(pool.strategy[label], rng, variant).format(**values))
        for label in strategy_categories(pvalue, budget_ratio, bid, cfg)
    ]
    return " ".join(sentences)


def render_state_text(state: CampaignState, cfg: Optional[SemanticConfig] = None) -> str:
    """Deterministic one-line rendering of the numeric state, e.g. for probing."""

    cfg = cfg or SemanticConfig()
    percent = int(round(state.budget_ratio * 10.0)) * 10
    level = {"High": "High", "Mid": "Medium", "Low": "Low"}[classify_pvalue(state.batch_mean_pvalue, cfg)]
    hours = max(state.n_periods - state.period, 0) // 2
    unit = "hour" if hours == 1 else "hours"
    return f"Budget: {percent}%. pValue: {level}. Time remaining: {hours} {unit}."


# ----------------------------------------------------------------------
# Step context
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class StepContext:
    """Raw telemetry a composer needs to verbalize period ``period``."""

    period: int
    target_cpa: float
    budget_ratio: float
    time_remaining_ratio: float
    pvalue: float
    summary: TransitionSummary = field(default_factory=TransitionSummary)

    @property
    def reference_bid(self) -> float:
        return reference_bid(self.target_cpa, self.budget_ratio, self.time_remaining_ratio)

    @classmethod
    def from_ledger(
        cls,
        ledger: EpisodeLedger,
        cfg: MarketConfig,
        t: int,
        upcoming: Optional[ImpressionBatch] = None,
    ) -> "StepContext":
        """Context before period *t* from the first ``t - 1`` outcomes of *ledger*."""

        previous = ledger.outcomes[: t - 1]
        spent = sum(outcome.spend for outcome in previous)
        budget_ratio = max(ledger.budget - spent, 0.0) / ledger.budget if ledger.budget > 0 else 0.0
        if upcoming is None and t <= cfg.n_periods:
            upcoming = sample_impressions(cfg, t)
        pvalue = upcoming.mean_pvalue if upcoming is not None else 0.0

        summary = TransitionSummary()
        if previous:
            last = previous[-1]
            cvr_now = last.conversions / last.wins if last.wins else 0.0
            before = previous[-2] if len(previous) > 1 else None
            cvr_before = before.conversions / before.wins if before is not None and before.wins else 0.0
            cap = 10.0 * cfg.target_cpa
            cpa_now = _cumulative_cpa(previous, cfg.epsilon, cap)
            cpa_before = _cumulative_cpa(previous[:-1], cfg.epsilon, cap)
            summary = TransitionSummary(
                delta_conversions=last.conversions,
                delta_cost=last.spend,
                delta_cvr=cvr_now - cvr_before,
                delta_cpa=cpa_now - cpa_before,
                conversion_happened=last.conversions > 0,
            )

        return cls(
            period=t,
            target_cpa=cfg.target_cpa,
            budget_ratio=float(np.clip(budget_ratio, 0.0, 1.0)),
            time_remaining_ratio=max(cfg.n_periods - (t - 1), 0) / cfg.n_periods,
            pvalue=pvalue,
            summary=summary,
        )


def _cumulative_cpa(outcomes: Sequence, epsilon: float, cap: float) -> float:
    spend = sum(outcome.spend for outcome in outcomes)
    if spend <= 0:
        return 0.0
    value = sum(outcome.value for outcome in outcomes)
    return min(spend / (value + epsilon), cap)


@dataclass(frozen=True)
class SemanticTokenSet:
    """Task, History and Strategy texts of one step with the categories behind them."""

    task_text: str
    history_text: str
    strategy_text: str
    history_labels: tuple[str, ...] = ()
    strategy_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not (self.task_text and self.history_text and self.strategy_text):
            raise DomainError("semantic texts must be non-empty")

    def texts(self) -> tuple[str, str, str]:
        return self.task_text, self.history_text, self.strategy_text


class SemanticComposer:
    """Compose the three semantic signals of every step of an episode."""

    def __init__(self, cfg: Optional[SemanticConfig] = None) -> None:
        self.cfg = cfg or SemanticConfig()
        self.pool = load_template_pool(self.cfg.regime, self.cfg.style)

    def episode_rng(self, episode_seed: int) -> np.random.Generator:
        return named_rng(self.cfg.template_seed, "templates", episode_seed)

    def compose(self, context: StepContext, rng: np.random.Generator) -> SemanticTokenSet:
        history_labels = history_categories(context.summary, self.cfg)
        strategy_labels = strategy_categories(
            context.pvalue, context.budget_ratio, context.reference_bid, self.cfg
        )
        task = generate_task_text(context.target_cpa, self.cfg.style, rng, regime=self.cfg.regime)
        history = generate_history_text(context.summary, self.cfg, rng)
        strategy = generate_strategy_text(
            context.pvalue, context.budget_ratio, context.reference_bid, self.cfg, rng
        )
        return SemanticTokenSet(
            task_text=task,
            history_text=history,
            strategy_text=strategy,
            history_labels=tuple(history_labels),
            strategy_labels=tuple(strategy_labels),
        )

    def compose_episode(self, contexts: Sequence[StepContext], episode_seed: int) -> List[SemanticTokenSet]:
        rng = self.episode_rng(episode_seed)
        return [self.compose(context, rng) for context in contexts]

    # ------------------------------------------------------------------
    def pool_sentences(self, contexts: Sequence[StepContext] = ()) -> set[str]:
        """Every sentence the pool can emit for the given contexts, after substitution."""

        sentences: set[str] = set()
        for context in contexts:
            values = _placeholders(context.target_cpa, context.pvalue, context.budget_ratio)
            for template in self.pool.sentences():
                sentences.add(_sentence(template.format(**values)))
        return sentences
