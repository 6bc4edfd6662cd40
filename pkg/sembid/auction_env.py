"""Synthetic GSP auction market implementing the constrained episodic bidding MDP."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, EpisodeStateError

logger = logging.getLogger(__name__)

BUDGET_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5)
STATE_DIM = 16
HISTORY_WINDOW = 3

STATE_FEATURES = (
    "time_remaining_ratio",
    "time_elapsed",
    "budget_remaining_ratio",
    "consumption_rate",
    "budget_pacing",
    "exhaustion_risk",
    "current_cpa",
    "target_cpa",
    "cpa_violation",
    "historical_cvr",
    "avg_bid_last3",
    "win_rate_last3",
    "avg_cost_last3",
    "bid_volatility",
    "batch_mean_pvalue",
    "traffic_ratio",
)


class Scenario(str, Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"

    @classmethod
    def parse(cls, value: "Scenario | str") -> "Scenario":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).lower() == member.value.lower():
                return member
        raise ConfigurationError(
            f"Unknown scenario preset {value!r}; expected one of {[m.value for m in cls]}"
        )


@dataclass(frozen=True)
class ScenarioPreset:
    """Market constants for one conversion regime."""

    cpa_range: tuple[float, float]
    conversion_rate: float
    base_budget: float
    lambda_max: float
    competitor_level: float

    @property
    def cpa_midpoint(self) -> float:
        return 0.5 * (self.cpa_range[0] + self.cpa_range[1])


# Budgets are calibrated so that bidding the CPA midpoint on every period spends
# roughly 0.85x (High), 1.3x (Medium) and 1.15x (Low) of the nominal budget.
PRESETS: dict[Scenario, ScenarioPreset] = {
    Scenario.HIGH: ScenarioPreset((6.0, 12.0), 0.1121, 4500.0, 150.0, 0.9),
    Scenario.MEDIUM: ScenarioPreset((15.0, 50.0), 0.0385, 4000.0, 150.0, 0.8),
    Scenario.LOW: ScenarioPreset((60.0, 130.0), 0.0145, 5000.0, 3000.0, 0.8),
}


def stream_seed(seed: int, *keys: int | str) -> np.random.SeedSequence:
    """Return a seed sequence derived from *seed* and stable stream keys."""

    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.SeedSequence(entropy)


def named_rng(seed: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, *keys))


@dataclass(frozen=True)
class MarketConfig:
    """Scenario constants, budget regime and seed of one auction episode."""

    scenario: Scenario = Scenario.HIGH
    n_periods: int = 48
    impressions_per_period: float = 200.0
    traffic_amplitude: float = 0.3
    pvalue_sigma: float = 0.6
    conversion_rate: float = 0.1121
    competitor_median: float = 8.1
    competitor_sigma: float = 0.5
    base_budget: float = 4500.0
    target_cpa: float = 9.0
    budget_scale: float = 1.0
    lambda_max: float = 150.0
    epsilon: float = 1e-10
    beta: float = 2.0
    conversion_weight: float = 10.0
    min_remaining_budget: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scenario", Scenario.parse(self.scenario))
        preset = PRESETS[self.scenario]
        low, high = preset.cpa_range
        if self.n_periods < 1:
            raise ConfigurationError("n_periods must be at least 1")
        if self.impressions_per_period <= 0:
            raise ConfigurationError("impressions_per_period must be positive")
        if not 0.0 <= self.traffic_amplitude < 1.0:
            raise ConfigurationError("traffic_amplitude must lie in [0, 1)")
        if not 0.0 < self.conversion_rate < 1.0:
            raise ConfigurationError("conversion_rate must lie in (0, 1)")
        if self.pvalue_sigma <= 0 or self.competitor_sigma <= 0 or self.competitor_median <= 0:
            raise ConfigurationError("distribution parameters must be positive")
        if self.base_budget < 0:
            raise ConfigurationError("base_budget must be non-negative")
        if not low <= self.target_cpa <= high:
            raise ConfigurationError(
                f"target_cpa {self.target_cpa} outside the {self.scenario.value} range [{low}, {high}]"
            )
        if self.budget_scale not in BUDGET_SCALES:
            raise ConfigurationError(f"budget_scale must be one of {BUDGET_SCALES}")
        if self.lambda_max <= 0:
            raise ConfigurationError("lambda_max must be positive")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.beta != 2.0:
            raise ConfigurationError("beta is fixed at 2")
        if self.min_remaining_budget < 0:
            raise ConfigurationError("min_remaining_budget must be non-negative")

    @classmethod
    def preset(
        cls,
        scenario: Scenario | str = Scenario.HIGH,
        *,
        seed: int = 0,
        budget_scale: float = 1.0,
        target_cpa: float | None = None,
        **overrides,
    ) -> "MarketConfig":
        """Build the configuration of *scenario*, sampling the target CPA from *seed* when omitted."""

        scenario = Scenario.parse(scenario)
        spec = PRESETS[scenario]
        if target_cpa is None:
            target_cpa = sample_target_cpa(scenario, seed)
        values = dict(
            scenario=scenario,
            conversion_rate=spec.conversion_rate,
            competitor_median=spec.competitor_level * spec.cpa_midpoint,
            base_budget=spec.base_budget,
            lambda_max=spec.lambda_max,
            target_cpa=float(target_cpa),
            budget_scale=float(budget_scale),
            seed=int(seed),
        )
        values.update(overrides)
        return cls(**values)

    @property
    def preset_spec(self) -> ScenarioPreset:
        return PRESETS[self.scenario]

    @property
    def budget(self) -> float:
        return self.budget_scale * self.base_budget

    @property
    def pvalue_log_mean(self) -> float:
        # Log-normal mean exp(mu + sigma^2 / 2) equals the conversion rate.
        return math.log(self.conversion_rate) - 0.5 * self.pvalue_sigma**2

    def for_episode(self, seed: int, *, resample_target: bool = True) -> "MarketConfig":
        target = sample_target_cpa(self.scenario, seed) if resample_target else self.target_cpa
        return replace(self, seed=int(seed), target_cpa=target)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["scenario"] = self.scenario.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "MarketConfig":
        return cls(**payload)


def sample_target_cpa(scenario: Scenario | str, seed: int) -> float:
    low, high = PRESETS[Scenario.parse(scenario)].cpa_range
    rng = named_rng(seed, "target_cpa")
    return round(float(rng.uniform(low, high)), 2)


@dataclass(frozen=True)
class ImpressionBatch:
    """Impression opportunities of one period, processed in stored order."""

    period: int
    pvalues: np.ndarray
    prices: np.ndarray
    draws: np.ndarray

    def __post_init__(self) -> None:
        pvalues = np.asarray(self.pvalues, dtype=np.float64)
        prices = np.asarray(self.prices, dtype=np.float64)
        draws = np.asarray(self.draws, dtype=np.float64)
        if pvalues.ndim != 1 or pvalues.size == 0:
            raise DomainError("an impression batch must hold at least one item")
        if prices.shape != pvalues.shape or draws.shape != pvalues.shape:
            raise DomainError("pvalues, prices and draws must have equal lengths")
        if np.any((pvalues < 0) | (pvalues > 1)):
            raise DomainError("pvalues must lie in [0, 1]")
        if np.any(prices < 0):
            raise DomainError("competitor prices must be non-negative")
        object.__setattr__(self, "pvalues", pvalues)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "draws", draws)

    @classmethod
    def from_items(cls, period: int, items: Sequence[tuple[float, float, float]]) -> "ImpressionBatch":
        if not items:
            raise DomainError("an impression batch must hold at least one item")
        pvalues, prices, draws = zip(*items)
        return cls(period, np.array(pvalues), np.array(prices), np.array(draws))

    def __len__(self) -> int:
        return int(self.pvalues.size)

    @property
    def items(self) -> list[tuple[float, float, float]]:
        return list(zip(self.pvalues.tolist(), self.prices.tolist(), self.draws.tolist()))

    @property
    def mean_pvalue(self) -> float:
        return float(self.pvalues.mean())


def sample_impressions(
    cfg: MarketConfig, t: int, rng: Optional[np.random.Generator] = None
) -> ImpressionBatch:
    """Draw the impressions of period *t*; the default stream depends on ``(cfg.seed, t)`` only."""

    if not 1 <= t <= cfg.n_periods:
        raise DomainError(f"period {t} outside 1..{cfg.n_periods}")
    rng = rng if rng is not None else named_rng(cfg.seed, "impressions", t)

    phase = 2.0 * math.pi * (t - 1) / cfg.n_periods
    expected = cfg.impressions_per_period * (1.0 + cfg.traffic_amplitude * math.sin(phase))
    count = max(1, int(rng.poisson(expected)))

    pvalues = np.clip(rng.lognormal(cfg.pvalue_log_mean, cfg.pvalue_sigma, size=count), 0.0, 1.0)
    multipliers = rng.lognormal(math.log(cfg.competitor_median), cfg.competitor_sigma, size=count)
    draws = rng.random(count)
    return ImpressionBatch(period=t, pvalues=pvalues, prices=pvalues * multipliers, draws=draws)


@dataclass(frozen=True)
class PeriodOutcome:
    """Aggregated result of one period's auctions."""

    value: float
    conversions: float
    spend: float
    wins: int
    bids_dropped_for_budget: int
    impressions: int = 0
    multiplier: float = 0.0


def run_auction(
    batch: ImpressionBatch,
    multiplier: float,
    budget_remaining: float,
    *,
    lambda_max: float = math.inf,
) -> PeriodOutcome:
    """Run the period's GSP auctions for bids ``multiplier * pvalue``.

    An item is won when the bid strictly exceeds the competitor price and the
    price still fits the budget left within the period; otherwise a winning bid
    is dropped. Winners pay the competitor price.
    """

    multiplier = float(multiplier)
    budget_remaining = float(budget_remaining)
    if math.isnan(multiplier) or not 0.0 <= multiplier <= lambda_max:
        raise DomainError(f"multiplier {multiplier} outside [0, {lambda_max}]")
    if math.isnan(budget_remaining) or budget_remaining < 0:
        raise DomainError("budget_remaining must be non-negative")

    contested = np.flatnonzero(multiplier * batch.pvalues > batch.prices)
    value = 0.0
    conversions = 0.0
    spend = 0.0
    wins = 0
    dropped = 0
    for index in contested.tolist():
        price = float(batch.prices[index])
        candidate = spend + price
        if candidate > budget_remaining:
            dropped += 1
            continue
        pvalue = float(batch.pvalues[index])
        spend = candidate
        wins += 1
        value += pvalue
        if batch.draws[index] < pvalue:
            conversions += 1.0

    return PeriodOutcome(
        value=value,
        conversions=conversions,
        spend=spend,
        wins=wins,
        bids_dropped_for_budget=dropped,
        impressions=len(batch),
        multiplier=multiplier,
    )


@dataclass(frozen=True)
class ScoreBreakdown:
    value: float
    cost: float
    cpa: float
    penalty: float
    score: float


def score_from_totals(
    value: float, cost: float, target_cpa: float, *, epsilon: float = 1e-10, beta: float = 2.0
) -> ScoreBreakdown:
    cpa = cost / (value + epsilon)
    penalty = 1.0 if cpa == 0 else min((target_cpa / cpa) ** beta, 1.0)
    return ScoreBreakdown(value=value, cost=cost, cpa=cpa, penalty=penalty, score=value * penalty)


@dataclass
class EpisodeLedger:
    """Per-period outcomes of one episode and the totals derived from them."""

    budget: float
    target_cpa: float
    outcomes: list[PeriodOutcome] = field(default_factory=list)
    budget_trace: list[float] = field(default_factory=list)

    @property
    def total_spend(self) -> float:
        return sum(outcome.spend for outcome in self.outcomes)

    @property
    def total_value(self) -> float:
        return sum(outcome.value for outcome in self.outcomes)

    @property
    def total_conversions(self) -> float:
        return sum(outcome.conversions for outcome in self.outcomes)

    @property
    def total_wins(self) -> int:
        return sum(outcome.wins for outcome in self.outcomes)

    @property
    def budget_remaining(self) -> float:
        return self.budget_trace[-1] if self.budget_trace else self.budget

    @property
    def actions(self) -> list[float]:
        return [outcome.multiplier for outcome in self.outcomes]

    @property
    def rewards(self) -> list[float]:
        return [outcome.value for outcome in self.outcomes]

    def realized_cpa(self, epsilon: float = 1e-10) -> float:
        return self.total_spend / (self.total_value + epsilon)

    def score(self, *, epsilon: float = 1e-10, beta: float = 2.0) -> float:
        return compute_score(self, self.target_cpa, epsilon=epsilon, beta=beta).score


def compute_score(
    ledger: EpisodeLedger,
    target_cpa: float,
    *,
    epsilon: float = 1e-10,
    beta: float = 2.0,
    value_source: str = "pvalue",
) -> ScoreBreakdown:
    """Score an episode: value times ``min((target_cpa / CPA) ** beta, 1)``."""

    if value_source == "pvalue":
        value = ledger.total_value
    elif value_source == "conversions":
        value = ledger.total_conversions
    else:
        raise DomainError(f"unknown value_source {value_source!r}")
    return score_from_totals(value, ledger.total_spend, target_cpa, epsilon=epsilon, beta=beta)


def compute_rtg(rewards: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return-to-go ``G_t = sum_{tau >= t} r_tau`` accumulated from the last period backwards."""

    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        return rewards.copy()
    return np.cumsum(rewards[::-1])[::-1].copy()


def _spendable(budget: float, spent: float) -> float:
    """Largest remaining amount ``r`` such that ``spent + r`` does not exceed *budget* in floats."""

    remaining = max(budget - spent, 0.0)
    while remaining > 0.0 and spent + remaining > budget:
        remaining = float(np.nextafter(remaining, 0.0))
    return remaining


def compute_state_features(
    ledger: EpisodeLedger,
    cfg: MarketConfig,
    t: int,
    *,
    upcoming: Optional[ImpressionBatch] = None,
    normalizer: Optional["StateNormalizer"] = None,
) -> np.ndarray:
    """Return the 16-dim state observed before bidding on period *t*.

    Uses the first ``t - 1`` outcomes of *ledger*. History features average the
    available periods and are 0 at ``t = 1``.
    """

    if t < 1:
        raise DomainError("period index starts at 1")
    elapsed = t - 1
    if elapsed > len(ledger.outcomes):
        raise DomainError(f"ledger holds {len(ledger.outcomes)} periods, state {t} needs {elapsed}")
    outcomes = ledger.outcomes[:elapsed]
    horizon = cfg.n_periods
    budget = ledger.budget
    spent = sum(outcome.spend for outcome in outcomes)
    value = sum(outcome.value for outcome in outcomes)
    conversions = sum(outcome.conversions for outcome in outcomes)
    wins = sum(outcome.wins for outcome in outcomes)
    remaining = max(budget - spent, 0.0)

    time_elapsed = elapsed / horizon
    time_remaining = max(horizon - elapsed, 0) / horizon
    remaining_ratio = remaining / budget if budget > 0 else 0.0
    spent_ratio = spent / budget if budget > 0 else 0.0
    consumption = outcomes[-1].spend / budget if outcomes and budget > 0 else 0.0
    pacing = spent_ratio - time_elapsed

    recent = outcomes[-HISTORY_WINDOW:]
    if recent:
        recent_spend = [outcome.spend for outcome in recent]
        recent_bids = [outcome.multiplier for outcome in recent]
        avg_cost = float(np.mean(recent_spend))
        avg_bid = float(np.mean(recent_bids))
        volatility = float(np.std(recent_bids))
        impressions = sum(outcome.impressions for outcome in recent)
        win_rate = sum(outcome.wins for outcome in recent) / impressions if impressions else 0.0
        if remaining <= 0:
            exhaustion = 10.0
        else:
            exhaustion = min(avg_cost * (horizon - elapsed) / remaining, 10.0)
    else:
        avg_cost = avg_bid = volatility = win_rate = exhaustion = 0.0

    cpa_cap = 10.0 * cfg.target_cpa
    current_cpa = min(spent / (value + cfg.epsilon), cpa_cap) if spent > 0 else 0.0
    violation = max(0.0, current_cpa / cfg.target_cpa - 1.0)
    cvr = conversions / wins if wins else 0.0

    if upcoming is None and t <= horizon:
        upcoming = sample_impressions(cfg, t)
    batch_pvalue = upcoming.mean_pvalue if upcoming is not None else 0.0
    traffic = len(upcoming) / cfg.impressions_per_period if upcoming is not None else 0.0

    features = np.array(
        [
            time_remaining,
            time_elapsed,
            remaining_ratio,
            consumption,
            pacing,
            exhaustion,
            current_cpa,
            cfg.target_cpa,
            violation,
            cvr,
            avg_bid,
            win_rate,
            avg_cost,
            volatility,
            batch_pvalue,
            traffic,
        ],
        dtype=np.float64,
    )
    if normalizer is not None:
        return normalizer.transform(features)
    return features


@dataclass
class StateNormalizer:
    """Per-dimension z-scoring with statistics of a training set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, mask: Optional[np.ndarray] = None) -> "StateNormalizer":
        flat = np.asarray(states, dtype=np.float64).reshape(-1, STATE_DIM)
        if mask is not None:
            flat = flat[np.asarray(mask).reshape(-1) > 0]
        if flat.shape[0] == 0:
            raise DomainError("cannot fit normalization statistics on zero states")
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls) -> "StateNormalizer":
        return cls(mean=np.zeros(STATE_DIM), std=np.ones(STATE_DIM))

    def transform(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "features": list(STATE_FEATURES)}

    @classmethod
    def from_dict(cls, payload: dict) -> "StateNormalizer":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64), std=np.asarray(payload["std"], dtype=np.float64))


@dataclass(frozen=True)
class CampaignState:
    """Observation before bidding on ``period``: state vector plus the telemetry behind it."""

    period: int
    n_periods: int
    budget: float
    budget_remaining: float
    target_cpa: float
    lambda_max: float
    features: np.ndarray
    batch_mean_pvalue: float
    recent: tuple[PeriodOutcome, ...] = ()

    @property
    def budget_ratio(self) -> float:
        return self.budget_remaining / self.budget if self.budget > 0 else 0.0

    @property
    def time_remaining_ratio(self) -> float:
        return float(self.features[0])

    @property
    def last_outcome(self) -> Optional[PeriodOutcome]:
        return self.recent[-1] if self.recent else None


class BiddingPolicy(Protocol):
    """Anything that maps observations of one episode to bid multipliers."""

    def reset(self, cfg: MarketConfig) -> None: ...

    def act(self, state: CampaignState) -> float: ...


class AuctionEnv:
    """One episode of the constrained bidding MDP over ``cfg.n_periods`` periods."""

    def __init__(self, cfg: MarketConfig) -> None:
        self.cfg = cfg
        self.reset()

    def reset(self) -> CampaignState:
        self.ledger = EpisodeLedger(budget=self.cfg.budget, target_cpa=self.cfg.target_cpa)
        self.ledger.budget_trace.append(self.cfg.budget)
        self.period = 1
        self.done = False
        self._batch: Optional[ImpressionBatch] = sample_impressions(self.cfg, 1)
        self._state = self._observe()
        return self._state

    @property
    def state(self) -> CampaignState:
        return self._state

    @property
    def current_batch(self) -> Optional[ImpressionBatch]:
        return self._batch

    def step(self, multiplier: float) -> tuple[CampaignState, float, bool]:
        if self.done:
            raise EpisodeStateError("episode already finished; call reset() first")
        assert self._batch is not None

        spent = self.ledger.total_spend
        available = _spendable(self.cfg.budget, spent)
        outcome = run_auction(self._batch, multiplier, available, lambda_max=self.cfg.lambda_max)
        self.ledger.outcomes.append(outcome)
        remaining = self.cfg.budget - self.ledger.total_spend
        self.ledger.budget_trace.append(remaining)

        exhausted = remaining <= self.cfg.min_remaining_budget
        self.done = self.period >= self.cfg.n_periods or exhausted
        if exhausted and self.period < self.cfg.n_periods:
            logger.debug("budget exhausted after period %d of %d", self.period, self.cfg.n_periods)
        self.period += 1
        self._batch = None if self.period > self.cfg.n_periods else sample_impressions(self.cfg, self.period)
        self._state = self._observe()
        return self._state, outcome.value, self.done

    # ------------------------------------------------------------------
    def _observe(self) -> CampaignState:
        features = compute_state_features(self.ledger, self.cfg, self.period, upcoming=self._batch)
        return CampaignState(
            period=self.period,
            n_periods=self.cfg.n_periods,
            budget=self.cfg.budget,
            budget_remaining=self.ledger.budget_remaining,
            target_cpa=self.cfg.target_cpa,
            lambda_max=self.cfg.lambda_max,
            features=features,
            batch_mean_pvalue=self._batch.mean_pvalue if self._batch is not None else 0.0,
            recent=tuple(self.ledger.outcomes[-HISTORY_WINDOW:]),
        )


@dataclass
class EpisodeRecord:
    """States visited and actions taken during one episode."""

    cfg: MarketConfig
    ledger: EpisodeLedger
    states: list[CampaignState]
    actions: list[float]


def run_episode(cfg: MarketConfig, policy: BiddingPolicy) -> EpisodeRecord:
    env = AuctionEnv(cfg)
    policy.reset(cfg)
    state = env.state
    states: list[CampaignState] = []
    actions: list[float] = []
    done = False
    while not done:
        action = float(np.clip(policy.act(state), 0.0, cfg.lambda_max))
        states.append(state)
        actions.append(action)
        state, _, done = env.step(action)
    return EpisodeRecord(cfg=cfg, ledger=env.ledger, states=states, actions=actions)
