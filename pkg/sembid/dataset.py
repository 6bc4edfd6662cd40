"""Offline trajectory collection, the dataset container and its CSV export."""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .auction_env import (
    BUDGET_SCALES,
    PRESETS,
    STATE_DIM,
    STATE_FEATURES,
    AuctionEnv,
    CampaignState,
    MarketConfig,
    StateNormalizer,
    compute_rtg,
    named_rng,
    stream_seed,
)
from .baselines import PidConfig, PidController
from .errors import ConfigurationError, ContainerFormatError, DataIntegrityError, DomainError
from .semantic_signals import StepContext, TransitionSummary

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SBDS"
DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sHI")

POLICY_NAMES = ("noisy_pid", "random", "constant_cpa")

CONTEXT_COLUMNS = (
    "ctx_budget_ratio",
    "ctx_time_remaining",
    "ctx_pvalue",
    "ctx_delta_conversions",
    "ctx_delta_cost",
    "ctx_delta_cvr",
    "ctx_delta_cpa",
    "ctx_conversion_happened",
)


# ----------------------------------------------------------------------
# Behavior policies
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class BehaviorMix:
    """Relative frequency of each behavior policy among generated episodes."""

    noisy_pid: float = 0.6
    random: float = 0.2
    constant_cpa: float = 0.2
    pid_noise: float = 0.25
    vary_budget: bool = True

    def __post_init__(self) -> None:
        weights = self.weights
        if any(weight < 0 for weight in weights) or sum(weights) <= 0:
            raise ConfigurationError("behavior weights must be non-negative with a positive sum")
        if self.pid_noise < 0:
            raise ConfigurationError("pid_noise must be non-negative")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.noisy_pid, self.random, self.constant_cpa)

    def choose(self, rng: np.random.Generator) -> int:
        probabilities = np.asarray(self.weights) / sum(self.weights)
        return int(rng.choice(len(POLICY_NAMES), p=probabilities))

    def to_dict(self) -> dict:
        return {
            "noisy_pid": self.noisy_pid,
            "random": self.random,
            "constant_cpa": self.constant_cpa,
            "pid_noise": self.pid_noise,
            "vary_budget": self.vary_budget,
        }


class NoisyPidPolicy(PidController):
    """PID pacing with a per-episode gain perturbation and multiplicative noise."""

    def __init__(self, rng: np.random.Generator, noise: float = 0.25) -> None:
        super().__init__(PidConfig(), gain_scale=float(rng.uniform(0.5, 1.5)))
        self.rng = rng
        self.noise = noise

    def act(self, state: CampaignState) -> float:
        value = super().act(state)
        return value * float(np.exp(self.rng.normal(0.0, self.noise)))


class RandomMultiplierPolicy:
    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.upper = 1.0

    def reset(self, market: MarketConfig) -> None:
        self.upper = 2.0 * PRESETS[market.scenario].cpa_midpoint

    def act(self, state: CampaignState) -> float:
        return float(self.rng.uniform(0.0, self.upper))


class ConstantCpaPolicy:
    """Bid the target CPA times an episode-level factor."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.factor = float(rng.uniform(0.5, 1.5))
        self.value = 0.0

    def reset(self, market: MarketConfig) -> None:
        self.value = market.target_cpa * self.factor

    def act(self, state: CampaignState) -> float:
        return self.value


def make_behavior_policy(code: int, rng: np.random.Generator, mix: BehaviorMix):
    if code == 0:
        return NoisyPidPolicy(rng, mix.pid_noise)
    if code == 1:
        return RandomMultiplierPolicy(rng)
    if code == 2:
        return ConstantCpaPolicy(rng)
    raise DomainError(f"unknown behavior policy code {code}")


# ----------------------------------------------------------------------
# Dataset
# ----------------------------------------------------------------------
@dataclass
class OfflineDataset:
    """Padded trajectories of (state, action, reward) with RTG, masks and semantic context."""

    market: MarketConfig
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtg: np.ndarray
    mask: np.ndarray
    conversions: np.ndarray
    spend: np.ndarray
    context: Dict[str, np.ndarray]
    seeds: List[int]
    target_cpa: List[float]
    budget_scales: List[float]
    policies: List[int]
    normalizer: StateNormalizer
    behavior_mix: BehaviorMix = field(default_factory=BehaviorMix)
    seed: int = 0

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[1])

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)

    @property
    def max_return(self) -> float:
        return float(self.rtg[:, 0].max()) if len(self) else 0.0

    @property
    def action_mean(self) -> float:
        return float(self.actions[self.mask > 0].mean())

    @property
    def action_std(self) -> float:
        return float(self.actions[self.mask > 0].std()) or 1.0

    def episode_market(self, index: int) -> MarketConfig:
        return MarketConfig.from_dict(
            {
                **self.market.to_dict(),
                "seed": self.seeds[index],
                "target_cpa": self.target_cpa[index],
                "budget_scale": self.budget_scales[index],
            }
        )

    def step_context(self, index: int, step: int) -> StepContext:
        """Semantic context of 0-based *step* of trajectory *index*."""

        column = {name: float(values[index, step]) for name, values in self.context.items()}
        summary = TransitionSummary(
            delta_conversions=column["ctx_delta_conversions"],
            delta_cost=column["ctx_delta_cost"],
            delta_cvr=column["ctx_delta_cvr"],
            delta_cpa=column["ctx_delta_cpa"],
            conversion_happened=column["ctx_conversion_happened"] > 0.5,
        )
        return StepContext(
            period=step + 1,
            target_cpa=self.target_cpa[index],
            budget_ratio=float(np.clip(column["ctx_budget_ratio"], 0.0, 1.0)),
            time_remaining_ratio=column["ctx_time_remaining"],
            pvalue=float(np.clip(column["ctx_pvalue"], 0.0, 1.0)),
            summary=summary,
        )

    def contexts(self, index: int) -> List[StepContext]:
        return [self.step_context(index, step) for step in range(int(self.lengths[index]))]

    def subset(self, indices: Sequence[int]) -> "OfflineDataset":
        indices = list(indices)
        pick = np.asarray(indices, dtype=int)
        return OfflineDataset(
            market=self.market,
            states=self.states[pick],
            actions=self.actions[pick],
            rewards=self.rewards[pick],
            rtg=self.rtg[pick],
            mask=self.mask[pick],
            conversions=self.conversions[pick],
            spend=self.spend[pick],
            context={name: values[pick] for name, values in self.context.items()},
            seeds=[self.seeds[i] for i in indices],
            target_cpa=[self.target_cpa[i] for i in indices],
            budget_scales=[self.budget_scales[i] for i in indices],
            policies=[self.policies[i] for i in indices],
            normalizer=self.normalizer,
            behavior_mix=self.behavior_mix,
            seed=self.seed,
        )

    def normalized_states(self) -> np.ndarray:
        return self.normalizer.transform(self.states).astype(np.float32)

    def columns(self) -> Dict[str, np.ndarray]:
        """All (N, T) float columns in container order."""

        columns = {
            "states": self.states,
            "actions": self.actions,
            "rewards": self.rewards,
            "rtg": self.rtg,
            "mask": self.mask,
            "conversions": self.conversions,
            "spend": self.spend,
        }
        columns.update(self.context)
        return columns


@dataclass
class _Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    conversions: np.ndarray
    spend: np.ndarray
    context: Dict[str, np.ndarray]
    length: int
    seed: int
    target_cpa: float
    budget_scale: float
    policy: int


def episode_seed(seed: int, index: int) -> int:
    return int(stream_seed(seed, index).generate_state(1)[0])


def collect_episode(cfg: MarketConfig, mix: BehaviorMix, seed: int, index: int) -> _Episode:
    """Run one behavior episode and record states, actions and semantic context."""

    ep_seed = episode_seed(seed, index)
    rng = named_rng(ep_seed, "behavior")
    budget_scale = float(rng.choice(BUDGET_SCALES)) if mix.vary_budget else cfg.budget_scale
    market = MarketConfig.from_dict({**cfg.for_episode(ep_seed).to_dict(), "budget_scale": budget_scale})
    code = mix.choose(rng)
    policy = make_behavior_policy(code, rng, mix)

    horizon = market.n_periods
    states = np.zeros((horizon, STATE_DIM), dtype=np.float32)
    actions = np.zeros(horizon, dtype=np.float32)
    rewards = np.zeros(horizon, dtype=np.float32)
    conversions = np.zeros(horizon, dtype=np.float32)
    spend = np.zeros(horizon, dtype=np.float32)
    context = {name: np.zeros(horizon, dtype=np.float32) for name in CONTEXT_COLUMNS}

    env = AuctionEnv(market)
    policy.reset(market)
    done = False
    step = 0
    while not done:
        state = env.state
        step_context = StepContext.from_ledger(env.ledger, market, env.period, env.current_batch)
        action = float(np.clip(policy.act(state), 0.0, market.lambda_max))
        _, reward, done = env.step(action)
        outcome = env.ledger.outcomes[-1]

        states[step] = state.features
        actions[step] = action
        rewards[step] = reward
        conversions[step] = outcome.conversions
        spend[step] = outcome.spend
        summary = step_context.summary
        values = (
            step_context.budget_ratio,
            step_context.time_remaining_ratio,
            step_context.pvalue,
            summary.delta_conversions,
            summary.delta_cost,
            summary.delta_cvr,
            summary.delta_cpa,
            float(summary.conversion_happened),
        )
        for name, value in zip(CONTEXT_COLUMNS, values):
            context[name][step] = value
        step += 1

    return _Episode(
        states=states,
        actions=actions,
        rewards=rewards,
        conversions=conversions,
        spend=spend,
        context=context,
        length=step,
        seed=ep_seed,
        target_cpa=market.target_cpa,
        budget_scale=budget_scale,
        policy=code,
    )


def generate_offline_dataset(
    cfg: MarketConfig,
    behavior_mix: Optional[BehaviorMix] = None,
    n_trajectories: int = 100,
    seed: int = 0,
    *,
    workers: int = 1,
) -> OfflineDataset:
    """Collect *n_trajectories* behavior episodes; the result does not depend on *workers*."""

    if n_trajectories < 1:
        raise DomainError("n_trajectories must be at least 1")
    mix = behavior_mix or BehaviorMix()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(lambda i: collect_episode(cfg, mix, seed, i), range(n_trajectories)))
    else:
        episodes = [collect_episode(cfg, mix, seed, i) for i in range(n_trajectories)]

    horizon = cfg.n_periods
    mask = np.zeros((n_trajectories, horizon), dtype=np.float32)
    for row, episode in enumerate(episodes):
        mask[row, : episode.length] = 1.0
    rewards = np.stack([episode.rewards for episode in episodes])
    rtg = np.stack([compute_rtg(row.astype(np.float64)) for row in rewards]).astype(np.float32)
    states = np.stack([episode.states for episode in episodes])

    dataset = OfflineDataset(
        market=cfg,
        states=states,
        actions=np.stack([episode.actions for episode in episodes]),
        rewards=rewards,
        rtg=rtg,
        mask=mask,
        conversions=np.stack([episode.conversions for episode in episodes]),
        spend=np.stack([episode.spend for episode in episodes]),
        context={name: np.stack([episode.context[name] for episode in episodes]) for name in CONTEXT_COLUMNS},
        seeds=[episode.seed for episode in episodes],
        target_cpa=[episode.target_cpa for episode in episodes],
        budget_scales=[episode.budget_scale for episode in episodes],
        policies=[episode.policy for episode in episodes],
        normalizer=StateNormalizer.fit(states, mask),
        behavior_mix=mix,
        seed=seed,
    )
    logger.info(
        "generated %d trajectories (%s preset), mean length %.1f, max return %.3f",
        n_trajectories,
        cfg.scenario.value,
        float(dataset.lengths.mean()),
        dataset.max_return,
    )
    return dataset


# ----------------------------------------------------------------------
# Container
# ----------------------------------------------------------------------
def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(dataset: OfflineDataset, path: str | Path) -> Path:
    """Write the columnar container and its JSON sidecar; output is byte-stable for equal datasets."""

    path = Path(path)
    buffers: List[bytes] = []
    entries = []
    offset = 0
    for name, values in dataset.columns().items():
        raw = np.ascontiguousarray(values, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(values.shape), "offset": offset, "nbytes": len(raw)})
        buffers.append(raw)
        offset += len(raw)

    header = {
        "version": DATASET_VERSION,
        "n_trajectories": len(dataset),
        "horizon": dataset.horizon,
        "columns": entries,
        "seeds": list(dataset.seeds),
        "target_cpa": list(dataset.target_cpa),
        "budget_scales": list(dataset.budget_scales),
        "policies": list(dataset.policies),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(header_bytes)) + header_bytes + b"".join(buffers))

    sidecar = {
        "format_version": DATASET_VERSION,
        "market": dataset.market.to_dict(),
        "normalization": dataset.normalizer.to_dict(),
        "behavior_mix": dataset.behavior_mix.to_dict(),
        "seed": dataset.seed,
        "n_trajectories": len(dataset),
        "max_return": dataset.max_return,
        "action_mean": dataset.action_mean,
        "action_std": dataset.action_std,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf8")
    return path


def load_dataset(path: str | Path) -> OfflineDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"Dataset sidecar not found: {side}")

    payload = path.read_bytes()
    if len(payload) < _DATASET_HEADER.size:
        raise ContainerFormatError("truncated dataset header", len(payload))
    magic, version, header_length = _DATASET_HEADER.unpack_from(payload, 0)
    if magic != DATASET_MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise ContainerFormatError(f"unsupported dataset version {version}", 4)
    start = _DATASET_HEADER.size
    if start + header_length > len(payload):
        raise ContainerFormatError("truncated dataset manifest", start)
    try:
        header = json.loads(payload[start : start + header_length].decode("utf8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"unreadable dataset manifest: {exc}", start) from None

    base = start + header_length
    columns: Dict[str, np.ndarray] = {}
    for entry in header["columns"]:
        begin = base + entry["offset"]
        expected = int(np.prod(entry["shape"])) * 4
        if entry["nbytes"] != expected:
            raise ContainerFormatError(f"column {entry['name']} size does not match its shape", begin)
        if begin + entry["nbytes"] > len(payload):
            raise ContainerFormatError(f"truncated column {entry['name']}", begin)
        values = np.frombuffer(payload, dtype="<f4", count=expected // 4, offset=begin)
        columns[entry["name"]] = values.reshape(entry["shape"]).astype(np.float32)
    end = base + sum(entry["nbytes"] for entry in header["columns"])
    if end != len(payload):
        raise ContainerFormatError("trailing bytes after the last column", end)

    sidecar = json.loads(side.read_text(encoding="utf8"))
    if sidecar.get("n_trajectories") != header["n_trajectories"]:
        raise DataIntegrityError("dataset sidecar and container disagree on the trajectory count")
    missing = {"states", "actions", "rewards", "rtg", "mask", "conversions", "spend", *CONTEXT_COLUMNS} - set(columns)
    if missing:
        raise DataIntegrityError(f"dataset is missing columns {sorted(missing)}")

    mix_payload = sidecar.get("behavior_mix", {})
    return OfflineDataset(
        market=MarketConfig.from_dict(sidecar["market"]),
        states=columns["states"],
        actions=columns["actions"],
        rewards=columns["rewards"],
        rtg=columns["rtg"],
        mask=columns["mask"],
        conversions=columns["conversions"],
        spend=columns["spend"],
        context={name: columns[name] for name in CONTEXT_COLUMNS},
        seeds=[int(value) for value in header["seeds"]],
        target_cpa=[float(value) for value in header["target_cpa"]],
        budget_scales=[float(value) for value in header["budget_scales"]],
        policies=[int(value) for value in header["policies"]],
        normalizer=StateNormalizer.from_dict(sidecar["normalization"]),
        behavior_mix=BehaviorMix(**mix_payload) if mix_payload else BehaviorMix(),
        seed=int(sidecar.get("seed", 0)),
    )


def dataset_frame(dataset: OfflineDataset) -> pd.DataFrame:
    """Long-format table with one row per real step."""

    rows = []
    for index in range(len(dataset)):
        for step in range(int(dataset.lengths[index])):
            row = {
                "trajectory": index,
                "period": step + 1,
                "policy": POLICY_NAMES[dataset.policies[index]],
                "target_cpa": dataset.target_cpa[index],
                "budget_scale": dataset.budget_scales[index],
                "action": float(dataset.actions[index, step]),
                "reward": float(dataset.rewards[index, step]),
                "rtg": float(dataset.rtg[index, step]),
                "conversions": float(dataset.conversions[index, step]),
                "spend": float(dataset.spend[index, step]),
            }
            for feature, value in zip(STATE_FEATURES, dataset.states[index, step]):
                row[feature] = float(value)
            rows.append(row)
    return pd.DataFrame(rows)


def export_csv(dataset: OfflineDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset_frame(dataset).to_csv(path, index=False)
    return path
