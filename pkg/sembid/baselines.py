"""Reference bidders: a budget-pacing PID controller and behavior cloning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .auction_env import PRESETS, CampaignState, MarketConfig, StateNormalizer, named_rng
from .errors import ConfigurationError, DomainError
from .tensor_autograd import MLP, AdamW, Tensor, clip_grad_norm, masked_mse, no_grad

if TYPE_CHECKING:  # pragma: no cover
    from .dataset import OfflineDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PidConfig:
    """Gains of the pacing controller, expressed per unit of the bid scale.

    The controller tracks the linear spend schedule: the error before period
    ``t`` is ``(t - 1) / T - spent / B``.
    """

    kp: float = 50.0
    ki: float = 15.0
    kd: float = 0.0
    budget_high: float = 0.7
    budget_low: float = 0.2
    gain_high_multiplier: float = 1.5
    gain_low_multiplier: float = 0.5
    lambda_max: float = math.inf

    def __post_init__(self) -> None:
        for name in ("kp", "ki", "kd", "gain_high_multiplier", "gain_low_multiplier"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and non-negative")
        if not 0.0 <= self.budget_low < self.budget_high <= 1.0:
            raise ConfigurationError("budget thresholds must satisfy 0 <= low < high <= 1")
        if not self.lambda_max > 0:
            raise ConfigurationError("lambda_max must be positive")

    def gain_multiplier(self, budget_ratio: float) -> float:
        if budget_ratio > self.budget_high:
            return self.gain_high_multiplier
        if budget_ratio < self.budget_low:
            return self.gain_low_multiplier
        return 1.0


def pid_step(
    cfg: PidConfig,
    errors: Sequence[float],
    budget_ratio: float,
    *,
    scale: float = 1.0,
    lambda_max: Optional[float] = None,
) -> float:
    """Replay *errors* through the controller and return the last multiplier.

    ``lambda = clamp(g * scale * (kp * e + ki * sum(e) + kd * delta_e), 0, lambda_max)``
    where ``g`` is the budget-ratio gain multiplier. The integral stops
    accumulating while the output sits at a bound and the error pushes further.
    """

    upper = cfg.lambda_max if lambda_max is None else lambda_max
    if not errors:
        return 0.0
    integral = 0.0
    previous = 0.0
    gain = cfg.gain_multiplier(budget_ratio) * scale
    output = 0.0
    for index, error in enumerate(errors):
        error = float(error)
        delta = error - previous if index else 0.0
        candidate = integral + error
        raw = gain * (cfg.kp * error + cfg.ki * candidate + cfg.kd * delta)
        if (raw > upper and error > 0) or (raw < 0 and error < 0):
            raw = gain * (cfg.kp * error + cfg.ki * integral + cfg.kd * delta)
        else:
            integral = candidate
        output = min(max(raw, 0.0), upper)
        previous = error
    return output


class PidController:
    """Budget-pacing bidder; one instance per episode after ``reset``."""

    def __init__(self, cfg: Optional[PidConfig] = None, *, gain_scale: float = 1.0) -> None:
        self.cfg = cfg or PidConfig()
        self.gain_scale = gain_scale
        self.reset_state()

    def reset_state(self) -> None:
        self.integral = 0.0
        self.previous_error = 0.0
        self.steps = 0
        self.scale = 1.0
        self.lambda_max = self.cfg.lambda_max

    def reset(self, market: MarketConfig) -> None:
        self.reset_state()
        self.scale = PRESETS[market.scenario].cpa_midpoint * self.gain_scale
        self.lambda_max = min(self.cfg.lambda_max, market.lambda_max)

    def act(self, state: CampaignState) -> float:
        spent_fraction = 1.0 - state.budget_ratio if state.budget > 0 else 1.0
        error = (state.period - 1) / state.n_periods - spent_fraction
        return self.update(error, state.budget_ratio)

    def update(self, error: float, budget_ratio: float) -> float:
        delta = error - self.previous_error if self.steps else 0.0
        gain = self.cfg.gain_multiplier(budget_ratio) * self.scale
        candidate = self.integral + error
        raw = gain * (self.cfg.kp * error + self.cfg.ki * candidate + self.cfg.kd * delta)
        if (raw > self.lambda_max and error > 0) or (raw < 0 and error < 0):
            raw = gain * (self.cfg.kp * error + self.cfg.ki * self.integral + self.cfg.kd * delta)
        else:
            self.integral = candidate
        self.previous_error = error
        self.steps += 1
        return min(max(raw, 0.0), self.lambda_max)


# ----------------------------------------------------------------------
# Behavior cloning
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class BcConfig:
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 100
    steps: int = 2000
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 500

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigurationError("batch_size and steps must be positive")
        if any(width < 1 for width in self.hidden):
            raise ConfigurationError("hidden widths must be positive")


class BcPolicy:
    """State-to-multiplier MLP; never looks at rewards or returns."""

    def __init__(
        self,
        network: MLP,
        action_mean: float,
        action_std: float,
        normalizer: Optional[StateNormalizer] = None,
        lambda_max: float = math.inf,
    ) -> None:
        self.network = network
        self.action_mean = action_mean
        self.action_std = action_std
        self.normalizer = normalizer
        self.lambda_max = lambda_max
        self._market_lambda_max = lambda_max

    def predict(self, states: np.ndarray) -> np.ndarray:
        """Unclipped multipliers for a batch of (already normalized) states."""

        states = np.asarray(states, dtype=np.float32)
        self.network.eval()
        with no_grad():
            out = self.network(Tensor(states.reshape(-1, states.shape[-1]), dtype=np.float32)).data[:, 0]
        return out.astype(np.float64) * self.action_std + self.action_mean

    def reset(self, market: MarketConfig) -> None:
        self._market_lambda_max = min(self.lambda_max, market.lambda_max)

    def act(self, state: CampaignState) -> float:
        features = state.features
        if self.normalizer is not None:
            features = self.normalizer.transform(features)
        value = float(self.predict(features[None, :])[0])
        return float(np.clip(value, 0.0, self._market_lambda_max))


def bc_train(
    states: np.ndarray,
    actions: np.ndarray,
    mask: Optional[np.ndarray] = None,
    cfg: Optional[BcConfig] = None,
    *,
    normalizer: Optional[StateNormalizer] = None,
    lambda_max: float = math.inf,
) -> BcPolicy:
    """Fit an MLP to logged (state, multiplier) pairs with masked MSE."""

    cfg = cfg or BcConfig()
    states = np.asarray(states, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float64)
    flat_states = states.reshape(-1, states.shape[-1])
    flat_actions = actions.reshape(-1)
    flat_mask = np.ones_like(flat_actions) if mask is None else np.asarray(mask, dtype=np.float64).reshape(-1)
    if flat_states.shape[0] != flat_actions.shape[0] or flat_mask.shape != flat_actions.shape:
        raise DomainError("states, actions and mask disagree on the number of steps")
    keep = flat_mask > 0
    if not keep.any():
        raise DomainError("behavior cloning needs at least one unmasked step")
    flat_states, flat_actions = flat_states[keep], flat_actions[keep]

    action_mean = float(flat_actions.mean())
    action_std = float(flat_actions.std()) or 1.0
    targets = ((flat_actions - action_mean) / action_std).astype(np.float32)

    rng = named_rng(cfg.seed, "bc_init")
    batches = named_rng(cfg.seed, "bc_batches")
    network = MLP((flat_states.shape[1], *cfg.hidden, 1), rng)
    optimizer = AdamW(network.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    count = flat_states.shape[0]
    batch = min(cfg.batch_size, count)
    network.train()
    for step in range(1, cfg.steps + 1):
        index = batches.choice(count, size=batch, replace=False) if batch < count else np.arange(count)
        prediction = network(Tensor(flat_states[index], dtype=np.float32))
        loss = masked_mse(prediction.reshape(batch), targets[index], np.ones(batch))
        optimizer.zero_grad()
        loss.backward()
        clip_grad_norm(optimizer.parameters, cfg.grad_clip)
        optimizer.step()
        if step % cfg.log_every == 0:
            logger.info("bc step %d loss %.6f", step, loss.item())

    return BcPolicy(network, action_mean, action_std, normalizer=normalizer, lambda_max=lambda_max)


def bc_train_dataset(dataset: "OfflineDataset", cfg: Optional[BcConfig] = None) -> BcPolicy:
    """Behavior cloning on the normalized states and actions of *dataset* only."""

    normalizer = dataset.normalizer
    states = normalizer.transform(dataset.states)
    return bc_train(
        states,
        dataset.actions,
        dataset.mask,
        cfg,
        normalizer=normalizer,
        lambda_max=dataset.market.lambda_max,
    )


def bc_act(policy: BcPolicy, state: CampaignState) -> float:
    return policy.act(state)
