"""The semantic decision transformer: token layout, training loop and rollout."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .auction_env import AuctionEnv, EpisodeLedger, StateNormalizer, named_rng
from .dataset import OfflineDataset
from .embedding import SemanticEmbedder
from .errors import ConfigurationError, DomainError
from .semantic_signals import SemanticComposer, SemanticTokenSet, StepContext
from .tensor_autograd import (
    MLP,
    AdamW,
    Dropout,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    Tensor,
    TransformerBlock,
    causal_mask,
    clip_grad_norm,
    load_checkpoint,
    masked_mse,
    no_grad,
    restore_optimizer,
    save_checkpoint,
    stack,
)

logger = logging.getLogger(__name__)

SEMANTIC_ROLES = ("task", "history", "strategy")
ROLE_ORDER = ("task", "rtg", "history", "strategy", "state", "action")


@dataclass(frozen=True)
class ModelConfig:
    """Backbone sizes and the semantic roles present in every step."""

    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    dropout: float = 0.1
    semantic_dim: int = 2048
    state_dim: int = 16
    max_episode_len: int = 48
    enabled_tokens: tuple[str, ...] = SEMANTIC_ROLES
    context_window: int = 48
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.enabled_tokens) - set(SEMANTIC_ROLES)
        if unknown:
            raise ConfigurationError(f"unknown semantic roles {sorted(unknown)}")
        object.__setattr__(self, "enabled_tokens", tuple(r for r in SEMANTIC_ROLES if r in set(self.enabled_tokens)))
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"{self.n_heads} heads do not divide d_model {self.d_model}")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.semantic_dim, self.state_dim) < 1:
            raise ConfigurationError("model sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if not 1 <= self.context_window <= self.max_episode_len:
            raise ConfigurationError("context_window must lie in [1, max_episode_len]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    @property
    def roles(self) -> tuple[str, ...]:
        active = set(self.enabled_tokens) | {"rtg", "state", "action"}
        return tuple(role for role in ROLE_ORDER if role in active)

    @property
    def tokens_per_step(self) -> int:
        return len(self.roles)

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["enabled_tokens"] = list(self.enabled_tokens)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        payload["enabled_tokens"] = tuple(payload.get("enabled_tokens", SEMANTIC_ROLES))
        return cls(**payload)


def vanilla_dt(cfg: Optional[ModelConfig] = None) -> ModelConfig:
    """The return/state/action layout without semantic tokens."""

    return replace(cfg or ModelConfig(), enabled_tokens=())


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars of ``SemBidModel(cfg)``."""

    d, f, s = cfg.d_model, cfg.d_ff, cfg.semantic_dim

    def mlp2(width_in: int) -> int:
        return (width_in * d + d) + (d * d + d)

    semantic = len(cfg.enabled_tokens) * (s * d + d)
    encoders = mlp2(1) + mlp2(cfg.state_dim) + mlp2(1)
    positions = cfg.max_episode_len * d + cfg.tokens_per_step * d
    block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
    return semantic + encoders + positions + 2 * d + cfg.n_layers * block + 2 * d + (d + 1)


# ----------------------------------------------------------------------
# Token layout
# ----------------------------------------------------------------------
@dataclass
class TrajectoryBatch:
    """Model-ready inputs: normalized states, scaled RTG, normalized actions."""

    states: np.ndarray
    rtg: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray
    semantic_table: Optional[np.ndarray] = None
    semantic_index: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return int(self.actions.shape[0])

    @property
    def length(self) -> int:
        return int(self.actions.shape[1])


@dataclass(frozen=True)
class TokenSequence:
    """Flattened per-step token order and the positions the action head reads."""

    roles: tuple[str, ...]
    steps: int
    role_tags: np.ndarray
    step_index: np.ndarray
    attention_mask: np.ndarray
    state_positions: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.role_tags.shape[0])


def build_token_sequence(batch: TrajectoryBatch, cfg: ModelConfig) -> TokenSequence:
    if batch.length > cfg.max_episode_len:
        raise DomainError(f"trajectory length {batch.length} exceeds {cfg.max_episode_len}")
    for role in cfg.enabled_tokens:
        if role not in batch.semantic_index or batch.semantic_table is None:
            raise DomainError(f"missing semantic input for enabled role {role!r}")
    roles = cfg.roles
    width = len(roles)
    steps = batch.length
    role_tags = np.tile(np.arange(width), steps)
    step_index = np.repeat(np.arange(steps), width)
    state_slot = roles.index("state")
    return TokenSequence(
        roles=roles,
        steps=steps,
        role_tags=role_tags,
        step_index=step_index,
        attention_mask=causal_mask(steps * width),
        state_positions=np.arange(steps) * width + state_slot,
        targets=batch.actions,
        loss_mask=batch.mask,
    )


class SemBidModel(Module):
    """Causal transformer over [task, rtg, history, strategy, state, action] steps."""

    def __init__(self, cfg: Optional[ModelConfig] = None) -> None:
        self.cfg = cfg = cfg or ModelConfig()
        dtype = cfg.numpy_dtype
        rng = named_rng(cfg.seed, "model_init")
        self.dropout_rng = named_rng(cfg.seed, "dropout")
        d = cfg.d_model

        self.proj_task = Linear(cfg.semantic_dim, d, rng, dtype=dtype) if "task" in cfg.enabled_tokens else None
        self.proj_history = Linear(cfg.semantic_dim, d, rng, dtype=dtype) if "history" in cfg.enabled_tokens else None
        self.proj_strategy = Linear(cfg.semantic_dim, d, rng, dtype=dtype) if "strategy" in cfg.enabled_tokens else None
        self.phi_rtg = MLP((1, d, d), rng, dtype=dtype)
        self.phi_state = MLP((cfg.state_dim, d, d), rng, dtype=dtype)
        self.phi_action = MLP((1, d, d), rng, dtype=dtype)
        self.timestep_embedding = Embedding(cfg.max_episode_len, d, rng, dtype=dtype)
        self.role_embedding = Embedding(cfg.tokens_per_step, d, rng, dtype=dtype)
        self.embed_ln = LayerNorm(d, dtype=dtype)
        self.embed_drop = Dropout(cfg.dropout, self.dropout_rng)
        self.blocks = [
            TransformerBlock(d, cfg.n_heads, cfg.d_ff, cfg.dropout, rng, self.dropout_rng, dtype=dtype)
            for _ in range(cfg.n_layers)
        ]
        self.final_ln = LayerNorm(d, dtype=dtype)
        self.head = Linear(d, 1, rng, dtype=dtype)
        self.action_mean = 0.0
        self.action_std = 1.0
        self.rtg_scale = 1.0
        self.normalizer: Optional[StateNormalizer] = None

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        self.dropout_rng = rng
        for module in self.modules():
            if isinstance(module, Dropout):
                module.rng = rng

    def semantic_projection(self, role: str) -> Optional[Linear]:
        return getattr(self, f"proj_{role}")

    # ------------------------------------------------------------------
    def embed_inputs(self, batch: TrajectoryBatch) -> Dict[str, Tensor]:
        """Per-role token embeddings of shape (batch, steps, d_model), positions not yet added."""

        dtype = self.cfg.numpy_dtype
        b, t = batch.batch_size, batch.length
        if batch.states.shape != (b, t, self.cfg.state_dim):
            raise DomainError(f"states must have shape {(b, t, self.cfg.state_dim)}, got {batch.states.shape}")
        tokens: Dict[str, Tensor] = {
            "rtg": self.phi_rtg(Tensor(batch.rtg.reshape(b, t, 1), dtype=dtype)),
            "state": self.phi_state(Tensor(batch.states, dtype=dtype)),
            "action": self.phi_action(Tensor(batch.actions.reshape(b, t, 1), dtype=dtype)),
        }
        if self.cfg.enabled_tokens:
            table = np.asarray(batch.semantic_table)
            if table.ndim != 2 or table.shape[1] != self.cfg.semantic_dim:
                raise DomainError(f"semantic vectors must have dim {self.cfg.semantic_dim}, got {table.shape}")
            used = np.unique(np.concatenate([batch.semantic_index[r].reshape(-1) for r in self.cfg.enabled_tokens]))
            lookup = np.searchsorted(used, np.arange(table.shape[0]))
            rows = Tensor(table[used], dtype=dtype)
            for role in self.cfg.enabled_tokens:
                projected = self.semantic_projection(role)(rows)
                tokens[role] = projected[lookup[batch.semantic_index[role]]]
        return tokens

    def hidden_states(self, batch: TrajectoryBatch, sequence: Optional[TokenSequence] = None) -> Tensor:
        sequence = sequence or build_token_sequence(batch, self.cfg)
        b, t = batch.batch_size, batch.length
        tokens = self.embed_inputs(batch)
        timestep = self.timestep_embedding(batch.timesteps.astype(np.int64))
        per_role = [tokens[role] + timestep for role in sequence.roles]
        x = stack(per_role, axis=2)
        x = x + self.role_embedding(np.arange(len(sequence.roles)))
        x = x.reshape(b, t * len(sequence.roles), self.cfg.d_model)
        x = self.embed_drop(self.embed_ln(x))
        for block in self.blocks:
            x = block(x, sequence.attention_mask)
        return self.final_ln(x)

    def forward(self, batch: TrajectoryBatch) -> Tensor:
        """Normalized action predictions read at STATE positions, shape (batch, steps)."""

        sequence = build_token_sequence(batch, self.cfg)
        hidden = self.hidden_states(batch, sequence)
        at_state = hidden[:, sequence.state_positions, :]
        return self.head(at_state).reshape(batch.batch_size, batch.length)


# ----------------------------------------------------------------------
# Semantic corpus
# ----------------------------------------------------------------------
@dataclass
class SemanticCorpus:
    """Projected embeddings of every distinct text plus per-step indices into them."""

    table: np.ndarray
    index: Dict[str, np.ndarray]
    texts: List[str]

    def vectors(self, role: str) -> np.ndarray:
        return self.table[self.index[role]]


def encode_semantics(
    dataset: OfflineDataset,
    composer: SemanticComposer,
    embedder: SemanticEmbedder,
    roles: Sequence[str] = SEMANTIC_ROLES,
) -> SemanticCorpus:
    """Compose texts for every real step and encode each distinct text once."""

    vocabulary: Dict[str, int] = {}
    n, t = len(dataset), dataset.horizon
    index = {role: np.zeros((n, t), dtype=np.int64) for role in roles}
    for row in range(n):
        token_sets = composer.compose_episode(dataset.contexts(row), dataset.seeds[row])
        for step, tokens in enumerate(token_sets):
            for role, text in zip(SEMANTIC_ROLES, tokens.texts()):
                if role in index:
                    index[role][row, step] = vocabulary.setdefault(text, len(vocabulary))
    texts = list(vocabulary)
    if not texts:
        table = np.zeros((1, embedder.dim))
        texts = [""]
    else:
        table = embedder.embed_many(texts)
    logger.info("encoded %d distinct semantic texts", len(texts))
    return SemanticCorpus(table=table, index=index, texts=texts)


def make_batch(
    dataset: OfflineDataset,
    rows: Sequence[int],
    corpus: Optional[SemanticCorpus],
    *,
    rtg_scale: float,
    action_mean: float,
    action_std: float,
) -> TrajectoryBatch:
    rows = np.asarray(rows, dtype=int)
    t = dataset.horizon
    return TrajectoryBatch(
        states=dataset.normalizer.transform(dataset.states[rows]),
        rtg=dataset.rtg[rows].astype(np.float64) / rtg_scale,
        actions=(dataset.actions[rows].astype(np.float64) - action_mean) / action_std,
        timesteps=np.tile(np.arange(t), (len(rows), 1)),
        mask=dataset.mask[rows].astype(np.float64),
        semantic_table=corpus.table if corpus is not None else None,
        semantic_index={role: idx[rows] for role, idx in corpus.index.items()} if corpus is not None else {},
    )


# ----------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    steps: int = 800_000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    log_every: int = 100
    checkpoint_every: int = 10_000
    seed: int = 0
    # checked on the whole dataset every log_every steps
    stop_loss: Optional[float] = None

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")
        if self.stop_loss is not None and self.stop_loss <= 0:
            raise ConfigurationError("stop_loss must be positive")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("log_every and checkpoint_every must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("invalid optimizer settings")


@dataclass
class TrainResult:
    losses: List[tuple[int, float, float]]
    checkpoints: List[Path]
    final_step: int

    @property
    def final_loss(self) -> float:
        return self.losses[-1][1] if self.losses else float("nan")

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.losses, columns=["step", "loss", "elapsed_s"])


def _training_metadata(model: SemBidModel, step: int) -> dict:
    return {
        "step": step,
        "model": model.cfg.to_dict(),
        "action_mean": model.action_mean,
        "action_std": model.action_std,
        "rtg_scale": model.rtg_scale,
        "normalization": model.normalizer.to_dict() if model.normalizer is not None else None,
    }


def train(
    model: SemBidModel,
    dataset: OfflineDataset,
    corpus: Optional[SemanticCorpus],
    cfg: Optional[TrainConfig] = None,
    *,
    out_dir: Optional[str | Path] = None,
    resume: Optional[str | Path] = None,
) -> TrainResult:
    """Minimize masked action MSE over sampled trajectory batches."""

    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    if model.cfg.enabled_tokens and corpus is None:
        raise ConfigurationError("semantic roles are enabled but no semantic corpus was given")

    model.action_mean = dataset.action_mean
    model.action_std = dataset.action_std
    model.rtg_scale = max(dataset.max_return, 1e-6)
    model.normalizer = dataset.normalizer

    optimizer = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 1
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        model.load_state_dict(checkpoint.parameters)
        if checkpoint.optimizer is not None:
            restore_optimizer(optimizer, checkpoint.optimizer)
        start = int(checkpoint.metadata.get("step", 0)) + 1
        logger.info("resuming from %s at step %d", resume, start)

    out_path = Path(out_dir) if out_dir is not None else None
    losses: List[tuple[int, float, float]] = []
    checkpoints: List[Path] = []
    began = time.perf_counter()
    n = len(dataset)
    batch_size = min(cfg.batch_size, n)
    model.train()
    final_step = cfg.steps

    for step in range(start, cfg.steps + 1):
        rng = named_rng(cfg.seed, "batches", step)
        rows = rng.choice(n, size=batch_size, replace=False) if batch_size < n else np.arange(n)
        batch = make_batch(
            dataset,
            rows,
            corpus,
            rtg_scale=model.rtg_scale,
            action_mean=model.action_mean,
            action_std=model.action_std,
        )
        if batch.mask.sum() == 0:
            logger.warning("step %d: all-masked batch skipped", step)
            continue
        model.set_dropout_rng(named_rng(cfg.seed, "dropout", step))
        prediction = model(batch)
        loss = masked_mse(prediction, batch.actions, batch.mask)
        optimizer.zero_grad()
        loss.backward()
        clip_grad_norm(optimizer.parameters, cfg.grad_clip)
        optimizer.step()

        value = loss.item()
        if not np.isfinite(value):
            raise DomainError(f"non-finite loss at step {step}")
        logged = step % cfg.log_every == 0 or step == cfg.steps
        if logged:
            elapsed = time.perf_counter() - began
            losses.append((step, value, elapsed))
            logger.info("step %d loss %.6f (%.1fs)", step, value, elapsed)
        stopping = False
        if logged and cfg.stop_loss is not None:
            full = training_loss(model, dataset, corpus)
            model.train()
            stopping = full < cfg.stop_loss
            if stopping:
                logger.info("step %d: dataset loss %.6f below %.6f, stopping", step, full, cfg.stop_loss)
        if out_path is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps or stopping):
            path = save_checkpoint(
                out_path / f"step_{step:07d}.ckpt", model, optimizer, _training_metadata(model, step)
            )
            checkpoints.append(path)
        if stopping:
            final_step = step
            break

    model.eval()
    result = TrainResult(losses=losses, checkpoints=checkpoints, final_step=final_step)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        result.frame().to_csv(out_path / "train_log.csv", index=False)
    return result


def training_loss(model: SemBidModel, dataset: OfflineDataset, corpus: Optional[SemanticCorpus]) -> float:
    """Masked MSE (normalized action units) over the whole dataset in eval mode."""

    model.eval()
    batch = make_batch(
        dataset,
        range(len(dataset)),
        corpus,
        rtg_scale=model.rtg_scale,
        action_mean=model.action_mean,
        action_std=model.action_std,
    )
    with no_grad():
        return masked_mse(model(batch), batch.actions, batch.mask).item()


def load_model(path: str | Path) -> SemBidModel:
    checkpoint = load_checkpoint(path)
    metadata = checkpoint.metadata
    model = SemBidModel(ModelConfig.from_dict(metadata["model"]))
    model.load_state_dict(checkpoint.parameters)
    model.action_mean = float(metadata["action_mean"])
    model.action_std = float(metadata["action_std"])
    model.rtg_scale = float(metadata["rtg_scale"])
    if metadata.get("normalization"):
        model.normalizer = StateNormalizer.from_dict(metadata["normalization"])
    model.eval()
    return model


def predict_actions(model: SemBidModel, batch: TrajectoryBatch) -> np.ndarray:
    """Multipliers (in raw units) predicted at each step's STATE token."""

    model.eval()
    with no_grad():
        normalized = model(batch).data.astype(np.float64)
    return normalized * model.action_std + model.action_mean


# ----------------------------------------------------------------------
# Rollout
# ----------------------------------------------------------------------
@dataclass
class RolloutResult:
    ledger: EpisodeLedger
    actions: List[float]
    rtg_trace: List[float]
    token_sets: List[SemanticTokenSet]


def rollout(
    model: SemBidModel,
    env: AuctionEnv,
    *,
    normalizer: StateNormalizer,
    target_return: float,
    composer: Optional[SemanticComposer] = None,
    embedder: Optional[SemanticEmbedder] = None,
    episode_seed: Optional[int] = None,
) -> RolloutResult:
    """Bid one episode conditioned on *target_return*, decremented by realized value."""

    cfg = model.cfg
    if cfg.enabled_tokens and (composer is None or embedder is None):
        raise ConfigurationError("semantic roles are enabled; a composer and an embedder are required")
    model.eval()
    env.reset()
    market = env.cfg
    text_rng = composer.episode_rng(market.seed if episode_seed is None else episode_seed) if composer else None

    states: List[np.ndarray] = []
    rtgs: List[float] = []
    actions: List[float] = []
    semantic_rows: Dict[str, List[np.ndarray]] = {role: [] for role in cfg.enabled_tokens}
    token_sets: List[SemanticTokenSet] = []
    rtg = max(float(target_return), 0.0)
    done = False

    while not done:
        state = env.state
        states.append(normalizer.transform(state.features))
        rtgs.append(rtg)
        actions.append(0.0)
        if composer is not None and embedder is not None:
            context = StepContext.from_ledger(env.ledger, market, env.period, env.current_batch)
            tokens = composer.compose(context, text_rng)
            token_sets.append(tokens)
            for role, text in zip(SEMANTIC_ROLES, tokens.texts()):
                if role in semantic_rows:
                    semantic_rows[role].append(embedder.embed(text))

        window = slice(max(0, len(states) - cfg.context_window), len(states))
        steps = len(states[window])
        table = None
        index: Dict[str, np.ndarray] = {}
        if cfg.enabled_tokens:
            blocks = [np.vstack(semantic_rows[role][window]) for role in cfg.enabled_tokens]
            table = np.vstack(blocks)
            for position, role in enumerate(cfg.enabled_tokens):
                index[role] = (np.arange(steps) + position * steps)[None, :]
        first = window.start
        batch = TrajectoryBatch(
            states=np.asarray(states[window])[None, :, :],
            rtg=np.asarray(rtgs[window])[None, :] / model.rtg_scale,
            actions=((np.asarray(actions[window]) - model.action_mean) / model.action_std)[None, :],
            timesteps=np.arange(first, first + steps)[None, :],
            mask=np.ones((1, steps)),
            semantic_table=table,
            semantic_index=index,
        )
        multiplier = float(np.clip(predict_actions(model, batch)[0, -1], 0.0, market.lambda_max))
        actions[-1] = multiplier
        _, reward, done = env.step(multiplier)
        rtg = max(rtg - reward, 0.0)

    return RolloutResult(ledger=env.ledger, actions=actions, rtg_trace=rtgs, token_sets=token_sets)
