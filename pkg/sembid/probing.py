"""Probing studies: how much bidding-relevant information text embeddings carry."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.linear_model import Ridge
from sklearn.metrics import mean_absolute_error, mean_squared_error, r2_score
from sklearn.model_selection import train_test_split

from .auction_env import CampaignState, MarketConfig, named_rng
from .dataset import BehaviorMix, OfflineDataset, generate_offline_dataset
from .embedding import SemanticEmbedder, shuffle_pairings
from .errors import ConfigurationError, DomainError
from .semantic_signals import SemanticComposer, SemanticConfig, render_state_text
from .tensor_autograd import (
    MLP,
    AdamW,
    Linear,
    Module,
    Tensor,
    concat,
    masked_mse,
    no_grad,
    sigmoid,
    softmax,
)

logger = logging.getLogger(__name__)

PROBE_ALPHA = 1e-3
TEST_FRACTION = 0.2
MIN_PROBE_SAMPLES = 50
CONTROLS = ("aligned", "shuffled", "random", "numeric", "numeric+embedding")
CATEGORY_ROLES = ("task", "history", "strategy")
FUSION_MECHANISMS = ("numeric_only", "concat", "residual", "gated", "film", "cross_attention")


@dataclass
class ProbeReport:
    """Held-out fit quality of one probe configuration."""

    label: str
    r2: float
    mse: float
    mae: float
    input_type: str = "embedding"
    control: str = "aligned"
    target: str = "action"
    n_train: int = 0
    n_test: int = 0
    degenerate: bool = False
    seed: int = 0
    parameters: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


def reports_frame(reports: Sequence[ProbeReport]) -> pd.DataFrame:
    return pd.DataFrame([report.to_dict() for report in reports])


def _split(n: int, split_seed: int) -> tuple[np.ndarray, np.ndarray]:
    return train_test_split(np.arange(n), test_size=TEST_FRACTION, random_state=split_seed, shuffle=True)


def linear_probe(
    X: np.ndarray,
    y: np.ndarray,
    split_seed: int = 0,
    *,
    label: str = "probe",
    alpha: float = PROBE_ALPHA,
    **tags,
) -> ProbeReport:
    """Ridge regression on a seeded 80/20 split, scored on the held-out part."""

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise DomainError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if y.shape[0] < MIN_PROBE_SAMPLES:
        raise DomainError(f"linear probing needs at least {MIN_PROBE_SAMPLES} samples, got {y.shape[0]}")
    train, test = _split(y.shape[0], split_seed)
    if np.ptp(y) == 0.0:
        logger.warning("probe %s: constant target, reporting R2 = 0", label)
        return ProbeReport(label, 0.0, 0.0, 0.0, n_train=len(train), n_test=len(test), degenerate=True, seed=split_seed, **tags)

    model = Ridge(alpha=alpha).fit(X[train], y[train])
    predicted = model.predict(X[test])
    return ProbeReport(
        label=label,
        r2=float(r2_score(y[test], predicted)),
        mse=float(mean_squared_error(y[test], predicted)),
        mae=float(mean_absolute_error(y[test], predicted)),
        n_train=len(train),
        n_test=len(test),
        seed=split_seed,
        **tags,
    )


# ----------------------------------------------------------------------
# Canonical correlation
# ----------------------------------------------------------------------
def _orthonormal_basis(X: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    centered = X - X.mean(axis=0, keepdims=True)
    u, s, _ = linalg.svd(centered, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return u[:, :0]
    return u[:, s > tol * s[0]]


def canonical_correlations(Xa: np.ndarray, Xb: np.ndarray) -> np.ndarray:
    """All canonical correlations of the two views, sorted non-increasing."""

    Xa = np.asarray(Xa, dtype=np.float64)
    Xb = np.asarray(Xb, dtype=np.float64)
    if Xa.shape[0] != Xb.shape[0]:
        raise DomainError(f"CCA views disagree on rows: {Xa.shape[0]} vs {Xb.shape[0]}")
    qa, qb = _orthonormal_basis(Xa), _orthonormal_basis(Xb)
    if qa.shape[1] == 0 or qb.shape[1] == 0:
        return np.zeros(0)
    values = linalg.svd(qa.T @ qb, compute_uv=False)
    return np.clip(np.sort(values)[::-1], 0.0, 1.0)


def cca_avg(Xa: np.ndarray, Xb: np.ndarray, k: int = 10) -> float:
    """Mean of the top-*k* canonical correlations; *k* shrinks to the smaller rank."""

    if k < 1:
        raise DomainError("k must be positive")
    values = canonical_correlations(Xa, Xb)
    if values.size == 0:
        logger.warning("CCA on a rank-zero view; returning 0")
        return 0.0
    if k > values.size:
        logger.warning("CCA rank deficiency: k reduced from %d to %d", k, values.size)
        k = values.size
    return float(values[:k].mean())


# ----------------------------------------------------------------------
# Probe data
# ----------------------------------------------------------------------
@dataclass
class ProbeSamples:
    """Flattened real steps of a dataset with their texts and targets."""

    state_texts: List[str]
    numeric: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    category_texts: Dict[str, List[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.state_texts)

    def target(self, name: str) -> np.ndarray:
        if name == "action":
            return self.actions
        if name == "reward":
            return self.rewards
        raise ConfigurationError(f"unknown probe target {name!r}; use 'action' or 'reward'")


def probe_samples(dataset: OfflineDataset, composer: Optional[SemanticComposer] = None) -> ProbeSamples:
    """Collect state texts, normalized features and targets for every unmasked step."""

    composer = composer or SemanticComposer(SemanticConfig.for_scenario(dataset.market.scenario))
    texts: List[str] = []
    rows: List[np.ndarray] = []
    actions: List[float] = []
    rewards: List[float] = []
    categories: Dict[str, List[str]] = {role: [] for role in CATEGORY_ROLES}
    normalized = dataset.normalized_states()
    n_periods = dataset.market.n_periods

    for index in range(len(dataset)):
        contexts = dataset.contexts(index)
        for step, (context, tokens) in enumerate(zip(contexts, composer.compose_episode(contexts, dataset.seeds[index]))):
            state = CampaignState(
                period=step + 1,
                n_periods=n_periods,
                budget=1.0,
                budget_remaining=context.budget_ratio,
                target_cpa=context.target_cpa,
                lambda_max=dataset.market.lambda_max,
                features=dataset.states[index, step],
                batch_mean_pvalue=context.pvalue,
            )
            texts.append(render_state_text(state, composer.cfg))
            rows.append(normalized[index, step])
            actions.append(float(dataset.actions[index, step]))
            rewards.append(float(dataset.rewards[index, step]))
            for role, text in zip(CATEGORY_ROLES, tokens.texts()):
                categories[role].append(text)

    return ProbeSamples(
        state_texts=texts,
        numeric=np.asarray(rows, dtype=np.float64).reshape(-1, dataset.states.shape[-1]),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards),
        category_texts=categories,
    )


def _effective_rank(X: np.ndarray) -> int:
    return max(int(_orthonormal_basis(np.asarray(X, dtype=np.float64)).shape[1]), 1)


def control_inputs(
    samples: ProbeSamples,
    embeddings: np.ndarray,
    control: str,
    seed: int,
) -> np.ndarray:
    """Probe inputs for one control condition.

    The random control draws Gaussian vectors with as many columns as the
    aligned embeddings have independent directions.
    """

    if control == "aligned":
        return embeddings
    if control == "shuffled":
        return shuffle_pairings(samples.state_texts, embeddings, seed)
    if control == "random":
        rng = named_rng(seed, "random_control")
        return rng.standard_normal((embeddings.shape[0], _effective_rank(embeddings)))
    if control == "numeric":
        return samples.numeric
    if control == "numeric+embedding":
        return np.hstack([samples.numeric, embeddings])
    raise ConfigurationError(f"unknown control {control!r}; choose from {CONTROLS}")


def probe_controls(
    samples: ProbeSamples,
    embedder: SemanticEmbedder,
    *,
    target: str = "action",
    seeds: Sequence[int] = (0,),
    controls: Sequence[str] = CONTROLS,
) -> List[ProbeReport]:
    embeddings = embedder.embed_many(samples.state_texts)
    y = samples.target(target)
    reports = []
    for seed in seeds:
        for control in controls:
            X = control_inputs(samples, embeddings, control, seed)
            input_type = "numeric" if control == "numeric" else "embedding"
            reports.append(
                linear_probe(X, y, seed, label=f"{control}/{target}", input_type=input_type, control=control, target=target)
            )
    return reports


def category_configurations(roles: Sequence[str] = CATEGORY_ROLES) -> List[tuple[str, ...]]:
    """Every non-empty combination of roles, singles first."""

    return [combo for size in range(1, len(roles) + 1) for combo in combinations(roles, size)]


def probe_categories(
    samples: ProbeSamples,
    embedder: SemanticEmbedder,
    *,
    target: str = "action",
    seed: int = 0,
) -> List[ProbeReport]:
    vectors = {role: embedder.embed_many(samples.category_texts[role]) for role in CATEGORY_ROLES}
    y = samples.target(target)
    reports = []
    for combo in category_configurations():
        X = np.hstack([vectors[role] for role in combo])
        reports.append(linear_probe(X, y, seed, label="+".join(combo), input_type="category", target=target))
    return reports


def category_cca(samples: ProbeSamples, embedder: SemanticEmbedder, k: int = 10) -> pd.DataFrame:
    vectors = {role: embedder.embed_many(samples.category_texts[role]) for role in CATEGORY_ROLES}
    rows = [
        {"pair": f"{a}-{b}", "k": k, "cca": cca_avg(vectors[a], vectors[b], k)}
        for a, b in combinations(CATEGORY_ROLES, 2)
    ]
    return pd.DataFrame(rows)


# ----------------------------------------------------------------------
# Fusion heads
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class FusionConfig:
    """Head sizes and optimizer settings for the fusion comparison.

    ``validation_fraction`` of the train split is held out; the head keeps the
    parameters with the lowest held-out loss seen every ``eval_every`` steps.
    """

    hidden: int = 32
    attention_dim: int = 8
    lr: float = 3e-3
    weight_decay: float = 1e-4
    steps: int = 1500
    batch_size: int = 256
    budget_tolerance: float = 0.10
    validation_fraction: float = 0.2
    eval_every: int = 25

    def __post_init__(self) -> None:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if min(self.steps, self.eval_every, self.batch_size, self.hidden, self.attention_dim) < 1:
            raise ConfigurationError("fusion sizes and step counts must be positive")


class FusionHead(Module):
    """Fuse numeric features ``x`` (B, dx) with role vectors ``e`` (B, R, de), then regress."""

    def __init__(self, mechanism: str, dx: int, roles: int, de: int, hidden: int, attention_dim: int, rng) -> None:
        if mechanism not in FUSION_MECHANISMS:
            raise ConfigurationError(f"unknown fusion mechanism {mechanism!r}; choose from {FUSION_MECHANISMS}")
        self.mechanism = mechanism
        flat = roles * de
        self.gate = self.value = self.query = self.key = None
        width = dx
        if mechanism == "concat":
            width = dx + flat
        elif mechanism == "residual":
            self.value = Linear(flat, dx, rng, dtype=np.float64)
        elif mechanism in ("gated", "film"):
            self.gate = Linear(flat, dx, rng, dtype=np.float64)
            self.value = Linear(flat, dx, rng, dtype=np.float64)
        elif mechanism == "cross_attention":
            self.query = Linear(dx, attention_dim, rng, dtype=np.float64)
            self.key = Linear(de, attention_dim, rng, dtype=np.float64)
            self.value = Linear(de, attention_dim, rng, dtype=np.float64)
            self.attention_dim = attention_dim
            width = dx + attention_dim
        self.mlp = MLP((width, hidden, 1), rng, dtype=np.float64)

    def forward(self, x: Tensor, e: Tensor) -> Tensor:
        batch = x.shape[0]
        flat = e.reshape(batch, e.shape[1] * e.shape[2])
        if self.mechanism == "numeric_only":
            fused = x
        elif self.mechanism == "concat":
            fused = concat([x, flat], axis=1)
        elif self.mechanism == "residual":
            fused = x + self.value(flat)
        elif self.mechanism == "gated":
            fused = x + sigmoid(self.gate(flat)) * self.value(flat)
        elif self.mechanism == "film":
            fused = (self.gate(flat) + 1.0) * x + self.value(flat)
        else:
            q = self.query(x).reshape(batch, 1, self.attention_dim)
            k = self.key(e)
            v = self.value(e)
            weights = softmax((q @ k.swapaxes(-1, -2)) * (self.attention_dim**-0.5), axis=-1)
            context = (weights @ v).reshape(batch, self.attention_dim)
            fused = concat([x, context], axis=1)
        return self.mlp(fused).reshape(batch)


def fusion_parameter_count(mechanism: str, dx: int, roles: int, de: int, hidden: int, attention_dim: int = 8) -> int:
    flat = roles * de
    width, extra = dx, 0
    if mechanism == "concat":
        width = dx + flat
    elif mechanism == "residual":
        extra = flat * dx + dx
    elif mechanism in ("gated", "film"):
        extra = 2 * (flat * dx + dx)
    elif mechanism == "cross_attention":
        extra = (dx * attention_dim + attention_dim) + 2 * (de * attention_dim + attention_dim)
        width = dx + attention_dim
    elif mechanism != "numeric_only":
        raise ConfigurationError(f"unknown fusion mechanism {mechanism!r}")
    return extra + (width * hidden + hidden) + (hidden + 1)


def hidden_for_budget(mechanism: str, dx: int, roles: int, de: int, budget: int, attention_dim: int = 8) -> int:
    """Hidden width whose head size is closest to *budget*."""

    candidates = range(1, 1025)
    return min(
        candidates,
        key=lambda h: abs(fusion_parameter_count(mechanism, dx, roles, de, h, attention_dim) - budget),
    )


@dataclass
class FusionTask:
    numeric: np.ndarray
    semantic: np.ndarray
    target: np.ndarray
    informative: bool


def make_fusion_task(
    n: int = 6000,
    seed: int = 0,
    *,
    informative: bool = True,
    numeric_dim: int = 8,
    roles: int = 4,
    semantic_dim: int = 8,
    factor_weight: float = 2.0,
    noise: float = 0.1,
) -> FusionTask:
    """Regression task whose missing factor hides in one flagged role of the semantic channel.

    Every role carries a copy of a shared direction scaled by either the factor
    or a distractor; only a flag coordinate tells the informative role apart.
    Without *informative* the semantic channel is pure noise.
    """

    rng = named_rng(seed, "fusion_task", int(informative))
    x = rng.standard_normal((n, numeric_dim))
    weights = rng.standard_normal(numeric_dim) / np.sqrt(numeric_dim)
    factor = rng.standard_normal(n)
    y = x @ weights + factor_weight * factor + noise * rng.standard_normal(n)

    if not informative:
        semantic = rng.standard_normal((n, roles, semantic_dim))
        return FusionTask(x, semantic, y, informative)

    direction = rng.standard_normal(semantic_dim - 1)
    direction /= np.linalg.norm(direction)
    scale = rng.standard_normal((n, roles))
    chosen = rng.integers(0, roles, size=n)
    scale[np.arange(n), chosen] = factor
    semantic = np.zeros((n, roles, semantic_dim))
    semantic[:, :, 1:] = scale[:, :, None] * direction + 0.05 * rng.standard_normal((n, roles, semantic_dim - 1))
    semantic[np.arange(n), chosen, 0] = 1.0
    return FusionTask(x, semantic, y, informative)


def fusion_eval(
    task: FusionTask,
    mechanism: str,
    *,
    cfg: Optional[FusionConfig] = None,
    split_seed: int = 0,
    budget: Optional[int] = None,
) -> ProbeReport:
    """Train one fusion head on the seeded train split and report held-out R2."""

    cfg = cfg or FusionConfig()
    x, e, y = task.numeric, task.semantic, task.target
    n, dx = x.shape
    _, roles, de = e.shape
    if budget is None:
        budget = fusion_parameter_count("cross_attention", dx, roles, de, cfg.hidden, cfg.attention_dim)
    hidden = hidden_for_budget(mechanism, dx, roles, de, budget, cfg.attention_dim)
    head = FusionHead(mechanism, dx, roles, de, hidden, cfg.attention_dim, named_rng(split_seed, "fusion_init", mechanism))

    train, test = _split(n, split_seed)
    fit, held = train_test_split(train, test_size=cfg.validation_fraction, random_state=split_seed, shuffle=True)
    x_mean, x_std = x[train].mean(axis=0), x[train].std(axis=0) + 1e-12
    y_mean, y_std = y[train].mean(), y[train].std() + 1e-12
    xs = (x - x_mean) / x_std
    ys = (y - y_mean) / y_std

    def held_loss() -> float:
        head.eval()
        with no_grad():
            prediction = head(Tensor(xs[held]), Tensor(e[held])).data
        head.train()
        return float(np.mean((prediction - ys[held]) ** 2))

    optimizer = AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    batches = named_rng(split_seed, "fusion_batches", mechanism)
    batch = min(cfg.batch_size, len(fit))
    head.train()
    best_loss, best_state, best_step = held_loss(), head.state_dict(), 0
    for step in range(1, cfg.steps + 1):
        rows = batches.choice(fit, size=batch, replace=False)
        prediction = head(Tensor(xs[rows]), Tensor(e[rows]))
        loss = masked_mse(prediction, ys[rows], np.ones(batch))
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step % cfg.eval_every == 0:
            current = held_loss()
            if current < best_loss:
                best_loss, best_state, best_step = current, head.state_dict(), step
    head.load_state_dict(best_state)
    logger.debug("fusion head %s keeps step %d (held-out loss %.4f)", mechanism, best_step, best_loss)

    head.eval()
    with no_grad():
        predicted = head(Tensor(xs[test]), Tensor(e[test])).data * y_std + y_mean
    count = head.num_parameters()
    if abs(count - budget) > cfg.budget_tolerance * budget:
        logger.warning("fusion head %s has %d parameters against a budget of %d", mechanism, count, budget)
    return ProbeReport(
        label=mechanism,
        r2=float(r2_score(y[test], predicted)),
        mse=float(mean_squared_error(y[test], predicted)),
        mae=float(mean_absolute_error(y[test], predicted)),
        input_type="fusion",
        control="informative" if task.informative else "noise",
        target="synthetic",
        n_train=len(train),
        n_test=len(test),
        seed=split_seed,
        parameters=count,
    )


def fusion_table(task: FusionTask, *, cfg: Optional[FusionConfig] = None, split_seed: int = 0) -> List[ProbeReport]:
    return [fusion_eval(task, mechanism, cfg=cfg, split_seed=split_seed) for mechanism in FUSION_MECHANISMS]


# ----------------------------------------------------------------------
# Study
# ----------------------------------------------------------------------
@dataclass
class ProbeStudy:
    controls: List[ProbeReport]
    categories: List[ProbeReport]
    cca: pd.DataFrame
    fusion: List[ProbeReport]

    def tables(self) -> Dict[str, pd.DataFrame]:
        return {
            "probe_controls": reports_frame(self.controls),
            "probe_categories": reports_frame(self.categories),
            "probe_cca": self.cca,
            "probe_fusion": reports_frame(self.fusion),
        }


PROBE_BEHAVIOR = BehaviorMix(noisy_pid=1.0, random=0.0, constant_cpa=0.0, pid_noise=0.05)


def run_probe_study(
    market: MarketConfig,
    *,
    embedder: Optional[SemanticEmbedder] = None,
    composer: Optional[SemanticComposer] = None,
    n_trajectories: int = 100,
    seeds: Sequence[int] = (0,),
    targets: Sequence[str] = ("action", "reward"),
    fusion_cfg: Optional[FusionConfig] = None,
    behavior_mix: BehaviorMix = PROBE_BEHAVIOR,
) -> ProbeStudy:
    """Controls, category complementarity, CCA and the fusion comparison in one pass."""

    embedder = embedder or SemanticEmbedder()
    dataset = generate_offline_dataset(market, behavior_mix, n_trajectories=n_trajectories, seed=market.seed)
    samples = probe_samples(dataset, composer)
    logger.info("probing %d steps from %d trajectories", len(samples), n_trajectories)

    controls: List[ProbeReport] = []
    for target in targets:
        controls.extend(probe_controls(samples, embedder, target=target, seeds=seeds))
    categories = probe_categories(samples, embedder, seed=seeds[0])
    cca = category_cca(samples, embedder)
    fusion: List[ProbeReport] = []
    for informative in (True, False):
        task = make_fusion_task(seed=seeds[0], informative=informative)
        fusion.extend(fusion_table(task, cfg=fusion_cfg, split_seed=seeds[0]))
    return ProbeStudy(controls=controls, categories=categories, cca=cca, fusion=fusion)
