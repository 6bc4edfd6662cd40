"""Flat run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

from .auction_env import BUDGET_SCALES, MarketConfig, Scenario
from .baselines import BcConfig
from .embedding import ProjectionSpec, SemanticEmbedder, build_encoder
from .errors import ConfigurationError
from .model import SEMANTIC_ROLES, ModelConfig, TrainConfig
from .semantic_signals import PromptStyle, Regime, SemanticComposer, SemanticConfig

RESOLVED_CONFIG = "resolved_config.json"
METHODS = ("pid", "bc", "dt", "sembid")


def parse_tokens(value: str | list | tuple) -> tuple[str, ...]:
    """``all``, ``none`` or a comma-separated subset of task/history/strategy."""

    if isinstance(value, (list, tuple)):
        items = [str(item).strip().lower() for item in value]
    else:
        text = str(value).strip().lower()
        if text == "all":
            return SEMANTIC_ROLES
        if text in ("none", ""):
            return ()
        items = [item.strip() for item in text.split(",") if item.strip()]
    unknown = sorted(set(items) - set(SEMANTIC_ROLES))
    if unknown:
        raise ConfigurationError(f"unknown token roles {unknown}; use {', '.join(SEMANTIC_ROLES)}, all or none")
    return tuple(role for role in SEMANTIC_ROLES if role in items)


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run; values come from a JSON file and then CLI flags."""

    scenario: str = "High"
    seed: int = 0
    rho: tuple[float, ...] = BUDGET_SCALES
    eval_seeds: int = 5
    n_trajectories: int = 100
    workers: int = 1
    encoder: str = "hash"
    encoder_dim: int = 896
    projected_dim: int = 2048
    strict_cache: bool = True
    tokens: tuple[str, ...] = SEMANTIC_ROLES
    ablate: tuple[str, ...] = ()
    style: str = "Standard"
    regime: Optional[str] = None
    template_seed: int = 0
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    dropout: float = 0.1
    context_window: int = 48
    dtype: str = "float32"
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    log_every: int = 100
    checkpoint_every: int = 1000
    stop_loss: Optional[float] = None
    bc_steps: int = 2000
    methods: tuple[str, ...] = METHODS
    reference_method: str = "pid"
    target_rtg_scale: float = 1.0
    checkpoint_selection: str = "final"
    probe_trajectories: int = 100
    probe_seeds: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "scenario", Scenario.parse(self.scenario).value)
        object.__setattr__(self, "style", PromptStyle.parse(self.style).value)
        if self.regime is not None:
            object.__setattr__(self, "regime", Regime.parse(self.regime).value)
        object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
        object.__setattr__(self, "tokens", parse_tokens(self.tokens))
        object.__setattr__(self, "ablate", parse_tokens(self.ablate))
        object.__setattr__(self, "methods", tuple(str(m).lower() for m in self.methods))
        bad_rho = [r for r in self.rho if r not in BUDGET_SCALES]
        if bad_rho or not self.rho:
            raise ConfigurationError(f"rho values must be drawn from {BUDGET_SCALES}, got {list(self.rho)}")
        unknown = sorted(set(self.methods) - set(METHODS))
        if unknown:
            raise ConfigurationError(f"unknown methods {unknown}; choose from {METHODS}")
        if self.reference_method not in METHODS:
            raise ConfigurationError(f"unknown reference method {self.reference_method!r}")
        if self.checkpoint_selection not in ("final", "best"):
            raise ConfigurationError("checkpoint_selection must be 'final' or 'best'")
        if min(self.eval_seeds, self.n_trajectories, self.workers, self.probe_trajectories, self.probe_seeds) < 1:
            raise ConfigurationError("counts must be positive")
        if self.target_rtg_scale < 0:
            raise ConfigurationError("target_rtg_scale must be non-negative")

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RunConfig":
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        with path.open("r", encoding="utf8") as handle:
            try:
                payload = json.load(handle)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path} is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigurationError(f"{path} must hold a flat JSON object")
        return cls.from_dict(payload)

    def merged(self, **overrides: Any) -> "RunConfig":
        """Copy with every override that is not None applied."""

        values = {key: value for key, value in overrides.items() if value is not None}
        unknown = sorted(set(values) - {item.name for item in fields(self)})
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return replace(self, **values)

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        for key, value in payload.items():
            if isinstance(value, tuple):
                payload[key] = list(value)
        return payload

    def write_resolved(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_CONFIG
        with path.open("w", encoding="utf8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
        return path

    # ------------------------------------------------------------------
    @property
    def enabled_tokens(self) -> tuple[str, ...]:
        return tuple(role for role in self.tokens if role not in self.ablate)

    def market(self, *, seed: Optional[int] = None, budget_scale: float = 1.0) -> MarketConfig:
        return MarketConfig.preset(self.scenario, seed=self.seed if seed is None else seed, budget_scale=budget_scale)

    def semantic_config(self) -> SemanticConfig:
        overrides = {} if self.regime is None else {"regime": self.regime}
        return SemanticConfig.for_scenario(
            self.scenario, style=self.style, template_seed=self.template_seed, **overrides
        )

    def composer(self) -> SemanticComposer:
        return SemanticComposer(self.semantic_config())

    def projection(self) -> ProjectionSpec:
        return ProjectionSpec(in_dim=self.encoder_dim, out_dim=self.projected_dim, seed=self.seed)

    def embedder(self) -> SemanticEmbedder:
        encoder = build_encoder(self.encoder, dim=self.encoder_dim, strict=self.strict_cache)
        return SemanticEmbedder(encoder, self.projection())

    def model_config(self, enabled_tokens: Optional[tuple[str, ...]] = None) -> ModelConfig:
        return ModelConfig(
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_ff=self.d_ff,
            dropout=self.dropout,
            semantic_dim=self.projected_dim,
            context_window=self.context_window,
            enabled_tokens=self.enabled_tokens if enabled_tokens is None else enabled_tokens,
            dtype=self.dtype,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            grad_clip=self.grad_clip,
            log_every=self.log_every,
            checkpoint_every=self.checkpoint_every,
            stop_loss=self.stop_loss,
            seed=self.seed,
        )

    def bc_config(self) -> BcConfig:
        return BcConfig(lr=self.lr, weight_decay=self.weight_decay, steps=self.bc_steps, seed=self.seed)
