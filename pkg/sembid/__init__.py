"""Semantic auto-bidding laboratory: auction simulator, semantic signals and sequence policies."""

from .auction_env import AuctionEnv, EpisodeLedger, MarketConfig, Scenario, compute_score, run_auction
from .baselines import PidController, bc_train
from .config import RunConfig
from .dataset import OfflineDataset, generate_offline_dataset
from .embedding import SemanticEmbedder
from .model import ModelConfig, SemBidModel, rollout, train, vanilla_dt
from .probing import cca_avg, fusion_eval, linear_probe
from .semantic_signals import SemanticComposer, SemanticConfig

__all__ = [
    "AuctionEnv",
    "EpisodeLedger",
    "MarketConfig",
    "Scenario",
    "compute_score",
    "run_auction",
    "PidController",
    "bc_train",
    "RunConfig",
    "OfflineDataset",
    "generate_offline_dataset",
    "SemanticEmbedder",
    "ModelConfig",
    "SemBidModel",
    "rollout",
    "train",
    "vanilla_dt",
    "cca_avg",
    "fusion_eval",
    "linear_probe",
    "SemanticComposer",
    "SemanticConfig",
]
