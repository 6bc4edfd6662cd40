"""Evaluation over budget regimes and the comparison tables built from it."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .auction_env import AuctionEnv, EpisodeLedger, MarketConfig, Scenario, compute_score, run_episode, stream_seed
from .baselines import BcPolicy, PidController
from .embedding import SemanticEmbedder
from .errors import ConfigurationError, DataIntegrityError
from .model import SemBidModel, rollout
from .semantic_signals import SemanticComposer

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ("method", "rho", "seed", "market_seed", "target_cpa", "score", "value", "cost", "cpa", "penalty")
SUMMARY_COLUMNS = ("method", "rho", "mean", "std", "n")
REPORT_SCHEMA_VERSION = 1

EpisodeRunner = Callable[[MarketConfig], EpisodeLedger]


def evaluation_seed(root_seed: int, index: int) -> int:
    return int(stream_seed(root_seed, "eval", index).generate_state(1)[0])


def pid_runner() -> EpisodeRunner:
    def run(market: MarketConfig) -> EpisodeLedger:
        return run_episode(market, PidController()).ledger

    return run


def bc_runner(policy: BcPolicy) -> EpisodeRunner:
    def run(market: MarketConfig) -> EpisodeLedger:
        return run_episode(market, policy).ledger

    return run


def model_runner(
    model: SemBidModel,
    *,
    target_rtg_scale: float = 1.0,
    composer: Optional[SemanticComposer] = None,
    embedder: Optional[SemanticEmbedder] = None,
) -> EpisodeRunner:
    """Roll out *model* conditioned on ``target_rtg_scale`` times the largest dataset return."""

    if model.normalizer is None:
        raise ConfigurationError("model carries no state normalization; load it from a training checkpoint")
    if model.cfg.enabled_tokens and embedder is not None and embedder.dim != model.cfg.semantic_dim:
        raise ConfigurationError(
            f"checkpoint expects semantic vectors of dim {model.cfg.semantic_dim}, embedder produces {embedder.dim}"
        )

    def run(market: MarketConfig) -> EpisodeLedger:
        result = rollout(
            model,
            AuctionEnv(market),
            normalizer=model.normalizer,
            target_return=target_rtg_scale * model.rtg_scale,
            composer=composer if model.cfg.enabled_tokens else None,
            embedder=embedder if model.cfg.enabled_tokens else None,
        )
        return result.ledger

    return run


def _score_row(method: str, rho: float, seed: int, market: MarketConfig, ledger: EpisodeLedger) -> dict:
    breakdown = compute_score(ledger, market.target_cpa, epsilon=market.epsilon, beta=market.beta)
    return {
        "method": method,
        "rho": rho,
        "seed": seed,
        "market_seed": market.seed,
        "target_cpa": market.target_cpa,
        "score": breakdown.score,
        "value": breakdown.value,
        "cost": breakdown.cost,
        "cpa": breakdown.cpa,
        "penalty": breakdown.penalty,
    }


def evaluate(
    runners: Mapping[str, EpisodeRunner],
    scenario: Scenario | str,
    rhos: Sequence[float],
    seeds: int,
    *,
    root_seed: int = 0,
    workers: int = 1,
) -> pd.DataFrame:
    """Score every method on the same markets for each budget regime and seed.

    Rows are sorted by (method, rho, seed) whatever the worker count.
    """

    jobs = []
    for rho in rhos:
        for index in range(seeds):
            market = MarketConfig.preset(scenario, seed=evaluation_seed(root_seed, index), budget_scale=rho)
            for method in runners:
                jobs.append((method, rho, index, market))

    def work(job) -> dict:
        method, rho, index, market = job
        return _score_row(method, rho, index, market, runners[method](market))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(job) for job in jobs]
    frame = pd.DataFrame(rows, columns=list(SCORE_COLUMNS))
    logger.info("evaluated %d episodes over %d methods", len(frame), len(runners))
    return frame.sort_values(["method", "rho", "seed"]).reset_index(drop=True)


def summarize(scores: pd.DataFrame, reference: Optional[str] = None) -> pd.DataFrame:
    """Mean and spread per (method, rho), plus gains against *reference* when present."""

    missing = sorted(set(SCORE_COLUMNS) - set(scores.columns))
    if missing:
        raise DataIntegrityError(f"score table lacks columns {missing}")
    grouped = scores.groupby(["method", "rho"], sort=True)["score"]
    summary = grouped.agg(mean="mean", std="std", n="count").reset_index()
    summary["std"] = summary["std"].fillna(0.0)
    if reference is not None:
        summary = add_relative_gain(summary, reference)
    return summary


def relative_gain(value: float, baseline: float) -> float:
    """``(value - baseline) / baseline``; NaN against a zero baseline."""

    if baseline == 0:
        return float("nan")
    return (value - baseline) / baseline


def add_relative_gain(summary: pd.DataFrame, reference: str) -> pd.DataFrame:
    base = summary[summary["method"] == reference].set_index("rho")["mean"]
    if base.empty:
        logger.warning("reference method %s absent; relative gains left empty", reference)
        summary = summary.copy()
        summary[f"gain_vs_{reference}"] = np.nan
        return summary
    gains = [relative_gain(row.mean, float(base.get(row.rho, np.nan))) for row in summary.itertuples()]
    summary = summary.copy()
    summary[f"gain_vs_{reference}"] = gains
    return summary


def score_pivot(summary: pd.DataFrame) -> pd.DataFrame:
    """Wide table: one row per rho, one column per method (plus the method average)."""

    table = summary.pivot(index="rho", columns="method", values="mean")
    table.loc["average"] = table.mean(axis=0)
    return table


def plot_series(summary: pd.DataFrame) -> pd.DataFrame:
    """Long-format (method, rho, mean, std) series for score-versus-budget plots."""

    return summary.loc[:, ["method", "rho", "mean", "std"]].sort_values(["method", "rho"]).reset_index(drop=True)


def ablation_table(summary: pd.DataFrame, full: str = "full") -> pd.DataFrame:
    """Average score per layout and its change relative to *full*."""

    averages = summary.groupby("method", sort=False)["mean"].mean()
    if full not in averages:
        raise ConfigurationError(f"ablation summary has no {full!r} layout")
    base = float(averages[full])
    return pd.DataFrame(
        {
            "layout": averages.index,
            "score": averages.values,
            "delta": averages.values - base,
            "relative": [relative_gain(value, base) for value in averages.values],
        }
    )


# ----------------------------------------------------------------------
# Persistence and merging
# ----------------------------------------------------------------------
@dataclass
class EvaluationReport:
    scores: pd.DataFrame
    summary: pd.DataFrame

    def write(self, out_dir: str | Path) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "scores": out_dir / "scores.csv",
            "summary": out_dir / "summary.csv",
            "json": out_dir / "summary.json",
        }
        self.scores.to_csv(paths["scores"], index=False)
        self.summary.to_csv(paths["summary"], index=False)
        payload = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "summary": json.loads(self.summary.to_json(orient="records")),
            "scores": json.loads(self.scores.to_json(orient="records")),
        }
        with paths["json"].open("w", encoding="utf8") as handle:
            json.dump(payload, handle, indent=2)
        return paths


def load_summary(run_dir: str | Path) -> pd.DataFrame:
    path = Path(run_dir) / "summary.csv"
    if not path.exists():
        raise FileNotFoundError(f"Run summary not found: {path}")
    frame = pd.read_csv(path)
    missing = sorted(set(SUMMARY_COLUMNS) - set(frame.columns))
    if missing:
        raise DataIntegrityError(f"{path} lacks columns {missing}")
    return frame


def merge_runs(run_dirs: Sequence[str | Path], reference: Optional[str] = None) -> pd.DataFrame:
    """Concatenate run summaries after checking they share one schema."""

    if not run_dirs:
        raise ConfigurationError("report needs at least one run directory")
    frames: List[pd.DataFrame] = []
    columns: Optional[List[str]] = None
    for run_dir in run_dirs:
        frame = load_summary(run_dir)
        if columns is None:
            columns = list(frame.columns)
        elif list(frame.columns) != columns:
            raise DataIntegrityError(f"{run_dir} has columns {list(frame.columns)}, expected {columns}")
        if reference is not None:
            frame = add_relative_gain(frame.drop(columns=[f"gain_vs_{reference}"], errors="ignore"), reference)
        frames.append(frame.assign(run=Path(run_dir).name))
    return pd.concat(frames, ignore_index=True)
