"""Command line interface for the sembid experiment pipeline."""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from .baselines import bc_train_dataset
from .config import RunConfig
from .dataset import generate_offline_dataset, load_dataset, save_dataset
from .errors import CacheMissError, ConfigurationError, ContainerFormatError, DataIntegrityError, DomainError
from .model import SemBidModel, encode_semantics, load_model, train
from .probing import run_probe_study
from .report import (
    EvaluationReport,
    ablation_table,
    bc_runner,
    evaluate,
    merge_runs,
    model_runner,
    pid_runner,
    plot_series,
    score_pivot,
    summarize,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

DATASET_FILE = "dataset.sbds"
ABLATION_LAYOUTS = {
    "full": ("task", "history", "strategy"),
    "w.o. task": ("history", "strategy"),
    "w.o. history": ("task", "strategy"),
    "w.o. strategy": ("task", "history"),
    "w.o. all": (),
}


def _comma_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(item) for item in text.split(",") if item.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Flat JSON file with run settings; flags override it")
    parser.add_argument("--seed", type=int, help="Root seed for every random stream")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="Output directory (created if missing)")
    parser.add_argument("--scenario", help="Market preset: High, Medium or Low")
    parser.add_argument("--encoder", help="Text encoder: 'hash' or 'cache:<path>'")
    parser.add_argument("--tokens", help="Semantic roles to enable: all, none or e.g. task,history")
    parser.add_argument("--ablate", help="Semantic roles to remove from --tokens")
    parser.add_argument("--style", help="Prompt style: Standard, Concise, Directive, Verbose or Structured")
    parser.add_argument("--regime", help="Template regime: HighConv or LowConv (default follows the scenario)")
    parser.add_argument("--rho", type=_comma_floats, help="Budget scales, e.g. 0.5,1.0,1.5")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default INFO)")


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Semantic auto-bidding experiments on a simulated auction market")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Generate an offline behavior dataset")
    _add_common(gen)
    gen.add_argument("--trajectories", type=int, help="Number of behavior episodes")
    gen.add_argument("--workers", type=int, help="Episode collection threads")

    fit = commands.add_parser("train", help="Train a (semantic) decision transformer")
    _add_common(fit)
    fit.add_argument("--dataset", type=Path, help=f"Dataset container (default <out>/{DATASET_FILE})")
    fit.add_argument("--steps", type=int, help="Gradient steps")
    fit.add_argument("--resume", type=Path, help="Checkpoint to continue from")

    ev = commands.add_parser("eval", help="Score methods across budget regimes and seeds")
    _add_common(ev)
    ev.add_argument("--dataset", type=Path, help="Dataset for behavior cloning")
    ev.add_argument("--checkpoint", action="append", default=[], metavar="METHOD=PATH", help="dt=... or sembid=...")
    ev.add_argument("--methods", help="Comma-separated subset of pid,bc,dt,sembid")
    ev.add_argument("--seeds", type=int, dest="eval_seeds", help="Evaluation seeds per budget scale")

    ab = commands.add_parser("ablate", help="Train and score every token layout")
    _add_common(ab)
    ab.add_argument("--dataset", type=Path, help=f"Dataset container (default <out>/{DATASET_FILE})")
    ab.add_argument("--steps", type=int, help="Gradient steps per layout")
    ab.add_argument("--seeds", type=int, dest="eval_seeds", help="Evaluation seeds per budget scale")

    probe = commands.add_parser("probe", help="Run the embedding probing study")
    _add_common(probe)
    probe.add_argument("--trajectories", type=int, help="Behavior episodes to probe")

    rep = commands.add_parser("report", help="Merge evaluation runs into comparison tables")
    rep.add_argument("runs", type=Path, nargs="+", help="Run directories holding summary.csv")
    rep.add_argument("--out", type=Path, default=Path("report"), help="Output directory")
    rep.add_argument("--reference", default="pid", help="Method the relative gains are measured against")
    rep.add_argument("--log-level", default="INFO", help="Logging level (default INFO)")

    return parser.parse_args(argv)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config is not None else RunConfig()
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "scenario": args.scenario,
        "encoder": args.encoder,
        "tokens": args.tokens,
        "ablate": args.ablate,
        "style": args.style,
        "regime": args.regime,
        "rho": args.rho,
        "n_trajectories": getattr(args, "trajectories", None) if args.command == "gen-data" else None,
        "probe_trajectories": getattr(args, "trajectories", None) if args.command == "probe" else None,
        "workers": getattr(args, "workers", None),
        "steps": getattr(args, "steps", None),
        "eval_seeds": getattr(args, "eval_seeds", None),
        "methods": args.methods.split(",") if getattr(args, "methods", None) else None,
    }
    return base.merged(**overrides)


def _dataset_path(args: argparse.Namespace) -> Path:
    return args.dataset if getattr(args, "dataset", None) is not None else args.out / DATASET_FILE


def _parse_checkpoints(items: List[str]) -> Dict[str, Path]:
    checkpoints: Dict[str, Path] = {}
    for item in items:
        method, sep, path = item.partition("=")
        if not sep or method not in ("dt", "sembid"):
            raise ConfigurationError(f"--checkpoint expects dt=PATH or sembid=PATH, got {item!r}")
        checkpoints[method] = Path(path)
    return checkpoints


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, out: Path) -> Path:
    dataset = generate_offline_dataset(cfg.market(), n_trajectories=cfg.n_trajectories, seed=cfg.seed, workers=cfg.workers)
    path = save_dataset(dataset, out / DATASET_FILE)
    cfg.write_resolved(out)
    logger.info("wrote %s", path)
    return path


def _train_layout(cfg: RunConfig, dataset, out: Path, tokens: tuple[str, ...], resume: Optional[Path] = None):
    model = SemBidModel(cfg.model_config(tokens))
    corpus = encode_semantics(dataset, cfg.composer(), cfg.embedder()) if tokens else None
    result = train(model, dataset, corpus, cfg.train_config(), out_dir=out, resume=resume)
    return model, result


def cmd_train(cfg: RunConfig, dataset_path: Path, out: Path, resume: Optional[Path] = None) -> Path:
    dataset = load_dataset(dataset_path)
    _, result = _train_layout(cfg, dataset, out, cfg.enabled_tokens, resume)
    cfg.write_resolved(out)
    logger.info("final loss %.6f after %d steps", result.final_loss, result.final_step)
    return result.checkpoints[-1] if result.checkpoints else out


def _select_checkpoint(path: Path, cfg: RunConfig) -> Path:
    """A checkpoint file, or the best one of a directory under a coarse evaluation."""

    if path.is_file() or not path.exists():
        return path
    candidates = sorted(path.glob("*.ckpt"))
    if not candidates:
        raise FileNotFoundError(f"No checkpoints in {path}")
    if cfg.checkpoint_selection == "final" or len(candidates) == 1:
        return candidates[-1]
    best, best_score = candidates[-1], float("-inf")
    for candidate in candidates:
        runner = model_runner(load_model(candidate), target_rtg_scale=cfg.target_rtg_scale, composer=cfg.composer(), embedder=cfg.embedder())
        scores = evaluate({"candidate": runner}, cfg.scenario, (1.0,), 2, root_seed=cfg.seed + 1)
        score = float(scores["score"].mean())
        logger.info("checkpoint %s coarse score %.3f", candidate.name, score)
        if score > best_score:
            best, best_score = candidate, score
    return best


def cmd_eval(cfg: RunConfig, out: Path, checkpoints: Dict[str, Path], dataset_path: Optional[Path]) -> EvaluationReport:
    runners = {}
    for method in cfg.methods:
        if method == "pid":
            runners["pid"] = pid_runner()
        elif method == "bc":
            if dataset_path is None or not dataset_path.exists():
                raise FileNotFoundError(f"Behavior cloning needs a dataset: {dataset_path}")
            runners["bc"] = bc_runner(bc_train_dataset(load_dataset(dataset_path), cfg.bc_config()))
        else:
            if method not in checkpoints:
                raise ConfigurationError(f"method {method!r} needs --checkpoint {method}=PATH")
            model = load_model(_select_checkpoint(checkpoints[method], cfg))
            if method == "dt" and model.cfg.enabled_tokens:
                raise ConfigurationError("the dt checkpoint was trained with semantic tokens")
            runners[method] = model_runner(
                model, target_rtg_scale=cfg.target_rtg_scale, composer=cfg.composer(), embedder=cfg.embedder()
            )
    scores = evaluate(runners, cfg.scenario, cfg.rho, cfg.eval_seeds, root_seed=cfg.seed, workers=cfg.workers)
    summary = summarize(scores, cfg.reference_method)
    report = EvaluationReport(scores=scores, summary=summary)
    report.write(out)
    cfg.write_resolved(out)
    return report


def cmd_ablate(cfg: RunConfig, dataset_path: Path, out: Path):
    dataset = load_dataset(dataset_path)
    runners = {}
    for layout, tokens in ABLATION_LAYOUTS.items():
        folder = out / layout.replace("w.o. ", "wo_").replace(" ", "_")
        model, _ = _train_layout(cfg, dataset, folder, tokens)
        runners[layout] = model_runner(model, target_rtg_scale=cfg.target_rtg_scale, composer=cfg.composer(), embedder=cfg.embedder())
    scores = evaluate(runners, cfg.scenario, cfg.rho, cfg.eval_seeds, root_seed=cfg.seed, workers=cfg.workers)
    summary = summarize(scores)
    EvaluationReport(scores=scores, summary=summary).write(out)
    table = ablation_table(summary)
    table.to_csv(out / "ablation.csv", index=False)
    cfg.write_resolved(out)
    return table


def cmd_probe(cfg: RunConfig, out: Path) -> Dict[str, Path]:
    study = run_probe_study(
        cfg.market(),
        embedder=cfg.embedder(),
        composer=cfg.composer(),
        n_trajectories=cfg.probe_trajectories,
        seeds=tuple(range(cfg.probe_seeds)),
    )
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    payload = {}
    for name, table in study.tables().items():
        paths[name] = out / f"{name}.csv"
        table.to_csv(paths[name], index=False)
        payload[name] = json.loads(table.to_json(orient="records"))
    with (out / "probe.json").open("w", encoding="utf8") as handle:
        json.dump(payload, handle, indent=2)
    cfg.write_resolved(out)
    return paths


def cmd_report(runs: List[Path], out: Path, reference: str) -> Dict[str, Path]:
    merged = merge_runs(runs, reference)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"merged": out / "report.csv", "table": out / "table.csv", "series": out / "series.csv"}
    merged.to_csv(paths["merged"], index=False)
    score_pivot(merged.groupby(["method", "rho"], as_index=False)["mean"].mean()).to_csv(paths["table"])
    plot_series(merged.groupby(["method", "rho"], as_index=False).agg(mean=("mean", "mean"), std=("std", "mean"))).to_csv(
        paths["series"], index=False
    )
    return paths


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "report":
            cmd_report(args.runs, args.out, args.reference)
            return EXIT_OK
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, _dataset_path(args), args.out, args.resume)
        elif args.command == "eval":
            cmd_eval(cfg, args.out, _parse_checkpoints(args.checkpoint), _dataset_path(args))
        elif args.command == "ablate":
            cmd_ablate(cfg, _dataset_path(args), args.out)
        elif args.command == "probe":
            cmd_probe(cfg, args.out)
    except (ConfigurationError, DomainError, CacheMissError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (DataIntegrityError, ContainerFormatError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
