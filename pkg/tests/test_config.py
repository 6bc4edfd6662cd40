import json

import pytest

from sembid.auction_env import BUDGET_SCALES
from sembid.config import METHODS, RunConfig, parse_tokens
from sembid.errors import ConfigurationError


def test_defaults():
    cfg = RunConfig()
    assert cfg.scenario == "High"
    assert cfg.rho == BUDGET_SCALES
    assert cfg.methods == METHODS
    assert cfg.enabled_tokens == ("task", "history", "strategy")
    assert cfg.model_config().semantic_dim == 2048
    assert cfg.embedder().dim == 2048


@pytest.mark.parametrize(
    "value, expected",
    [
        ("all", ("task", "history", "strategy")),
        ("none", ()),
        ("strategy, task", ("task", "strategy")),
        (["History"], ("history",)),
    ],
)
def test_parse_tokens(value, expected):
    assert parse_tokens(value) == expected


def test_parse_tokens_rejects_unknown_roles():
    with pytest.raises(ConfigurationError):
        parse_tokens("task,reward")


def test_ablation_removes_roles():
    cfg = RunConfig(ablate="history")
    assert cfg.enabled_tokens == ("task", "strategy")
    assert cfg.model_config().enabled_tokens == ("task", "strategy")
    assert cfg.model_config(()).enabled_tokens == ()


def test_names_are_normalized():
    cfg = RunConfig(scenario="medium", style="concise", regime="lowconv", methods=["PID"])
    assert (cfg.scenario, cfg.style, cfg.regime) == ("Medium", "Concise", "LowConv")
    assert cfg.methods == ("pid",)


@pytest.mark.parametrize(
    "overrides",
    [
        {"rho": (0.9,)},
        {"rho": ()},
        {"methods": ("pid", "ppo")},
        {"reference_method": "ppo"},
        {"checkpoint_selection": "median"},
        {"eval_seeds": 0},
        {"target_rtg_scale": -1.0},
        {"scenario": "Huge"},
    ],
)
def test_invalid_values(overrides):
    with pytest.raises(ConfigurationError):
        RunConfig(**overrides)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match="learning_rate"):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_from_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"scenario": "Low", "rho": [0.5, 1.5], "tokens": "task"}))
    cfg = RunConfig.from_file(path)
    assert cfg.scenario == "Low"
    assert cfg.rho == (0.5, 1.5)
    assert cfg.tokens == ("task",)


def test_from_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{scenario: High")
    with pytest.raises(ConfigurationError):
        RunConfig.from_file(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        RunConfig.from_file(listed)


def test_merged_skips_missing_flags():
    cfg = RunConfig(seed=4, steps=10)
    merged = cfg.merged(seed=None, steps=20, scenario=None)
    assert (merged.seed, merged.steps, merged.scenario) == (4, 20, "High")
    with pytest.raises(ConfigurationError):
        cfg.merged(batch=3)


def test_resolved_config_round_trips(tmp_path):
    cfg = RunConfig(scenario="Medium", ablate="task", rho=(1.0,))
    path = cfg.write_resolved(tmp_path / "run")
    assert path.name == "resolved_config.json"
    assert RunConfig.from_file(path) == cfg


def test_derived_configs_follow_flat_values():
    cfg = RunConfig(lr=3e-4, steps=7, bc_steps=9, encoder_dim=64, projected_dim=32, seed=5, stop_loss=1e-3)
    assert cfg.train_config().lr == pytest.approx(3e-4)
    assert cfg.train_config().steps == 7
    assert cfg.train_config().stop_loss == pytest.approx(1e-3)
    assert RunConfig().train_config().stop_loss is None
    assert cfg.bc_config().steps == 9
    assert cfg.projection().in_dim == 64
    assert cfg.embedder().dim == 32
    assert cfg.market(budget_scale=0.5).budget_scale == 0.5
    assert cfg.composer() is not None
