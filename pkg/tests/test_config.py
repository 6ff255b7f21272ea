import dataclasses
from pathlib import Path

import pytest

from geli.config import ConfigError, ExperimentConfig, load_config, parse_config_text

DEFAULT_CFG = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"


def test_default_file_matches_defaults():
    cfg = load_config(DEFAULT_CFG)
    assert dataclasses.replace(cfg, paths=ExperimentConfig().paths) == ExperimentConfig()
    assert cfg.paths.workdir == "runs/default"


def test_text_round_trip():
    cfg = parse_config_text("seed = 7\nenv.proxy_accuracy_p = 0.5\nreward_train.hidden = 8, 4\n")
    assert parse_config_text(cfg.to_text()) == cfg


def test_seed_propagates_to_sections():
    cfg = parse_config_text("seed = 9")
    assert cfg.env.seed == cfg.geli.rng_seed == cfg.ppo.seed == 9
    assert cfg.with_seed(3).env.seed == 3


def test_seed_changes_hash():
    assert ExperimentConfig().content_hash() != ExperimentConfig().with_seed(1).content_hash()
    assert ExperimentConfig().content_hash() == ExperimentConfig().content_hash()


def test_types_are_coerced():
    cfg = parse_config_text("ppo.use_score_norm = no\ngeli.rrd_k = none\nreward_train.hidden = 3\n")
    assert cfg.ppo.use_score_norm is False
    assert cfg.geli.rrd_k is None
    assert cfg.reward_train.hidden == (3,)


def test_comments_and_blank_lines():
    cfg = parse_config_text("# header\n\nseed = 5  # trailing\n")
    assert cfg.seed == 5


@pytest.mark.parametrize("text, needle", [
    ("env.horizon = 3", "unknown key"),
    ("bogus.x = 1", "unknown key"),
    ("env.seed = 3", "unknown key"),
    ("seed 3", "expected"),
    ("env.horizon_T = three", "cannot parse"),
    ("geli.lam = 2.0", "lambda"),
    ("env.num_trajectories = 10", "split"),
    ("experiment.methods = GE_FOO", "unknown method"),
    ("env.proxy_accuracy_p = 0.2", "proxy_accuracy_p"),
])
def test_config_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.cfg")


def test_workdir_resolution(monkeypatch):
    monkeypatch.delenv("GELI_WORKDIR", raising=False)
    with pytest.raises(ConfigError):
        ExperimentConfig().resolve_workdir()
    monkeypatch.setenv("GELI_WORKDIR", "/tmp/w")
    assert str(ExperimentConfig().resolve_workdir()) == "/tmp/w"


def test_method_specs():
    tags = [m.tag for m in ExperimentConfig().method_specs]
    assert tags == ["Mean", "Mode", "GE_IRCR", "GE_RUDDER", "GE_RRD_K8", "GE_RRD_K16",
                    "LI_ONLY", "GELI_RRD_VA"]
