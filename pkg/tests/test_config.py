from dataclasses import replace

import pytest

from ldmole.config import ConfigError, dump_config, load_config, parse_config
from ldmole.training import reference_config, toy_config

MINIMAL = """
[model]
router = topk   # inline comment
[train]
seed = 3
epochs = 2
"""


def test_minimal_file_uses_defaults():
    cfg = parse_config(MINIMAL, env={})
    base = toy_config()
    assert cfg.model == replace(base.model, router="topk")
    assert cfg.seed == 3 and cfg.epochs == 2
    assert cfg.data == base.data and cfg.lr == base.lr


@pytest.mark.parametrize("cfg", [toy_config(), reference_config(),
                                 toy_config(beta=0.25, lr_milestones=(3,), epochs=4)])
def test_dump_parse_roundtrip(cfg):
    assert parse_config(dump_config(cfg), env={}) == cfg


def test_unknown_key_and_section_are_reported():
    with pytest.raises(ConfigError) as ei:
        parse_config(MINIMAL + "num_expert = 4\n[extra]\nx = 1\n", env={})
    assert "train.num_expert: unknown key" in ei.value.problems
    assert "extra: unknown section" in ei.value.problems


@pytest.mark.parametrize("missing", ["model.router", "train.seed", "train.epochs"])
def test_missing_required_field_is_named(missing):
    section, key = missing.split(".")
    text = "\n".join(line for line in MINIMAL.splitlines()
                     if not line.startswith(key + " "))
    with pytest.raises(ConfigError) as ei:
        parse_config(text, env={})
    assert ei.value.problems == [f"{missing}: missing required field"]


def test_bad_values():
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config(MINIMAL.replace("epochs = 2", "epochs = two"), env={})
    with pytest.raises(ConfigError, match="model"):
        parse_config(MINIMAL.replace("topk", "softmax"), env={})
    with pytest.raises(ConfigError, match="syntax"):
        parse_config("router = ld\n", env={})


def test_seed_environment_override():
    assert parse_config(MINIMAL, env={"LDMOLE_SEED": "11"}).seed == 11
    assert parse_config(MINIMAL, env={"LDMOLE_SEED": ""}).seed == 3
    with pytest.raises(ConfigError, match="LDMOLE_SEED"):
        parse_config(MINIMAL, env={"LDMOLE_SEED": "x"})
    # the override also satisfies the required field
    text = MINIMAL.replace("seed = 3\n", "")
    assert parse_config(text, env={"LDMOLE_SEED": "5"}).seed == 5


def test_dataset_follows_model_vocab():
    text = MINIMAL.replace("router = topk", "router = relu\nvocab_size = 64\nnum_classes = 4")
    cfg = parse_config(text, env={})
    assert cfg.data.vocab_size == 64 and cfg.data.num_classes == 4


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini", env={})
    p = tmp_path / "c.ini"
    p.write_text(MINIMAL, encoding="utf-8")
    assert load_config(p, env={}).seed == 3
