"""Training configuration files.

Grammar (UTF-8)::

    # comment
    [model]
    router = ld-shared
    num_experts = 8

    [data]
    n_train = 1024

    [train]
    seed = 0
    epochs = 10
    beta = 0.1
    lr_milestones = 6, 8

Sections are ``model``, ``data`` and ``train``. Every key maps to a field of
:class:`ModelConfig`, :class:`DatasetSpec` or :class:`TrainConfig`; unknown
sections or keys are errors. ``model.router``, ``train.seed`` and
``train.epochs`` are required, everything else falls back to the desk-scale
defaults of :func:`toy_config`. The ``LDMOLE_SEED`` environment variable, when
set, replaces ``train.seed``.
"""

from __future__ import annotations

import configparser
import os
import typing
from dataclasses import fields, replace
from pathlib import Path

from .model import ModelConfig
from .training import DatasetSpec, TrainConfig, toy_config

SEED_ENV = "LDMOLE_SEED"
REQUIRED = ("model.router", "train.seed", "train.epochs")
_SECTIONS = {"model": ModelConfig, "data": DatasetSpec, "train": TrainConfig}
_NESTED = {"model", "data"}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per field path."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name not in _NESTED}


def _convert(raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        item = args[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_convert(p, item) for p in parts)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.strip().lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(raw, inner)
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is bool:
        low = raw.strip().lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return low == "true"
    return raw.strip()


def parse_config(text: str, env: dict | None = None) -> TrainConfig:
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep key case so typos are not silently normalised
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None

    problems = []
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in cp.sections():
        if section not in _SECTIONS:
            problems.append(f"{section}: unknown section")
            continue
        types = _field_types(_SECTIONS[section])
        for key, raw in cp.items(section):
            path = f"{section}.{key}"
            if key not in types:
                problems.append(f"{path}: unknown key")
                continue
            try:
                values[section][key] = _convert(raw, types[key])
            except ValueError as exc:
                problems.append(f"{path}: {exc}")

    seed_raw = env.get(SEED_ENV)
    if seed_raw is not None and seed_raw.strip():
        try:
            values["train"]["seed"] = int(seed_raw)
        except ValueError:
            problems.append(f"{SEED_ENV}: expected an integer, got {seed_raw!r}")
    for path in REQUIRED:
        section, key = path.split(".")
        if key not in values[section]:
            problems.append(f"{path}: missing required field")
    if problems:
        raise ConfigError(problems)

    base = toy_config()
    for shared in ("vocab_size", "num_classes"):
        # one setting is enough; the dataset follows the model
        if shared in values["model"] and shared not in values["data"]:
            values["data"][shared] = values["model"][shared]
    try:
        model = replace(base.model, **values["model"])
    except ValueError as exc:
        problems.append(f"model: {exc}")
    try:
        data = replace(base.data, **values["data"])
    except ValueError as exc:
        problems.append(f"data: {exc}")
    if problems:
        raise ConfigError(problems)
    try:
        return replace(base, model=model, data=data, **values["train"])
    except ValueError as exc:
        raise ConfigError([f"train: {exc}"]) from None


def load_config(path, env: dict | None = None) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{p}: config file not found"])
    return parse_config(p.read_text(encoding="utf-8"), env)


def dump_config(config: TrainConfig) -> str:
    """Render ``config`` in the file grammar; ``parse_config`` inverts it."""
    lines = []
    for section, obj in (("model", config.model), ("data", config.data), ("train", config)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            if f.name in _NESTED and section == "train":
                continue
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
