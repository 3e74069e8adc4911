"""Experiment configuration files.

INI-style ``key = value`` text with one section per module::

    [experiment]
    task = mqar
    seeds = 0, 1

    [model]
    preset = desk-tiny
    K = 4

Keys are checked against each section's schema; anything unknown is an error
so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, preset


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.replace(",", " ").split()]


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none") else int(v)


_MODEL_TYPES = {"n_G": _opt_int, "d_state": _opt_int, "d_cache": _opt_int, "eps": float, "score_bias": _bool,
               "cache_source": str}

TASKS = ("mqar", "freeze-scan", "holo", "profile")

SCHEMA: dict[str, dict[str, object]] = {
    "experiment": {"task": str, "seeds": _ints, "deterministic": _bool, "name": str},
    "model": {"preset": str, **{f.name: _MODEL_TYPES.get(f.name, int) for f in fields(ModelConfig)}},
    "train": {"corpus": str, "phase1_steps": int, "phase2_steps": int, "phase1_lr": float, "phase2_lr": float,
              "batch_size": int, "seq_len": int, "warmup": int, "eval_every": int, "eval_windows": int,
              "patience": _opt_int, "checkpoint_every": _opt_int, "freeze_phase2": _bool},
    "mqar": {"arch": str, "seq_len": int, "n_pairs": int, "vocab": int, "min_gap": int, "n_train": int,
             "n_test": int, "steps": int, "lr": float, "batch_size": int, "warmup": int, "eval_every": int},
    "holo": {"layers": _ints, "steps_per_layer": int, "heads": int, "lam": float, "lr": float,
             "batch_size": int, "seq_len": int, "checkpoint": str},
    "profile": {"prompt_lengths": _ints, "gen_tokens": int, "runs": int, "checkpoint": str},
}


@dataclass
class ExperimentConfig:
    task: str = "mqar"
    seeds: list[int] = field(default_factory=lambda: [0])
    deterministic: bool = True
    name: str = "experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    sections: dict[str, dict] = field(default_factory=dict)
    source: str = ""

    def section(self, name: str) -> dict:
        return dict(self.sections.get(name, {}))


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str  # keys are case sensitive (W, K, n_G)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections: dict[str, dict] = {}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        out = {}
        for key, raw in parser.items(sec):
            conv = SCHEMA[sec].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                out[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from exc
        sections[sec] = out
    exp = sections.pop("experiment", {})
    model_kw = dict(sections.pop("model", {}))
    name = model_kw.pop("preset", "desk-tiny")
    try:
        model = preset(name, **model_kw)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"[model] {exc}") from exc
    cfg = ExperimentConfig(model=model, sections=sections, source=text, **exp)
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}; expected one of {', '.join(TASKS)}")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    return cfg


def read_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
