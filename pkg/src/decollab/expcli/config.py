"""Flat ``key = value`` run configuration files."""
from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

from ..errors import ConfigurationError
from ..trainers import ALGORITHMS, TrainConfig

CONFIG_KEYS = (
    "algorithm", "env", "turns", "generations", "epochs", "agent_lr", "critic_lr", "gamma",
    "advantage_clip", "minibatch", "buffer", "eval_samples", "seed", "out_dir",
)
INT_KEYS = {"turns", "generations", "epochs", "minibatch", "buffer", "eval_samples", "seed"}
FLOAT_KEYS = {"agent_lr", "critic_lr", "gamma", "advantage_clip"}
DOMAINS = {
    "algorithm": f"one of {', '.join(ALGORITHMS)}",
    "env": "an environment name such as pairwrite, coopcode, gridbuild",
    "turns": "integer >= 1",
    "generations": "integer >= 1 (>= 2 for magrpo)",
    "epochs": "integer >= 0",
    "agent_lr": "real > 0",
    "critic_lr": "real > 0",
    "gamma": "real in [0, 1]",
    "advantage_clip": "real in [0, 1)",
    "minibatch": "integer >= 1",
    "buffer": "integer >= 1",
    "eval_samples": "integer >= 0",
    "seed": "integer",
    "out_dir": "path",
}
ALIASES = {"ma-reinforce": "mareinforce", "collm-dc": "collm_dc", "collm-cc": "collm_cc"}


def parse_config_text(text: str, source: str = "<config>", **overrides) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}; allowed keys are {', '.join(CONFIG_KEYS)}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, val, source, lineno)
    missing = [k for k in CONFIG_KEYS if k not in values]
    if missing:
        raise ConfigurationError(f"{source}: missing key(s) {', '.join(missing)}")
    try:
        return TrainConfig(**values, **overrides)
    except ConfigurationError as e:
        key = str(e).split(":", 1)[0]
        hint = f" (expected {DOMAINS[key]})" if key in DOMAINS else ""
        raise ConfigurationError(f"{source}: {e}{hint}") from None


def _convert(key, val, source, lineno):
    try:
        if key in INT_KEYS:
            return int(val)
        if key in FLOAT_KEYS:
            return float(val)
    except ValueError:
        raise ConfigurationError(f"{source}:{lineno}: {key} = {val!r} is not {DOMAINS[key]}") from None
    if key == "algorithm":
        val = ALIASES.get(val.lower(), val.lower())
    return val


def preset_names() -> list:
    root = resources.files("decollab") / "presets"
    return sorted(f"{d.name}/{f.name[:-4]}" for d in root.iterdir() if d.is_dir()
                  for f in d.iterdir() if f.name.endswith(".cfg"))


def resolve_config(path) -> Path:
    """A file path, or a shipped preset name such as ``paper/coding_magrpo``."""
    p = Path(path)
    if p.exists():
        return p
    name = str(path).removesuffix(".cfg")
    if name in preset_names():
        return Path(str(resources.files("decollab") / "presets" / f"{name}.cfg"))
    raise ConfigurationError(f"config {path!s} not found (and not a preset; presets are {', '.join(preset_names())})")


def parse_config(path, **overrides) -> TrainConfig:
    p = resolve_config(path)
    return parse_config_text(p.read_text(), str(p), **overrides)


def format_config(cfg: TrainConfig) -> str:
    d = dataclasses.asdict(cfg)
    return "".join(f"{k} = {d[k]}\n" for k in CONFIG_KEYS)
