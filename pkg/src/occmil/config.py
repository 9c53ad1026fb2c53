"""Flat ``key=value`` configuration files and the shipped presets.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are converted to the type of the matching dataclass field.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .bagstore import SynthConfig
from .errors import InvalidConfig, IoFailure
from .trainer import TrainConfig

PRESETS = ("1p19q", "atrx", "tert", "idh", "mgmt")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key/value strings in file order; duplicate keys are errors."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise InvalidConfig(f"{source}:{lineno}: expected key=value, got {line!r}")
        if key in out:
            raise InvalidConfig(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(kind, key: str, value: str, source: str):
    try:
        if kind is bool or kind == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if kind is int or kind == "int":
            return int(value, 0)
        if kind is float or kind == "float":
            return float(value)
    except ValueError:
        raise InvalidConfig(f"{source}: bad value for {key!r}: {value!r}") from None
    return value


def _typed(cls, raw: dict[str, str], source: str) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise InvalidConfig(f"{source}: unknown keys {unknown}")
    return {k: _convert(types[k], k, v, source) for k, v in raw.items()}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    folds: int = 10
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    manifest: Optional[str] = None
    out_dir: Optional[str] = None


_RUN_KEYS = ("folds", "ratios", "manifest", "out_dir")


def _ratios(value: str, source: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in value.replace(";", ",").split(","))
    except ValueError:
        parts = ()
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise InvalidConfig(f"{source}: ratios must be three non-negative numbers summing to 1, got {value!r}")
    return parts


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    raw = parse_pairs(text, source)
    extra = {k: raw.pop(k) for k in _RUN_KEYS if k in raw}
    try:
        train = TrainConfig(**_typed(TrainConfig, raw, source))
    except InvalidConfig as exc:
        raise InvalidConfig(f"{source}: {exc}") from None
    run = {"train": train}
    if "folds" in extra:
        run["folds"] = _convert(int, "folds", extra["folds"], source)
        if run["folds"] < 1:
            raise InvalidConfig(f"{source}: folds must be >= 1")
    if "ratios" in extra:
        run["ratios"] = _ratios(extra["ratios"], source)
    for key in ("manifest", "out_dir"):
        if key in extra:
            run[key] = extra[key]
    return RunConfig(**run)


def parse_synth_config(text: str, source: str = "<config>") -> SynthConfig:
    cfg = SynthConfig(**_typed(SynthConfig, parse_pairs(text, source), source))
    try:
        cfg.validate()
    except InvalidConfig as exc:
        raise InvalidConfig(f"{source}: {exc}") from None
    return cfg


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"{path}: cannot read config ({exc.strerror or exc})") from exc


def load_run_config(path) -> RunConfig:
    return parse_run_config(read_text(path), str(path))


def load_synth_config(path) -> SynthConfig:
    return parse_synth_config(read_text(path), str(path))


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def format_train_config(cfg: TrainConfig) -> str:
    """Canonical text form; parsing it gives back an equal config."""
    lines = []
    for name, value in dataclasses.asdict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name}={value!r}" if isinstance(value, float) else f"{name}={value}")
    return "\n".join(lines) + "\n"


def preset_text(name: str) -> str:
    key = name.lower()
    if key not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("occmil.presets").joinpath(f"{key}.cfg").read_text(encoding="utf-8")


def load_preset(name: str) -> RunConfig:
    return parse_run_config(preset_text(name), f"preset:{name}")
