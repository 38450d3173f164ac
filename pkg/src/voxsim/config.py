"""Run configuration: a typed key/value tree with JSON round-trips.

One RunConfig drives every command.  Files and --set overrides address
keys by dotted path ("train.steps"); unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from voxsim.errors import ConfigError, DataError
from voxsim.lift import GridSpec
from voxsim.planner import PlannerConfig
from voxsim.training import TrainConfig


@dataclass
class GridSection:
    """Scene grid geometry."""

    dims: tuple = (32, 32, 32)
    voxel: float = 0.01875
    origin: tuple = (-0.3, -0.3, -0.075)


@dataclass
class DataSection:
    """Episode generation settings."""

    episodes: int = 500
    seed: int = 0
    mode: str = "push"
    split: str = "train"
    views: int = 3


@dataclass
class TrainSection:
    """Optimization settings shared by every training target."""

    target: str = "dynamics"
    variant: str = "ours"
    rounds: int = 1
    unroll_t: int = 5
    batch_size: int = 8
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0


@dataclass
class PlannerSection:
    """MPC settings plus benchmark episode count and seed."""

    samples: int = 30
    seq_len: int = 10
    horizon: int = 1
    action_low: float = 0.03
    action_high: float = 0.06
    success_radius: float = 0.04
    max_steps: int = 10
    threads: int = 1
    obstacle_penalty: float = 0.0
    episodes: int = 50
    seed: int = 0
    backend: str = "learned"


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    planner: PlannerSection = field(default_factory=PlannerSection)


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def default_config():
    return RunConfig()


def to_dict(cfg):
    """RunConfig -> plain nested dict (JSON-ready)."""
    out = {}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        out[name] = {f.name: _plain(getattr(section, f.name))
                     for f in dataclasses.fields(section)}
    return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def from_dict(tree):
    """Nested dict -> RunConfig, rejecting unknown keys and bad types."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a key/value tree")
    cfg = RunConfig()
    for name, sub in tree.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section: {name!r}")
        if not isinstance(sub, dict):
            raise ConfigError(f"config section {name!r} must be a tree")
        section = getattr(cfg, name)
        for key, value in sub.items():
            _set_field(section, name, key, value)
    return cfg


def _set_field(section, section_name, key, value):
    fields = {f.name: f for f in dataclasses.fields(section)}
    if key not in fields:
        raise ConfigError(f"unknown config key: {section_name}.{key}")
    current = getattr(section, key)
    setattr(section, key, _coerce(current, value, f"{section_name}.{key}"))


def _coerce(current, value, path):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        if float(value) != int(value):
            raise ConfigError(f"{path} must be an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(current):
            raise ConfigError(f"{path} must be a list of {len(current)}")
        return tuple(type(c)(v) for c, v in zip(current, value))
    raise ConfigError(f"{path} has unsupported type")


def load_config(path):
    """Read a JSON config file into a RunConfig."""
    try:
        with open(path) as fh:
            tree = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing config file: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    return from_dict(tree)


def save_config(cfg, path):
    """Echo the effective config as sorted JSON."""
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def apply_overrides(cfg, assignments):
    """Apply --set key=value pairs (dotted paths, JSON-parsed values)."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be section.field: {path!r}")
        section_name, key = parts
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section: {section_name!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings allowed unquoted
        _set_field(getattr(cfg, section_name), section_name, key, value)
    return cfg


def grid_spec(cfg):
    g = cfg.grid
    return GridSpec(tuple(g.dims), voxel=g.voxel, origin=tuple(g.origin))


def train_config(cfg):
    t = cfg.train
    return TrainConfig(unroll_t=t.unroll_t, batch_size=t.batch_size,
                       steps=t.steps, lr=t.lr, seed=t.seed,
                       grid=grid_spec(cfg))


def planner_config(cfg):
    p = cfg.planner
    return PlannerConfig(samples=p.samples, seq_len=p.seq_len,
                         horizon=p.horizon, action_low=p.action_low,
                         action_high=p.action_high,
                         success_radius=p.success_radius,
                         max_steps=p.max_steps, threads=p.threads,
                         obstacle_penalty=p.obstacle_penalty)
