"""Experiment configuration: nested dataclasses parsed strictly from JSON.

Seeds: one master seed per run; every consumer derives its generator from
``(master, stream name)``. World seeds come from disjoint ranges per split.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import dacite

from ..baselines import DaggerConfig, PpoBcConfig
from ..planners import DemoConfig, MppiConfig
from ..ppo import PpoConfig
from ..tad import TadpoConfig
from ..worlds import FAMILIES, EnvConfig, RewardWeights, WorldGenConfig

OUTPUT_ROOT_ENV = "TADPO_OUTPUT_ROOT"
METHODS = ("ppo", "tadpo", "dagger", "ppo_bc", "mppi_direct", "pure_pursuit")
SEED_RANGES = {"train": (0, 1_000_000), "demo": (1_000_000, 2_000_000), "eval": (2_000_000, 3_000_000)}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def world_seeds(split: str, n: int, offset: int = 0) -> list[int]:
    lo, hi = SEED_RANGES[split]
    if n < 0 or lo + offset + n > hi:
        raise ConfigError(f"worlds.n_{split}: {n} seeds do not fit the {split} seed range")
    return list(range(lo + offset, lo + offset + n))


def split_of(seed: int) -> str:
    for name, (lo, hi) in SEED_RANGES.items():
        if lo <= seed < hi:
            return name
    raise ConfigError(f"world seed {seed} lies outside every seed range")


def assert_partition(train: list[int], demo: list[int], evaluation: list[int]) -> None:
    """Raise unless each world seed sits in its own split's range (which makes the splits disjoint)."""
    for name, seeds in (("train", train), ("demo", demo), ("eval", evaluation)):
        for s in seeds:
            if split_of(s) != name:
                raise ConfigError(f"{name} world seed {s} lies in the {split_of(s)} range")


@dataclass(frozen=True)
class WorldSetConfig:
    family: str = "obstacles"
    difficulty: float = 1.0
    n_train: int = 20
    n_demo: int = 20
    n_eval: int = 20
    gen: WorldGenConfig = field(default_factory=WorldGenConfig)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"worlds.family: {self.family!r} is not one of {FAMILIES}")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ConfigError("worlds.difficulty: must lie in [0, 1]")


@dataclass(frozen=True)
class TeacherConfig:
    """PPO on the dense-plan view, rewarded for progress along the dense plan."""

    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(iterations=100, epochs=10))
    reward: RewardWeights = field(default_factory=lambda: RewardWeights(jerk=0.005))
    kind: str = "ppo"  # ppo | mppi | pure_pursuit

    def __post_init__(self):
        if self.kind not in ("ppo", "mppi", "pure_pursuit"):
            raise ConfigError(f"teacher.kind: unknown teacher {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "tadpo"
    seeds: tuple[int, ...] = (0, 1, 2)
    worlds: WorldSetConfig = field(default_factory=WorldSetConfig)
    n_envs: int = 8
    hidden: tuple[int, ...] = (128, 64, 64)
    eval_episodes_per_world: int = 1
    env: EnvConfig = field(default_factory=EnvConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    demo: DemoConfig = field(default_factory=lambda: DemoConfig(episodes_per_world=2))
    ppo: PpoConfig = field(default_factory=PpoConfig)
    tadpo: TadpoConfig = field(default_factory=TadpoConfig)
    dagger: DaggerConfig = field(default_factory=DaggerConfig)
    ppo_bc: PpoBcConfig = field(default_factory=PpoBcConfig)
    mppi: MppiConfig = field(default_factory=MppiConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} is not one of {METHODS}")
        if not self.seeds:
            raise ConfigError("seeds: the seed list must be nonempty")
        if self.n_envs < 1:
            raise ConfigError("n_envs: must be >= 1")
        if self.eval_episodes_per_world < 1:
            raise ConfigError("eval_episodes_per_world: must be >= 1")

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def digest(self) -> str:
        """Hash of the canonical JSON form, excluding where outputs go."""
        d = self.to_dict()
        d.pop("output_dir", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def output_path(self) -> Path:
        if self.output_dir is not None:
            return Path(self.output_dir)
        return output_root() / f"{self.method}-{self.digest()}"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_DACITE = dacite.Config(strict=True, cast=[tuple], type_hooks={float: lambda v: float(v) if isinstance(v, int) and not isinstance(v, bool) else v})


def config_from_dict(data: dict, cls=ExperimentConfig):
    """Strict parse: unknown keys, wrong types and invalid values raise ConfigError naming the field."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cls, data, "")
    try:
        return dacite.from_dict(cls, data, config=_DACITE)
    except dacite.DaciteError as exc:
        raise ConfigError(str(exc)) from None
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _check_keys(cls, data: dict, prefix: str) -> None:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{prefix}{key}: unknown field")
        sub = hints[key]
        if dataclasses.is_dataclass(sub) and isinstance(value, dict):
            _check_keys(sub, value, f"{prefix}{key}.")


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
