"""Experiment stages shared by the CLI and the reproduction suites."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..approximator import ActorCritic, PolicySpec
from ..baselines import evaluate_policy, evaluate_teacher, train_dagger, train_ppo_bc
from ..planners import (ControllerTeacher, MppiController, PolicyTeacher, PurePursuitController,
                        collect_demonstrations, realtime_mppi)
from ..ppo import train_ppo
from ..rollout import TeacherBuffer
from ..seeding import make_rng
from ..tad import train_tadpo
from ..worlds import EnvConfig, NavEnv, WorldSpec, generate_world, load_worlds, save_worlds
from .config import ConfigError, ExperimentConfig, WorldSetConfig, assert_partition, world_seeds

log = logging.getLogger(__name__)

STUDENT_METHODS = ("ppo", "tadpo", "dagger", "ppo_bc")
CONTROLLER_METHODS = ("mppi_direct", "mppi_realtime", "pure_pursuit")


# -- worlds -------------------------------------------------------------------


def _world_key(wcfg: WorldSetConfig, cfg: ExperimentConfig, seeds: Sequence[int]) -> str:
    blob = json.dumps({"family": wcfg.family, "difficulty": wcfg.difficulty, "seeds": list(seeds),
                       "gen": dataclasses.asdict(wcfg.gen), "env": dataclasses.asdict(cfg.env),
                       "mppi": dataclasses.asdict(cfg.mppi)}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_worlds(cfg: ExperimentConfig, split: str, cache_dir: Path | None = None) -> list[WorldSpec]:
    """Worlds of one split (train, demo or eval), generated from that split's seed range.

    Generation plans a dense path per world, so results are cached as JSON
    under ``cache_dir`` keyed by everything that affects them.
    """
    w = cfg.worlds
    n = {"train": w.n_train, "demo": w.n_demo, "eval": w.n_eval}[split]
    seeds = world_seeds(split, n)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{w.family}-{split}-{_world_key(w, cfg, seeds)}.json"
        if path.is_file():
            return load_worlds(path)
    worlds = [generate_world(w.family, w.difficulty, s, w.gen, cfg.env, cfg.mppi) for s in seeds]
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_worlds(path, worlds)
    return worlds


@dataclass
class WorldSets:
    train: list[WorldSpec]
    demo: list[WorldSpec]
    eval: list[WorldSpec]

    def __post_init__(self):
        assert_partition([w.seed for w in self.train], [w.seed for w in self.demo], [w.seed for w in self.eval])


def world_sets(cfg: ExperimentConfig, cache_dir: Path | None = None) -> WorldSets:
    return WorldSets(*(build_worlds(cfg, s, cache_dir) for s in ("train", "demo", "eval")))


def make_envs(worlds: Sequence[WorldSpec], env: EnvConfig, n_envs: int, seed: int, view: str = "student",
              reward_chain: str = "sparse") -> list[NavEnv]:
    if not worlds:
        raise ConfigError("worlds: the world list is empty")
    return [NavEnv(worlds, env, view=view, reward_chain=reward_chain,
                   seed=int(make_rng(seed, "env", i).integers(2**31))) for i in range(n_envs)]


def policy_spec(cfg: ExperimentConfig, view: str) -> PolicySpec:
    obs = cfg.env.teacher if view == "teacher" else cfg.env.student
    return PolicySpec(obs_dim=obs.dim, action_dim=2, hidden=cfg.hidden)


# -- teacher ------------------------------------------------------------------


def teacher_env_config(cfg: ExperimentConfig) -> EnvConfig:
    return dataclasses.replace(cfg.env, weights=cfg.teacher.reward)


def train_teacher(cfg: ExperimentConfig, worlds: Sequence[WorldSpec], seed: int,
                  on_iteration: Callable[[dict], None] | None = None) -> tuple[ActorCritic, list[dict]]:
    """PPO on the dense-plan view, with progress measured along the dense plan."""
    envs = make_envs(worlds, teacher_env_config(cfg), cfg.n_envs, make_rng(seed, "teacher-env").integers(2**31),
                     view="teacher", reward_chain="dense")
    return train_ppo(envs, cfg.teacher.ppo, seed, spec=policy_spec(cfg, "teacher"), on_iteration=on_iteration)


def make_teacher(cfg: ExperimentConfig, model: ActorCritic | None, seed: int = 0):
    kind = cfg.teacher.kind
    if kind == "ppo":
        if model is None:
            raise ConfigError("teacher.kind: a PPO teacher needs a checkpoint")
        return PolicyTeacher(model)
    if kind == "mppi":
        return ControllerTeacher(MppiController(cfg.mppi, cfg.env.vehicle, make_rng(seed, "mppi")), "mppi")
    return ControllerTeacher(PurePursuitController(), "pure_pursuit", reference="dense")


def collect_demos(cfg: ExperimentConfig, teacher, worlds: Sequence[WorldSpec], seed: int) -> TeacherBuffer:
    return collect_demonstrations(worlds, teacher, cfg.demo, cfg.env, seed=int(make_rng(seed, "demos").integers(2**31)))


# -- students -----------------------------------------------------------------


def train_student(method: str, cfg: ExperimentConfig, worlds: Sequence[WorldSpec], seed: int,
                  teacher=None, buffer: TeacherBuffer | None = None,
                  on_iteration: Callable[[dict], None] | None = None) -> tuple[ActorCritic, list[dict]]:
    envs = make_envs(worlds, cfg.env, cfg.n_envs, seed)
    spec = policy_spec(cfg, "student")
    if method == "ppo":
        return train_ppo(envs, cfg.ppo, seed, spec=spec, on_iteration=on_iteration)
    if method == "tadpo":
        if buffer is None:
            raise ConfigError("tadpo needs a teacher demonstration buffer")
        return train_tadpo(envs, buffer, cfg.tadpo, seed, spec=spec, on_iteration=on_iteration)
    if method == "dagger":
        return train_dagger(envs, teacher, cfg.dagger, seed, spec=spec, on_iteration=on_iteration)
    if method == "ppo_bc":
        return train_ppo_bc(envs, teacher, cfg.ppo_bc, seed, spec=spec, on_iteration=on_iteration)
    raise ConfigError(f"method: {method!r} is not a trainable student")


def evaluate_controller(name: str, cfg: ExperimentConfig, worlds: Sequence[WorldSpec], seed: int) -> dict:
    """Direct control by MPPI (generous or budget-capped) or pure pursuit on the dense plan."""
    if name == "pure_pursuit":
        teacher = ControllerTeacher(PurePursuitController(), "pure_pursuit", reference="dense")
    else:
        mcfg = cfg.mppi if name == "mppi_direct" else realtime_mppi(cfg.mppi)
        teacher = ControllerTeacher(MppiController(mcfg, cfg.env.vehicle, make_rng(seed, name)), name)
    return evaluate_teacher(teacher, worlds, cfg.env, cfg.eval_episodes_per_world)


def evaluate_student(model: ActorCritic, cfg: ExperimentConfig, worlds: Sequence[WorldSpec]) -> dict:
    return evaluate_policy(model, worlds, cfg.env, cfg.eval_episodes_per_world)


# -- run records ----------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    method: str
    family: str
    curves: dict[int, list[dict]] = field(default_factory=dict)
    metrics: dict[int, dict] = field(default_factory=dict)
    wall_clock: float = 0.0
    version: str = ""

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "method": self.method, "family": self.family,
                "curves": {str(k): v for k, v in self.curves.items()},
                "metrics": {str(k): v for k, v in self.metrics.items()},
                "wall_clock": self.wall_clock, "version": self.version}


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
