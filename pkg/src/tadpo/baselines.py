"""Comparison methods (DAgger, PPO with a behavior-cloning KL term) and shared evaluation."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .approximator import ActorCritic, Adam, NumericalError, PolicySpec, gaussian_kl
from .ppo import Batch, LossTerms, PpoConfig, _ppo_pieces, episode_stats, make_policy, summarize_steps
from .rollout import collect_rollout, minibatch_schedule
from .seeding import Streams
from .worlds import EnvConfig, NavEnv, WorldSpec

# -- DAgger -----------------------------------------------------------------


@dataclass(frozen=True)
class DaggerConfig:
    rounds: int = 10
    steps_per_round: int = 2048
    beta_decay: float = 0.5  # beta_k = beta_decay ** k
    epochs: int = 10
    minibatch_size: int = 256
    learning_rate: float = 3e-4

    def beta(self, k: int) -> float:
        return self.beta_decay ** k

    def replace(self, **kw) -> "DaggerConfig":
        return dataclasses.replace(self, **kw)


def bc_loss(model: ActorCritic, obs: np.ndarray, actions: np.ndarray, with_grad: bool = False) -> LossTerms:
    """Mean log-likelihood of teacher labels under the student (maximized)."""
    ev = model.evaluate(obs, actions)
    n = obs.shape[0]
    obj = float(np.mean(ev.logp))
    grad = model.backward(ev, dlogp=np.full(n, 1.0 / n)) if with_grad else None
    return LossTerms(obj, grad, {"log_likelihood": obj})


def train_dagger(envs: Sequence[NavEnv], teacher, config: DaggerConfig, seed: int,
                 model: ActorCritic | None = None, spec: PolicySpec | None = None,
                 on_iteration: Callable[[dict], None] | None = None) -> tuple[ActorCritic, list[dict]]:
    """Dataset aggregation: roll out a beta-mixture of teacher and student, label every state with the teacher.

    The executed action is the teacher's with probability ``beta_k`` and the
    student's mean otherwise; labels are always the teacher's mode at the
    visited state. The aggregated dataset grows by ``steps_per_round`` per round.
    """
    streams = Streams(seed)
    model = model if model is not None else make_policy(envs, spec, seed)
    optimizer = Adam(len(model.params), learning_rate=config.learning_rate)
    mix = streams["mixture"]
    data_obs: list[np.ndarray] = []
    data_act: list[np.ndarray] = []
    for env in envs:
        env.reset()
        teacher.reset(env)
    curve = []
    for k in range(config.rounds):
        beta = config.beta(k)
        episodes: list[dict] = []
        steps = 0
        while steps < config.steps_per_round:
            for env in envs:
                if steps >= config.steps_per_round:
                    break
                obs = env.current_obs()
                label = teacher.mode(env)
                action = label if mix.random() < beta else model.mean_action(obs)
                data_obs.append(obs.copy())
                data_act.append(np.asarray(label, dtype=np.float64))
                _, _, done, info = env.step(action)
                steps += 1
                if done:
                    episodes.append(info["episode"])
                    env.reset()
                    teacher.reset(env)
        obs_all = np.array(data_obs)
        act_all = np.array(data_act)
        diags = []
        for _ in range(config.epochs):
            for idx in minibatch_schedule(len(obs_all), config.minibatch_size, streams["minibatch"]):
                terms = bc_loss(model, obs_all[idx], act_all[idx], with_grad=True)
                if not np.isfinite(terms.objective):
                    raise NumericalError("behavior-cloning loss is not finite")
                optimizer.step(model.params.values, -terms.grad)
                diags.append(terms.diagnostics)
        stats = {"iter": k, "beta": beta, "dataset_size": len(obs_all)}
        stats |= episode_stats(episodes) | summarize_steps(diags)
        curve.append(stats)
        if on_iteration is not None:
            on_iteration(stats)
    return model, curve


# -- PPO + behavior-cloning KL ------------------------------------------------


@dataclass(frozen=True)
class PpoBcConfig:
    ppo: PpoConfig = field(default_factory=PpoConfig)
    bc_coef: float = 0.1

    def replace(self, **kw) -> "PpoBcConfig":
        return dataclasses.replace(self, **kw)


def ppo_bc_loss(model: ActorCritic, teacher, batch: Batch, config: PpoBcConfig,
                with_grad: bool = False) -> LossTerms:
    """PPO objective minus ``bc_coef * KL(pi(.|s_pi) || mu(.|s_mu))`` averaged over the minibatch.

    The teacher mean is ``batch.teacher_mean`` when recorded during the rollout
    (controller teachers), otherwise ``teacher.distribution(batch.obs_teacher)``.
    """
    ev, objective, diag, dlogp, dvalue = _ppo_pieces(model, batch, config.ppo)
    beta = config.bc_coef
    dmean = dlog_std = None
    if beta != 0.0:
        if batch.teacher_mean is not None:
            mean_mu, log_std_mu = batch.teacher_mean, teacher.log_std
        elif batch.obs_teacher is not None:
            mean_mu, log_std_mu = teacher.distribution(batch.obs_teacher)
        else:
            raise ValueError("PPO+BC needs teacher observations or teacher actions in the rollout")
        log_std_pi = np.broadcast_to(model.log_std, ev.mean.shape)
        log_std_mu = np.broadcast_to(log_std_mu, ev.mean.shape)
        kl = gaussian_kl(ev.mean, log_std_pi, mean_mu, log_std_mu)
        n = kl.size
        objective -= beta * float(np.mean(kl))
        diag["kl"] = float(np.mean(kl))
        inv_var_mu = np.exp(-2.0 * log_std_mu)
        dmean = -beta * (ev.mean - mean_mu) * inv_var_mu / n
        dlog_std = -beta * np.sum(np.exp(2.0 * log_std_pi) * inv_var_mu - 1.0, axis=0) / n
    else:
        diag["kl"] = 0.0
    grad = None
    if with_grad:
        grad = model.backward(ev, dlogp, dvalue, config.ppo.entropy_coef, dmean=dmean, dlog_std=dlog_std)
    return LossTerms(objective, grad, diag)


def train_ppo_bc(envs: Sequence[NavEnv], teacher, config: PpoBcConfig, seed: int,
                 model: ActorCritic | None = None, spec: PolicySpec | None = None,
                 on_iteration: Callable[[dict], None] | None = None) -> tuple[ActorCritic, list[dict]]:
    """PPO on the student's own rollouts, regularized toward a teacher policy's distribution."""
    pc = config.ppo
    streams = Streams(seed)
    model = model if model is not None else make_policy(envs, spec, seed)
    optimizer = Adam(len(model.params), learning_rate=pc.learning_rate)
    for env in envs:
        env.reset()
    curve = []
    for it in range(pc.iterations):
        need = config.bc_coef != 0.0
        policy_teacher = hasattr(teacher, "distribution")
        buf = collect_rollout(envs, model, pc.n_steps, streams["actions"], teacher_views=need and policy_teacher,
                              annotate=teacher.mode if need and not policy_teacher else None)
        buf.finalize(pc.gamma, pc.gae_lambda)
        stats = {"iter": it} | episode_stats(buf.episodes)
        snapshot = model.params.values.copy()
        opt_snapshot = optimizer.state_dict()
        diags = []
        try:
            for _ in range(pc.epochs):
                for idx in minibatch_schedule(len(buf), pc.minibatch_size, streams["minibatch"]):
                    terms = ppo_bc_loss(model, teacher, Batch.from_buffer(buf, idx), config, with_grad=True)
                    if not np.isfinite(terms.objective):
                        raise NumericalError("PPO+BC objective is not finite")
                    optimizer.step(model.params.values, -terms.grad, max_grad_norm=pc.max_grad_norm)
                    diags.append(terms.diagnostics)
        except NumericalError as exc:
            model.params.values[...] = snapshot
            optimizer.load_state_dict(opt_snapshot)
            stats["aborted"] = str(exc)
            diags = []
        stats |= summarize_steps(diags) | {"ppo_steps": len(diags)}
        curve.append(stats)
        if on_iteration is not None:
            on_iteration(stats)
    return model, curve


# -- evaluation ---------------------------------------------------------------


def evaluate_actor(act: Callable[[NavEnv], np.ndarray], worlds: Sequence[WorldSpec], env_config: EnvConfig,
                   episodes_per_world: int = 1, view: str = "student",
                   reset: Callable[[NavEnv], None] | None = None) -> dict:
    """Run ``act(env) -> action`` on every world; returns per-episode rows and aggregates."""
    env = NavEnv(worlds, env_config, view=view, reward_chain="sparse")
    rows = []
    for wi, world in enumerate(worlds):
        for ep in range(episodes_per_world):
            env.reset(world_index=wi)
            if reset is not None:
                reset(env)
            done, info = False, {}
            while not done:
                _, _, done, info = env.step(act(env))
            rows.append({"world": wi, "world_seed": world.seed, "episode": ep} | info["episode"])
    return {"episodes": rows} | aggregate(rows)


def aggregate(rows: Sequence[dict]) -> dict:
    if not rows:
        return {"sr": float("nan"), "cp": float("nan"), "ms": float("nan"), "n": 0}
    return {k: float(np.mean([r[k] for r in rows])) for k in ("sr", "cp", "ms")} | {"n": len(rows)}


def evaluate_policy(policy: ActorCritic, worlds: Sequence[WorldSpec], env_config: EnvConfig = EnvConfig(),
                    episodes_per_world: int = 1, view: str = "student") -> dict:
    """Deterministic (mean-action) evaluation of a Gaussian policy."""
    return evaluate_actor(lambda env: policy.mean_action(env.current_obs()), worlds, env_config,
                          episodes_per_world, view)


def evaluate_teacher(teacher, worlds: Sequence[WorldSpec], env_config: EnvConfig = EnvConfig(),
                     episodes_per_world: int = 1) -> dict:
    return evaluate_actor(teacher.mode, worlds, env_config, episodes_per_world, view="teacher",
                          reset=teacher.reset)


REPORT_COLUMNS = ("method", "world_family", "seed", "sr", "cp", "ms")


def write_report(path: str | Path, rows: Sequence[dict]) -> None:
    """CSV with one row per (method, world family, seed)."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({"method": r["method"], "world_family": r["world_family"], "seed": int(r["seed"]),
                        "sr": float(r["sr"]), "cp": float(r["cp"]), "ms": float(r["ms"])})
        return out
