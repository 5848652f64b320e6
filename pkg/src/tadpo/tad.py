"""Teacher-advantage distillation mixed into PPO.

Each teacher sample contributes ``max(0, min(rho, 1 + eps_mu) * delta)`` where
``rho`` is the student/teacher likelihood ratio at the teacher's action and
``delta`` the teacher's Monte-Carlo return minus the student critic's value at
the iteration-start snapshot, scaled by its minibatch standard deviation.
Only the actor (and a shared encoder, if any) is updated on teacher steps.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .approximator import ActorCritic, Adam, NumericalError, PolicySpec
from .ppo import Batch, LossTerms, PpoConfig, episode_stats, make_policy, ppo_step, summarize_steps
from .rollout import TeacherBuffer, collect_rollout, minibatch_schedule, normalize_advantages
from .seeding import Streams

LOG_RATIO_CLAMP = 30.0


@dataclass(frozen=True)
class TadpoConfig:
    epsilon_mu: float = 0.5
    teacher_prob: float = 0.5
    entropy_coef: float = 0.001
    ppo: PpoConfig = field(default_factory=PpoConfig)
    teacher_minibatch_size: int | None = None  # defaults to the student minibatch size
    normalize_delta: bool = True

    def __post_init__(self):
        if self.epsilon_mu <= 0:
            raise ValueError("epsilon_mu must be positive")
        if not 0.0 <= self.teacher_prob <= 1.0:
            raise ValueError("teacher_prob must lie in [0, 1]")

    @property
    def iterations(self) -> int:
        return self.ppo.iterations

    def replace(self, **kw) -> "TadpoConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TeacherBatch:
    obs: np.ndarray  # student view of the teacher's states
    actions: np.ndarray
    logprobs: np.ndarray  # teacher log mu(a|s), stored at collection
    delta: np.ndarray  # R - V_snapshot(s), before normalization


def rho(model: ActorCritic, teacher_logprob: np.ndarray, obs: np.ndarray,
        actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Likelihood ratio pi/mu with the log-ratio clamped to +-30; also returns the clamp flags."""
    log_ratio = model.log_prob(obs, actions) - np.asarray(teacher_logprob)
    clamped = np.abs(log_ratio) >= LOG_RATIO_CLAMP
    return np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)), clamped


def delta_hat(returns: np.ndarray, value_fn: Callable[[np.ndarray], np.ndarray], obs: np.ndarray) -> np.ndarray:
    """Teacher advantage R - V(s) under the given (snapshot) critic."""
    return np.asarray(returns, dtype=np.float64) - value_fn(obs)


def tad_loss(model: ActorCritic, batch: TeacherBatch, config: TadpoConfig, with_grad: bool = False) -> LossTerms:
    """Gated teacher-advantage objective (maximized) with entropy bonus.

    The gradient w.r.t. a sample's log-prob is ``rho * delta`` when the sample
    is active (``delta > 0`` and ``rho < 1 + eps_mu``) and zero otherwise.
    """
    if len(batch.delta) == 0:
        raise ValueError("teacher minibatch is empty")
    ev = model.evaluate(batch.obs, batch.actions)
    log_ratio = ev.logp - batch.logprobs
    if not np.all(np.isfinite(log_ratio)):
        raise NumericalError(f"teacher log-ratio not finite at index {int(np.flatnonzero(~np.isfinite(log_ratio))[0])}")
    clamped = np.abs(log_ratio) >= LOG_RATIO_CLAMP
    r = np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    delta = normalize_advantages(batch.delta, "std_only") if config.normalize_delta else batch.delta
    cap = 1.0 + config.epsilon_mu
    per_sample = np.maximum(0.0, np.minimum(r, cap) * delta)
    n = r.size
    entropy = model.entropy()
    objective = float(np.mean(per_sample)) + config.entropy_coef * entropy
    active = (delta > 0.0) & (r < cap) & ~clamped
    diag = {
        "l_tad": float(np.mean(per_sample)),
        "gated_frac": float(np.mean(delta <= 0.0)),
        "clipped_frac": float(np.mean(r >= cap)),
        "mean_delta": float(np.mean(batch.delta)),
        "rho_clamped": int(clamped.sum()),
        "entropy": entropy,
    }
    grad = None
    if with_grad:
        dlogp = np.where(active, r * delta, 0.0) / n
        grad = model.backward(ev, dlogp=dlogp, dentropy=config.entropy_coef)
    return LossTerms(objective, grad, diag)


def tadpo_update(model: ActorCritic, optimizer: Adam, batch: TeacherBatch, config: TadpoConfig) -> dict:
    """One Adam step on the teacher objective with every critic parameter frozen."""
    terms = tad_loss(model, batch, config, with_grad=True)
    if not np.isfinite(terms.objective):
        raise NumericalError("teacher objective is not finite")
    optimizer.step(model.params.values, -terms.grad, frozen=model.critic_mask(),
                   max_grad_norm=config.ppo.max_grad_norm)
    return terms.diagnostics


class TeacherSampler:
    """Teacher minibatches drawn without replacement; the pool is refilled when exhausted."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("teacher buffer is empty")
        self.n, self.size, self.rng = n, min(size, n), rng
        self.reset()

    def reset(self) -> None:
        self._perm = self.rng.permutation(self.n)
        self._cursor = 0

    def draw(self) -> np.ndarray:
        if self._cursor + self.size > self.n:
            self.reset()
        idx = self._perm[self._cursor : self._cursor + self.size]
        self._cursor += self.size
        return idx


def train_tadpo(envs: Sequence, teacher_buffer: TeacherBuffer, config: TadpoConfig, seed: int,
                model: ActorCritic | None = None, spec: PolicySpec | None = None,
                on_iteration: Callable[[dict], None] | None = None) -> tuple[ActorCritic, list[dict]]:
    """Train a student with PPO steps interleaved with teacher-advantage steps.

    Within each epoch the loop runs until every student minibatch has been
    consumed; before each step a coin with probability ``teacher_prob`` picks a
    teacher step, which does not consume a student minibatch. With
    ``teacher_prob == 1`` every student slot is spent on a teacher step instead.
    All randomness comes from named streams, so ``teacher_prob == 0`` reproduces
    :func:`tadpo.ppo.train_ppo` exactly.
    """
    pc = config.ppo
    streams = Streams(seed)
    model = model if model is not None else make_policy(envs, spec, seed)
    if teacher_buffer.obs_student.shape[1] != model.spec.obs_dim:
        raise ValueError("teacher buffer student view does not match the policy input")
    optimizer = Adam(len(model.params), learning_rate=pc.learning_rate)
    sampler = TeacherSampler(len(teacher_buffer), config.teacher_minibatch_size or pc.minibatch_size,
                             streams["teacher"])
    branch = streams["branch"]
    p = config.teacher_prob
    for env in envs:
        env.reset()
    curve = []
    for it in range(pc.iterations):
        buf = collect_rollout(envs, model, pc.n_steps, streams["actions"])
        buf.finalize(pc.gamma, pc.gae_lambda)
        stats = {"iter": it} | episode_stats(buf.episodes)
        # critic snapshot for the whole iteration
        delta_all = delta_hat(teacher_buffer.returns, model.value, teacher_buffer.obs_student)
        snapshot = model.params.values.copy()
        opt_snapshot = optimizer.state_dict()
        ppo_diags, tad_diags = [], []
        try:
            for _ in range(pc.epochs):
                sampler.reset()
                for idx in minibatch_schedule(len(buf), pc.minibatch_size, streams["minibatch"]):
                    if p >= 1.0:
                        tad_diags.append(_teacher_step(model, optimizer, teacher_buffer, delta_all, sampler, config))
                        continue
                    while branch.random() <= p and p > 0.0:
                        tad_diags.append(_teacher_step(model, optimizer, teacher_buffer, delta_all, sampler, config))
                    ppo_diags.append(ppo_step(model, optimizer, Batch.from_buffer(buf, idx), pc))
        except NumericalError as exc:
            model.params.values[...] = snapshot
            optimizer.load_state_dict(opt_snapshot)
            stats["aborted"] = str(exc)
        ppo_summary = {} if "aborted" in stats else summarize_steps(ppo_diags)
        stats |= ppo_summary | {"ppo_steps": len(ppo_diags)}
        tad = {} if "aborted" in stats else summarize_steps(tad_diags)
        stats |= {
            "tad_steps": len(tad_diags),
            "gated_frac": tad.get("gated_frac"),
            "clipped_frac": tad.get("clipped_frac"),
            "mean_delta": tad.get("mean_delta"),
        }
        curve.append(stats)
        if on_iteration is not None:
            on_iteration(stats)
    return model, curve


def _teacher_step(model, optimizer, buffer: TeacherBuffer, delta_all, sampler: TeacherSampler,
                  config: TadpoConfig) -> dict:
    idx = sampler.draw()
    batch = TeacherBatch(buffer.obs_student[idx], buffer.actions[idx], buffer.logprobs[idx], delta_all[idx])
    return tadpo_update(model, optimizer, batch, config)
