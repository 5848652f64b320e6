"""Clipped-surrogate PPO with analytic gradients.

The objective is maximized: ``L_clip - vf_coef * L_vf + entropy_coef * H``.
Adam minimizes, so steps are taken on the negated gradient.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .approximator import ActorCritic, Adam, NumericalError, PolicySpec
from .rollout import RolloutBuffer, collect_rollout, minibatch_schedule, normalize_advantages
from .seeding import Streams


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    vf_coef: float = 0.5
    entropy_coef: float = 0.001
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 20
    minibatch_size: int = 256
    n_steps: int = 2048
    learning_rate: float = 3e-4
    max_grad_norm: float | None = None
    normalize_advantages: bool = True
    iterations: int = 50

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if min(self.epochs, self.minibatch_size, self.n_steps) < 1 or self.iterations < 0:
            raise ValueError("epochs, minibatch_size and n_steps must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def replace(self, **kw) -> "PpoConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class Batch:
    """Student minibatch: observations, actions, behavior log-probs, advantages, returns."""

    obs: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    obs_teacher: np.ndarray | None = None
    teacher_mean: np.ndarray | None = None

    @classmethod
    def from_buffer(cls, buf: RolloutBuffer, idx: np.ndarray) -> "Batch":
        ot = None if buf.obs_teacher is None else buf.obs_teacher[idx]
        tm = None if buf.annotations is None else buf.annotations[idx]
        return cls(buf.obs[idx], buf.actions[idx], buf.logprobs[idx], buf.advantages[idx],
                   buf.returns[idx], ot, tm)


@dataclass
class LossTerms:
    objective: float
    grad: np.ndarray | None
    diagnostics: dict


def _ppo_pieces(model: ActorCritic, batch: Batch, config: PpoConfig):
    ev = model.evaluate(batch.obs, batch.actions)
    log_ratio = ev.logp - batch.logprobs
    ratio = np.exp(log_ratio)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise NumericalError(f"importance ratio not finite at minibatch index {int(bad[0])}")
    adv = batch.advantages
    if config.normalize_advantages:
        adv = normalize_advantages(adv, "mean_and_std")
    eps = config.clip_epsilon
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    unclipped = surr1 <= surr2
    n = ratio.size
    l_clip = float(np.mean(np.where(unclipped, surr1, surr2)))
    verr = ev.value - batch.returns
    l_vf = float(np.mean(verr * verr))
    entropy = model.entropy()
    objective = l_clip - config.vf_coef * l_vf + config.entropy_coef * entropy
    diag = {
        "l_clip": l_clip,
        "l_vf": l_vf,
        "entropy": entropy,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "approx_kl": float(np.mean(ratio - 1.0 - log_ratio)),
    }
    dlogp = np.where(unclipped, surr1, 0.0) / n
    dvalue = -config.vf_coef * 2.0 * verr / n
    return ev, objective, diag, dlogp, dvalue


def ppo_loss(model: ActorCritic, batch: Batch, config: PpoConfig, with_grad: bool = False) -> LossTerms:
    """PPO objective on one minibatch (to be maximized), its diagnostics and optionally its gradient."""
    ev, objective, diag, dlogp, dvalue = _ppo_pieces(model, batch, config)
    grad = model.backward(ev, dlogp, dvalue, config.entropy_coef) if with_grad else None
    return LossTerms(objective, grad, diag)


def ppo_step(model: ActorCritic, optimizer: Adam, batch: Batch, config: PpoConfig,
             frozen: np.ndarray | None = None) -> dict:
    terms = ppo_loss(model, batch, config, with_grad=True)
    if not np.isfinite(terms.objective):
        raise NumericalError("PPO objective is not finite")
    optimizer.step(model.params.values, -terms.grad, frozen=frozen, max_grad_norm=config.max_grad_norm)
    return terms.diagnostics


def ppo_update(model: ActorCritic, optimizer: Adam, buffer: RolloutBuffer, config: PpoConfig,
               rng: np.random.Generator, frozen: np.ndarray | None = None) -> dict:
    """``epochs`` passes over ``buffer`` in shuffled minibatches.

    On a non-finite loss the parameters and optimizer are rolled back to their
    pre-update state and the update is reported as aborted.
    """
    snapshot = model.params.values.copy()
    opt_snapshot = optimizer.state_dict()
    diags: list[dict] = []
    try:
        for _ in range(config.epochs):
            for idx in minibatch_schedule(len(buffer), config.minibatch_size, rng):
                diags.append(ppo_step(model, optimizer, Batch.from_buffer(buffer, idx), config, frozen))
    except NumericalError as exc:
        model.params.values[...] = snapshot
        optimizer.load_state_dict(opt_snapshot)
        return {"aborted": str(exc), "ppo_steps": len(diags)}
    return summarize_steps(diags) | {"ppo_steps": len(diags)}


def summarize_steps(diags: Sequence[dict]) -> dict:
    if not diags:
        return {}
    return {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}


def episode_stats(eps: Sequence[dict]) -> dict:
    """Mean return and navigation metrics over the episodes completed during a rollout."""
    if not eps:
        return {"episodes": 0, "mean_return": None, "sr": None, "cp": None, "ms": None}
    return {
        "episodes": len(eps),
        "mean_return": float(np.mean([e["return"] for e in eps])),
        "sr": float(np.mean([e["sr"] for e in eps])),
        "cp": float(np.mean([e["cp"] for e in eps])),
        "ms": float(np.mean([e["ms"] for e in eps])),
    }


def make_policy(envs, spec: PolicySpec | None, seed: int) -> ActorCritic:
    if spec is None:
        spec = PolicySpec(obs_dim=envs[0].obs_dim, action_dim=envs[0].action_dim)
    return ActorCritic(spec, rng=Streams(seed)["init"])


def train_ppo(envs: Sequence, config: PpoConfig, seed: int, model: ActorCritic | None = None,
              spec: PolicySpec | None = None,
              on_iteration: Callable[[dict], None] | None = None,
              rollout_kwargs: dict | None = None) -> tuple[ActorCritic, list[dict]]:
    """Train a policy with PPO on a list of environments; returns the model and its learning curve."""
    streams = Streams(seed)
    model = model if model is not None else make_policy(envs, spec, seed)
    optimizer = Adam(len(model.params), learning_rate=config.learning_rate)
    for i, env in enumerate(envs):
        env.reset()
    curve = []
    for it in range(config.iterations):
        buf = collect_rollout(envs, model, config.n_steps, streams["actions"], **(rollout_kwargs or {}))
        buf.finalize(config.gamma, config.gae_lambda)
        stats = {"iter": it} | episode_stats(buf.episodes)
        stats |= ppo_update(model, optimizer, buf, config, streams["minibatch"])
        curve.append(stats)
        if on_iteration is not None:
            on_iteration(stats)
    return model, curve
