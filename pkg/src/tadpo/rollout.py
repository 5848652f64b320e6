"""Trajectory storage, discounted returns, GAE and minibatch scheduling."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEMO_MAGIC = b"TDEMO\x01"


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap_value: float,
                       gamma: float) -> np.ndarray:
    """Reward-to-go per episode segment; the bootstrap only applies if the last step is not done."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    out = np.zeros_like(rewards)
    running = float(bootstrap_value)
    for t in range(rewards.size - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, bootstrap_value: float,
        gamma: float, lam: float) -> np.ndarray:
    """Generalized advantage estimates with one-step TD residuals."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = rewards.size
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def normalize_advantages(advantages: np.ndarray, mode: str = "mean_and_std") -> np.ndarray:
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.size < 2:
        return adv.copy()
    if mode == "std_only":
        return adv / (adv.std() + 1e-8)
    if mode == "mean_and_std":
        return (adv - adv.mean()) / (adv.std() + 1e-8)
    raise ValueError(f"unknown normalization mode {mode!r}")


def minibatch_schedule(buffer_len: int, minibatch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if minibatch_size < 1:
        raise ValueError("minibatch_size must be >= 1")
    perm = rng.permutation(buffer_len)
    return [perm[i : i + minibatch_size] for i in range(0, buffer_len, minibatch_size)]


@dataclass
class Transition:
    obs_student: np.ndarray
    action: np.ndarray
    reward: float
    behavior_logprob: float
    done: bool
    episode_id: int
    obs_teacher: np.ndarray | None = None
    value_at_collect: float | None = None


@dataclass
class RolloutBuffer:
    """Student on-policy data, columnar.

    ``segments`` lists (start, stop, bootstrap_value) per environment stream;
    each stream is contiguous and its last step may be a truncation.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    episode_ids: np.ndarray
    segments: list[tuple[int, int, float]]
    episodes: list[dict] = field(default_factory=list)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    obs_teacher: np.ndarray | None = None
    annotations: np.ndarray | None = None

    def __len__(self) -> int:
        return self.rewards.size

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.obs[i], self.actions[i], float(self.rewards[i]), float(self.logprobs[i]),
                          bool(self.dones[i]), int(self.episode_ids[i]),
                          value_at_collect=float(self.values[i]))

    def finalize(self, gamma: float, lam: float) -> "RolloutBuffer":
        adv = np.zeros(len(self))
        for start, stop, boot in self.segments:
            sl = slice(start, stop)
            adv[sl] = gae(self.rewards[sl], self.values[sl], self.dones[sl], boot, gamma, lam)
        self.advantages = adv
        self.returns = adv + self.values
        return self


def collect_rollout(envs, policy, n_steps: int, rng: np.random.Generator,
                    teacher_views: bool = False, annotate=None) -> RolloutBuffer:
    """Step ``envs`` (a list of auto-resetting environments) in lockstep for ``n_steps`` in total.

    Transitions are grouped per environment in list order. Each environment
    keeps its episode across calls; call ``env.reset()`` beforehand to start fresh.
    With ``teacher_views`` the teacher observation of every visited state is stored too;
    ``annotate(env) -> array`` is called before each step and its result stored per row.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    n_env = len(envs)
    per_env = [n_steps // n_env + (1 if i < n_steps % n_env else 0) for i in range(n_env)]
    horizon = max(per_env)
    obs_dim = policy.spec.obs_dim
    act_dim = policy.spec.action_dim
    obs = np.zeros((n_env, horizon, obs_dim))
    acts = np.zeros((n_env, horizon, act_dim))
    rews = np.zeros((n_env, horizon))
    dones = np.zeros((n_env, horizon), dtype=bool)
    logps = np.zeros((n_env, horizon))
    vals = np.zeros((n_env, horizon))
    eids = np.zeros((n_env, horizon), dtype=np.int64)
    tobs = None
    notes = None
    episodes: list[dict] = []
    current = np.stack([env.current_obs() for env in envs])
    for t in range(horizon):
        a, lp, v = policy.act(current, rng)
        for i, env in enumerate(envs):
            if t >= per_env[i]:
                continue
            obs[i, t] = current[i]
            acts[i, t] = a[i]
            logps[i, t] = lp[i]
            vals[i, t] = v[i]
            eids[i, t] = env.episode_id
            if teacher_views:
                ot = env.observe("teacher")
                if tobs is None:
                    tobs = np.zeros((n_env, horizon, ot.size))
                tobs[i, t] = ot
            if annotate is not None:
                note = np.asarray(annotate(env), dtype=np.float64)
                if notes is None:
                    notes = np.zeros((n_env, horizon) + note.shape)
                notes[i, t] = note
            nxt, r, done, info = env.step(a[i])
            rews[i, t] = r
            dones[i, t] = done
            if done:
                episodes.append(info["episode"])
                nxt = env.reset()
            current[i] = nxt
    segments = []
    boot = policy.value(current)
    start = 0
    for i in range(n_env):
        segments.append((start, start + per_env[i], float(boot[i])))
        start += per_env[i]

    def cat(arr):
        return np.concatenate([arr[i, : per_env[i]] for i in range(n_env)], axis=0)

    return RolloutBuffer(cat(obs), cat(acts), cat(rews), cat(dones), cat(logps), cat(vals), cat(eids),
                         segments, episodes, obs_teacher=None if tobs is None else cat(tobs),
                         annotations=None if notes is None else cat(notes))


_DEMO_COLUMNS = ("obs_student", "obs_teacher", "actions", "rewards", "returns", "logprobs",
                 "dones", "episode_ids", "world_ids")


@dataclass
class TeacherBuffer:
    """Frozen teacher demonstrations with Monte-Carlo returns and both observation views."""

    obs_student: np.ndarray
    obs_teacher: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    logprobs: np.ndarray
    dones: np.ndarray
    episode_ids: np.ndarray
    world_ids: np.ndarray
    manifest: dict = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self):
        n = self.rewards.shape[0]
        for name in _DEMO_COLUMNS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape[0] != n:
                raise ValueError(f"column {name} has {arr.shape[0]} rows, expected {n}")
            setattr(self, name, arr)
        if not (np.all(np.isfinite(self.logprobs)) and np.all(np.isfinite(self.rewards))):
            raise ValueError("teacher log-probs and rewards must be finite")

    def __len__(self) -> int:
        return self.rewards.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.obs_student[i], self.actions[i], float(self.rewards[i]),
                          float(self.logprobs[i]), bool(self.dones[i]), int(self.episode_ids[i]),
                          obs_teacher=self.obs_teacher[i])

    def freeze(self) -> "TeacherBuffer":
        for name in _DEMO_COLUMNS:
            getattr(self, name).flags.writeable = False
        self.frozen = True
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in _DEMO_COLUMNS:
            h.update(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.obs_student.shape[1], self.obs_teacher.shape[1], self.actions.shape[1]

    def save(self, path: str | Path) -> None:
        """Columnar ``.demo`` file: magic, JSON manifest, int64 counts/dims, float64 columns."""
        manifest = json.dumps(self.manifest, sort_keys=True).encode("utf-8")
        ds, dt, da = self.dims
        parts = [DEMO_MAGIC, struct.pack("<I", len(manifest)), manifest,
                 struct.pack("<qqqq", len(self), ds, dt, da)]
        for name in _DEMO_COLUMNS:
            parts.append(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "TeacherBuffer":
        data = Path(path).read_bytes()
        if not data.startswith(DEMO_MAGIC):
            raise ValueError(f"{path}: not a .demo file")
        pos = len(DEMO_MAGIC)
        (mlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        n, ds, dt, da = struct.unpack_from("<qqqq", data, pos)
        pos += 32
        widths = {"obs_student": ds, "obs_teacher": dt, "actions": da}
        cols = {}
        for name in _DEMO_COLUMNS:
            w = widths.get(name, 1)
            arr = np.frombuffer(data, dtype="<f8", count=n * w, offset=pos).astype(np.float64)
            pos += 8 * n * w
            cols[name] = arr.reshape(n, w) if name in widths else arr
        return cls(**cols, manifest=manifest).freeze()

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                row = {name: getattr(self, name)[i].tolist() for name in _DEMO_COLUMNS}
                fh.write(json.dumps(row) + "\n")


def concat_teacher_buffers(buffers: Sequence[TeacherBuffer], manifest: dict | None = None) -> TeacherBuffer:
    cols = {name: np.concatenate([getattr(b, name) for b in buffers]) for name in _DEMO_COLUMNS}
    return TeacherBuffer(**cols, manifest=manifest or {})
