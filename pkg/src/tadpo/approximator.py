"""Numpy MLPs with hand-derived gradients, diagonal Gaussian actor-critics, and Adam.

Everything runs in float64. Parameters of a model live in one flat
:class:`ParameterVector`; layers are reshaped views into it, so the optimizer,
freeze masks and checkpoints all act on a single array.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
PVEC_MAGIC = b"PVEC\x01"


class ConfigError(ValueError):
    """Raised on dimension mismatches and invalid model configuration."""


class NumericalError(ArithmeticError):
    """Raised when a loss, gradient or network output is not finite."""


# activation -> (f, f' expressed through the output y = f(x))
_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0.0).astype(np.float64)),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all MLP dimensions must be >= 1, got {dims}")
        for act in (self.activation, self.output_activation):
            if act not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


class ParameterVector:
    """A flat float64 array with a named, contiguous segment layout."""

    def __init__(self, values: np.ndarray, layout: dict[str, tuple[int, int]]):
        values = np.ascontiguousarray(values, dtype=np.float64)
        total = 0
        for name, (offset, length) in layout.items():
            if offset != total or length < 0:
                raise ConfigError(f"segment {name!r} is not contiguous with its predecessor")
            total += length
        if total != values.size:
            raise ConfigError(f"layout covers {total} entries, vector has {values.size}")
        self.values = values
        self.layout = dict(layout)

    @classmethod
    def zeros(cls, segments: Iterable[tuple[str, int]]) -> "ParameterVector":
        layout, offset = {}, 0
        for name, size in segments:
            if name in layout:
                raise ConfigError(f"duplicate segment name {name!r}")
            layout[name] = (offset, int(size))
            offset += int(size)
        return cls(np.zeros(offset), layout)

    def __len__(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        offset, length = self.layout[name]
        return self.values[offset : offset + length]

    def mask(self, prefixes: Sequence[str]) -> np.ndarray:
        """Boolean array selecting every segment whose name starts with one of ``prefixes``."""
        out = np.zeros(self.values.size, dtype=bool)
        for name, (offset, length) in self.layout.items():
            if any(name.startswith(p) for p in prefixes):
                out[offset : offset + length] = True
        return out

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def digest(self) -> str:
        return hashlib.sha256(self.values.astype("<f8").tobytes()).hexdigest()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def save(self, path: str | Path) -> None:
        """Write the ``.pvec`` format: segment-map header, then little-endian float64 values."""
        chunks = [PVEC_MAGIC, struct.pack("<q", len(self.layout))]
        for name, (offset, length) in self.layout.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<qq", offset, length))
        chunks.append(self.values.astype("<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: str | Path) -> "ParameterVector":
        data = Path(path).read_bytes()
        if not data.startswith(PVEC_MAGIC):
            raise ConfigError(f"{path}: not a .pvec file")
        pos = len(PVEC_MAGIC)
        (n_seg,) = struct.unpack_from("<q", data, pos)
        pos += 8
        layout = {}
        for _ in range(n_seg):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            offset, length = struct.unpack_from("<qq", data, pos)
            pos += 16
            layout[name] = (offset, length)
        values = np.frombuffer(data, dtype="<f8", offset=pos).astype(np.float64)
        return cls(values, layout)


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """Fully connected network whose weights are views into a ParameterVector."""

    def __init__(self, spec: MlpSpec, prefix: str):
        self.spec = spec
        self.prefix = prefix
        self._act, self._dact = _ACTIVATIONS[spec.activation]
        self._out_act, self._out_dact = _ACTIVATIONS[spec.output_activation]

    def segments(self) -> list[tuple[str, int]]:
        d = self.spec.dims
        out = []
        for i in range(len(d) - 1):
            out.append((f"{self.prefix}.{i}.w", d[i] * d[i + 1]))
            out.append((f"{self.prefix}.{i}.b", d[i + 1]))
        return out

    def layers(self, params: ParameterVector) -> list[tuple[np.ndarray, np.ndarray]]:
        d = self.spec.dims
        return [
            (params.segment(f"{self.prefix}.{i}.w").reshape(d[i], d[i + 1]),
             params.segment(f"{self.prefix}.{i}.b"))
            for i in range(len(d) - 1)
        ]

    def init(self, params: ParameterVector, rng: np.random.Generator,
             hidden_gain: float = math.sqrt(2.0), output_gain: float = 1.0) -> None:
        layers = self.layers(params)
        for i, (w, b) in enumerate(layers):
            gain = output_gain if i == len(layers) - 1 else hidden_gain
            w[...] = orthogonal(w.shape, gain, rng)
            b[...] = 0.0

    def forward(self, params: ParameterVector, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Return the output for a batch ``x`` of shape (B, input_dim) and the activations cache."""
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ConfigError(f"{self.prefix}: expected input (B, {self.spec.input_dim}), got {x.shape}")
        layers = self.layers(params)
        cache = [x]
        h = x
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            h = self._out_act(z) if i == len(layers) - 1 else self._act(z)
            cache.append(h)
        return h, cache

    def backward(self, params: ParameterVector, cache: list, grad_out: np.ndarray,
                 grad: ParameterVector) -> np.ndarray:
        """Accumulate dL/dweights into ``grad`` and return dL/dinput."""
        layers = self.layers(params)
        glayers = self.layers(grad)
        n = len(layers)
        g = grad_out * self._out_dact(cache[n])
        for i in range(n - 1, -1, -1):
            w, _ = layers[i]
            gw, gb = glayers[i]
            gw += cache[i].T @ g
            gb += g.sum(axis=0)
            g = g @ w.T
            if i > 0:
                g = g * self._dact(cache[i])
        return g


def forward(net: Mlp, params: ParameterVector, x: np.ndarray) -> np.ndarray:
    """Evaluate ``net`` on a single input vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out, _ = net.forward(params, x[None] if single else x)
    return out[0] if single else out


@dataclass(frozen=True)
class PolicySpec:
    """Architecture of a Gaussian actor-critic.

    ``shared`` lists the hidden widths of an optional trunk feeding both heads;
    ``hidden`` are the widths of each head.
    """

    obs_dim: int
    action_dim: int
    hidden: tuple[int, ...] = (128, 64, 64)
    shared: tuple[int, ...] = ()
    activation: str = "tanh"
    log_std_init: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "shared", tuple(int(h) for h in self.shared))
        if self.obs_dim < 1 or self.action_dim < 1:
            raise ConfigError("obs_dim and action_dim must be >= 1")

    def to_dict(self) -> dict:
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim, "hidden": list(self.hidden),
                "shared": list(self.shared), "activation": self.activation,
                "log_std_init": self.log_std_init}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        return cls(**{**d, "hidden": tuple(d["hidden"]), "shared": tuple(d.get("shared", ()))})


ACTOR_PREFIXES = ("encoder.", "actor.", "log_std")
CRITIC_PREFIXES = ("critic.",)


class ActorCritic:
    """Diagonal Gaussian policy with a tanh-bounded mean and a separate value head.

    The log standard deviation is one free parameter per action dimension, so
    the entropy does not depend on the observation.
    """

    def __init__(self, spec: PolicySpec, params: ParameterVector | None = None,
                 rng: np.random.Generator | None = None):
        self.spec = spec
        feat = spec.obs_dim
        self.encoder = None
        if spec.shared:
            enc = MlpSpec(spec.obs_dim, spec.shared[:-1], spec.shared[-1],
                          spec.activation, output_activation=spec.activation)
            self.encoder = Mlp(enc, "encoder")
            feat = spec.shared[-1]
        self.actor = Mlp(MlpSpec(feat, spec.hidden, spec.action_dim, spec.activation, "tanh"), "actor")
        self.critic = Mlp(MlpSpec(feat, spec.hidden, 1, spec.activation), "critic")
        segments = []
        if self.encoder is not None:
            segments += self.encoder.segments()
        segments += self.actor.segments() + [("log_std", spec.action_dim)] + self.critic.segments()
        if params is None:
            params = ParameterVector.zeros(segments)
            self._init(params, rng if rng is not None else np.random.default_rng(0))
        elif params.layout != ParameterVector.zeros(segments).layout:
            raise ConfigError("parameter layout does not match the policy spec")
        self.params = params

    def _init(self, params: ParameterVector, rng: np.random.Generator) -> None:
        if self.encoder is not None:
            self.encoder.init(params, rng, output_gain=math.sqrt(2.0))
        self.actor.init(params, rng, output_gain=0.01)
        self.critic.init(params, rng, output_gain=1.0)
        params.segment("log_std")[...] = self.spec.log_std_init

    def clone(self) -> "ActorCritic":
        return ActorCritic(self.spec, self.params.copy())

    @property
    def log_std(self) -> np.ndarray:
        return self.params.segment("log_std")

    def critic_mask(self) -> np.ndarray:
        return self.params.mask(CRITIC_PREFIXES)

    def actor_mask(self) -> np.ndarray:
        return self.params.mask(ACTOR_PREFIXES)

    # -- forward passes -------------------------------------------------

    def _features(self, obs: np.ndarray):
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.spec.obs_dim:
            raise ConfigError(f"expected observations (B, {self.spec.obs_dim}), got {obs.shape}")
        if self.encoder is None:
            return obs, None
        return self.encoder.forward(self.params, obs)

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        h, _ = self._features(obs[None] if single else obs)
        mean, _ = self.actor.forward(self.params, h)
        if not np.all(np.isfinite(mean)):
            raise NumericalError("policy mean is not finite")
        return mean[0] if single else mean

    def value(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        h, _ = self._features(obs[None] if single else obs)
        v, _ = self.critic.forward(self.params, h)
        return v[0, 0] if single else v[:, 0]

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample actions for a batch; returns (actions, log_probs, values)."""
        h, _ = self._features(obs)
        mean, _ = self.actor.forward(self.params, h)
        v, _ = self.critic.forward(self.params, h)
        if not np.all(np.isfinite(mean)):
            raise NumericalError("policy mean is not finite")
        std = np.exp(self.log_std)
        z = rng.standard_normal(mean.shape)
        actions = mean + std * z
        logp = _gauss_logp(actions, mean, self.log_std)
        return actions, logp, v[:, 0]

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        mean = self.mean_action(obs)
        return mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        mean = self.mean_action(obs[None] if single else obs)
        a = np.asarray(actions, dtype=np.float64).reshape(mean.shape)
        lp = _gauss_logp(a, mean, self.log_std)
        return lp[0] if single else lp

    def entropy(self) -> float:
        return float(np.sum(0.5 + 0.5 * LOG_2PI + self.log_std))

    # -- gradients ------------------------------------------------------

    def evaluate(self, obs: np.ndarray, actions: np.ndarray | None = None) -> "Evaluation":
        """One forward pass over a batch, keeping what :meth:`backward` needs."""
        h, enc_cache = self._features(obs)
        mean, actor_cache = self.actor.forward(self.params, h)
        value, critic_cache = self.critic.forward(self.params, h)
        if not np.all(np.isfinite(mean)):
            raise NumericalError("policy mean is not finite")
        logp = None if actions is None else _gauss_logp(actions, mean, self.log_std)
        return Evaluation(mean, value[:, 0], logp, actions, h, enc_cache, actor_cache, critic_cache)

    def backward(self, ev: "Evaluation", dlogp: np.ndarray | None = None, dvalue: np.ndarray | None = None,
                 dentropy: float = 0.0, dmean: np.ndarray | None = None,
                 dlog_std: np.ndarray | None = None) -> np.ndarray:
        """Flat gradient of a scalar given its derivatives w.r.t. the evaluated quantities.

        ``dlogp``/``dvalue`` are per-sample derivatives w.r.t. log-prob and value,
        ``dmean`` (B, action_dim) w.r.t. the policy mean, ``dlog_std`` and
        ``dentropy`` w.r.t. the log standard deviation and the entropy.
        """
        grad = ParameterVector(np.zeros(len(self.params)), self.params.layout)
        gls = grad.segment("log_std")
        gmean = None
        if dlogp is not None:
            inv_var = np.exp(-2.0 * self.log_std)
            diff = ev.actions - ev.mean
            gmean = dlogp[:, None] * diff * inv_var
            gls += (dlogp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
        if dmean is not None:
            gmean = dmean if gmean is None else gmean + dmean
        if dlog_std is not None:
            gls += dlog_std
        if dentropy:
            gls += dentropy
        gh = None
        if gmean is not None:
            gh = self.actor.backward(self.params, ev.actor_cache, gmean, grad)
        if dvalue is not None:
            g = self.critic.backward(self.params, ev.critic_cache, dvalue[:, None], grad)
            gh = g if gh is None else gh + g
        if self.encoder is not None and gh is not None:
            self.encoder.backward(self.params, ev.enc_cache, gh, grad)
        return grad.values

    def grad(self, obs: np.ndarray, actions: np.ndarray | None = None,
             dlogp: np.ndarray | None = None, dvalue: np.ndarray | None = None,
             dentropy: float = 0.0) -> np.ndarray:
        """Gradient of ``sum(dlogp*log_prob) + sum(dvalue*value) + dentropy*entropy``."""
        return self.backward(self.evaluate(obs, actions), dlogp, dvalue, dentropy)

    # -- checkpoints ----------------------------------------------------

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        """Write ``path`` (.pvec) plus a JSON sidecar with the architecture and optional metadata."""
        path = Path(path)
        self.params.save(path)
        sidecar = {"spec": self.spec.to_dict(), "meta": meta or {}}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))

    @staticmethod
    def load_meta(path: str | Path) -> dict:
        path = Path(path)
        return json.loads(path.with_suffix(path.suffix + ".json").read_text()).get("meta", {})

    @classmethod
    def load(cls, path: str | Path) -> "ActorCritic":
        path = Path(path)
        side = path.with_suffix(path.suffix + ".json")
        if not path.is_file() or not side.is_file():
            raise FileNotFoundError(f"checkpoint or its sidecar is missing: {path}")
        spec = PolicySpec.from_dict(json.loads(side.read_text())["spec"])
        return cls(spec, ParameterVector.load(path))


@dataclass
class Evaluation:
    mean: np.ndarray
    value: np.ndarray
    logp: np.ndarray | None
    actions: np.ndarray | None
    features: np.ndarray
    enc_cache: list | None
    actor_cache: list
    critic_cache: list


def _gauss_logp(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_kl(mean_p: np.ndarray, log_std_p: np.ndarray,
                mean_q: np.ndarray, log_std_q: np.ndarray) -> np.ndarray:
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    d = mean_p - mean_q
    return np.sum(log_std_q - log_std_p + (var_p + d * d) / (2.0 * var_q) - 0.5, axis=-1)


class GaussianWrapper:
    """Treats a deterministic controller as a narrow Gaussian policy.

    ``fn`` maps an observation batch to actions. Used to give scripted or MPPI
    teachers a log-density for the distillation ratio.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], action_dim: int, std: float = 0.05):
        self.fn = fn
        self.log_std = np.full(action_dim, math.log(std))

    def mean_action(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(obs), dtype=np.float64)

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mean = self.mean_action(obs)
        return _gauss_logp(np.asarray(actions, dtype=np.float64).reshape(mean.shape), mean, self.log_std)

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = self.mean_action(obs)
        return mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)

    def entropy(self) -> float:
        return float(np.sum(0.5 + 0.5 * LOG_2PI + self.log_std))


@dataclass
class Adam:
    """Adaptive-moment optimizer over a flat parameter array.

    ``step`` minimizes: parameters move against ``grad``. Coordinates selected
    by ``frozen`` are skipped entirely (values and moments untouched).
    """

    size: int
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray = field(default=None, repr=False)
    second_moment: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.first_moment is None:
            self.first_moment = np.zeros(self.size)
        if self.second_moment is None:
            self.second_moment = np.zeros(self.size)
        if self.first_moment.size != self.size or self.second_moment.size != self.size:
            raise ConfigError("moment arrays must match the parameter count")

    def step(self, params: np.ndarray, grad: np.ndarray, frozen: np.ndarray | None = None,
             max_grad_norm: float | None = None) -> None:
        if params.size != self.size or grad.size != self.size:
            raise ConfigError(f"optimizer expects {self.size} entries, got {params.size}/{grad.size}")
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient")
        g = grad if frozen is None else np.where(frozen, 0.0, grad)
        if max_grad_norm is not None:
            norm = float(np.sqrt(np.dot(g, g)))
            if norm > max_grad_norm:
                g = g * (max_grad_norm / norm)
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        m = self.beta1 * self.first_moment + (1.0 - self.beta1) * g
        v = self.beta2 * self.second_moment + (1.0 - self.beta2) * (g * g)
        update = self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
        if frozen is None:
            self.first_moment, self.second_moment = m, v
            params -= update
        else:
            live = ~frozen
            self.first_moment[live] = m[live]
            self.second_moment[live] = v[live]
            params[live] -= update[live]

    def state_dict(self) -> dict:
        return {"step_count": self.step_count, "first_moment": self.first_moment.copy(),
                "second_moment": self.second_moment.copy()}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.first_moment[...] = state["first_moment"]
        self.second_moment[...] = state["second_moment"]
