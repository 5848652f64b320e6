"""Waypoint planners and teachers: sparse chains, MPPI, dense plans, pure pursuit, demonstrations."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .rollout import TeacherBuffer, concat_teacher_buffers, discounted_returns
from .worlds import (EnvConfig, NavEnv, Polyline, VehicleParams, VehicleState, WorldGeometry, WorldSpec,
                     kinematics, segment_disc_clearance, speed_cap_at, step)

log = logging.getLogger(__name__)


class PlanningError(RuntimeError):
    pass


class DemoCollectionError(RuntimeError):
    pass


def sparse_points(route, spacing: float) -> np.ndarray:
    """Points every ``spacing`` along a coarse route, starting at its first vertex and ending at the goal."""
    pts = np.asarray(route, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 1 or np.allclose(pts, pts[0]):
        return pts[:1].copy()
    return Polyline(pts).resample(spacing)


def sparse_waypoints(world: WorldSpec, spacing: float = 20.0) -> np.ndarray:
    """Obstacle-unaware waypoints along the world's coarse route."""
    return sparse_points(world.route, spacing)


# -- MPPI -------------------------------------------------------------------


@dataclass(frozen=True)
class MppiConfig:
    horizon: int = 60
    n_samples: int = 256
    temperature: float = 20.0
    control_noise_std: tuple[float, float] = (0.5, 0.5)
    noise_smoothing: float = 0.8  # AR(1) coefficient of the sampled perturbations along the horizon
    n_primitives: int = 24  # samples replaced by deterministic swerve-and-return sequences
    dt: float = 0.1
    v_target: float = 5.0
    w_lateral: float = 0.02
    w_obstacle: float = 3.0
    w_speed: float = 0.5
    w_control: float = 0.01
    w_progress: float = 20.0  # reward per unit of arclength gained along the reference over the horizon
    min_clearance: float = 0.05  # inverse-clearance penalty is clamped at 1/min_clearance
    max_samples_x_horizon: int | None = None

    def __post_init__(self):
        if self.horizon < 1 or self.n_samples < 1:
            raise ValueError("horizon and n_samples must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_samples_x_horizon is not None and self.horizon * self.n_samples > self.max_samples_x_horizon:
            raise ValueError(f"N*h = {self.horizon * self.n_samples} exceeds the budget "
                             f"{self.max_samples_x_horizon}")

    @property
    def budget(self) -> int:
        return self.horizon * self.n_samples


def generous_mppi() -> MppiConfig:
    return MppiConfig()


def realtime_mppi(base: MppiConfig | None = None, fraction: int = 16) -> MppiConfig:
    """Budget-capped MPPI with N*h <= base budget / ``fraction``; horizon and samples shrink alike."""
    base = base or generous_mppi()
    cap = base.budget // fraction
    scale = math.sqrt(1.0 / fraction)
    h = max(1, int(round(base.horizon * scale)))
    n = max(1, cap // h)
    return replace(base, horizon=h, n_samples=n, max_samples_x_horizon=cap)


def mppi_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Normalized exp(-cost / temperature); infinite costs get zero weight."""
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise PlanningError("all sampled control sequences have infinite cost")
    shifted = np.where(finite, costs - costs[finite].min(), np.inf)
    w = np.exp(-shifted / temperature)
    return w / w.sum()


def rollout_costs(state: VehicleState, controls: np.ndarray, reference: Polyline, geom: WorldGeometry,
                  config: MppiConfig, vehicle: VehicleParams = VehicleParams()) -> np.ndarray:
    """Cost of each control sequence in ``controls`` (N, h, 2) rolled out from ``state``.

    Collisions and leaving the bounds make a sequence's cost infinite.
    """
    n, horizon, _ = controls.shape
    x = np.full(n, state.x)
    y = np.full(n, state.y)
    h = np.full(n, state.heading)
    v = np.full(n, state.speed)
    xs = np.empty((n, horizon))
    ys = np.empty((n, horizon))
    vs = np.empty((n, horizon))
    has_zones = len(geom.zones) > 0
    for k in range(horizon):
        cap = speed_cap_at(x, y, geom.zones) if has_zones else 1.0
        x, y, h, v, _, _ = kinematics(x, y, h, v, controls[:, k, 0], controls[:, k, 1], config.dt, vehicle, cap)
        xs[:, k], ys[:, k], vs[:, k] = x, y, v
    pts = np.stack([xs, ys], axis=-1)
    s, lat = reference.project_many(pts)
    cost = config.w_lateral * np.sum(lat * lat, axis=1)
    cost += config.w_speed * np.sum((vs - config.v_target) ** 2, axis=1)
    cost += config.w_control * np.sum(controls * controls, axis=(1, 2))
    s0, _ = reference.project(state.x, state.y)
    cost -= config.w_progress * (s[:, -1] - s0)
    xmin, ymin, xmax, ymax = geom.bounds
    hit = np.any((xs < xmin) | (xs > xmax) | (ys < ymin) | (ys > ymax), axis=1)
    obs = geom.obstacles
    if len(obs):
        # discs beyond the sampled extent plus a margin add a nearly equal small term to every
        # sample, which the softmax weights ignore, so they are skipped
        margin = 10.0
        near = ((obs[:, 0] + obs[:, 2] > xs.min() - margin) & (obs[:, 0] - obs[:, 2] < xs.max() + margin)
                & (obs[:, 1] + obs[:, 2] > ys.min() - margin) & (obs[:, 1] - obs[:, 2] < ys.max() + margin))
        obs = obs[near].astype(np.float32)
    if len(obs):
        # planning-only geometry in float32; the environment's own collision test stays float64
        xf, yf = xs.astype(np.float32)[..., None], ys.astype(np.float32)[..., None]
        clr = np.sqrt((xf - obs[:, 0]) ** 2 + (yf - obs[:, 1]) ** 2) - obs[:, 2]
        clr = clr.min(axis=-1).astype(np.float64) - vehicle.radius
        hit |= np.any(clr <= 0.0, axis=1)
        cost += config.w_obstacle * np.sum(np.minimum(1.0 / np.maximum(clr, 1e-12), 1.0 / config.min_clearance), axis=1)
    cost[hit] = np.inf
    return cost


def swerve_primitives(horizon: int, count: int) -> np.ndarray:
    """Up to ``count`` sequences that steer one way, then back, at fixed throttle."""
    out = []
    levels = (1.0, -1.0, 0.6, -0.6, 0.3, -0.3)
    for k in (max(1, horizon // 4), max(1, horizon // 2 - 2)):
        for throttle in (0.6, 0.0):
            for steer in levels:
                u = np.zeros((horizon, 2))
                u[:, 0] = throttle
                u[:k, 1] = steer
                u[k : 2 * k, 1] = -steer
                out.append(u)
    return np.array(out[:count]).reshape(-1, horizon, 2)


class MppiController:
    """Sampling-based receding-horizon controller with a warm-started nominal sequence."""

    def __init__(self, config: MppiConfig, vehicle: VehicleParams = VehicleParams(),
                 rng: np.random.Generator | None = None):
        self.config = config
        self.vehicle = vehicle
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.nominal = np.zeros((config.horizon, 2))
        self.last_info: dict = {}
        self._extended: tuple[int, Polyline] | None = None

    def _cost_reference(self, reference: Polyline) -> Polyline:
        # run the reference on past its end so the goal is driven through, not orbited
        if self._extended is None or self._extended[0] != id(reference):
            pts = reference.points
            d = pts[-1] - pts[-2]
            n = np.hypot(*d)
            if n > 1e-9:
                pts = np.vstack([pts, pts[-1] + d / n * self.config.horizon * self.config.dt * self.vehicle.v_max])
            self._extended = (id(reference), Polyline(pts))
        return self._extended[1]

    def reset(self) -> None:
        self.nominal = np.zeros((self.config.horizon, 2))

    def control(self, state: VehicleState, reference: Polyline, geom: WorldGeometry) -> np.ndarray:
        cfg = self.config
        std = np.asarray(cfg.control_noise_std, dtype=np.float64)
        noise = self.rng.standard_normal((cfg.n_samples, cfg.horizon, 2))
        a = cfg.noise_smoothing
        if a > 0.0:
            scale = math.sqrt(1.0 - a * a)
            for k in range(1, cfg.horizon):
                noise[:, k] = a * noise[:, k - 1] + scale * noise[:, k]
        noise *= std
        noise[0] = 0.0  # keep the warm start itself among the candidates
        samples = np.clip(self.nominal[None] + noise, -1.0, 1.0)
        prims = swerve_primitives(cfg.horizon, cfg.n_primitives)
        if len(prims):
            samples[-len(prims):] = prims[: cfg.n_samples - 1]
        costs = rollout_costs(state, samples, self._cost_reference(reference), geom, cfg, self.vehicle)
        if not np.isfinite(costs).any():
            self.nominal = np.concatenate([self.nominal[1:], self.nominal[-1:]])
            self.last_info = {"fallback": True, "min_cost": math.inf}
            return np.zeros(2)
        w = mppi_weights(costs, cfg.temperature)
        seq = np.tensordot(w, samples, axes=1)
        self.nominal = np.concatenate([seq[1:], seq[-1:]])
        self.last_info = {"fallback": False, "min_cost": float(np.min(costs)), "weights": w}
        return seq[0].copy()


def mppi_control(state: VehicleState, reference: Polyline, geom: WorldGeometry, config: MppiConfig,
                 rng: np.random.Generator, controller: MppiController | None = None) -> np.ndarray:
    """One MPPI step; pass ``controller`` to keep the warm start between calls."""
    controller = controller or MppiController(config, rng=rng)
    return controller.control(state, reference, geom)


# -- dense plans ------------------------------------------------------------


@dataclass
class DensePlan:
    waypoints: np.ndarray
    driven: np.ndarray


def drive_closed_loop(world: WorldSpec, controller, env_config: EnvConfig = EnvConfig(),
                      max_steps: int | None = None, reference: Polyline | None = None,
                      stall_steps: int | None = None):
    """Run ``controller.control`` from the world start; returns (states, success, collided).

    With ``stall_steps`` the run stops early once that many steps pass without
    a new closest approach to the goal along the sparse chain.
    """
    geom = WorldGeometry(world)
    ref = reference if reference is not None else geom.sparse
    x, y, h = world.start
    state = VehicleState(x, y, h)
    states = [state]
    best, best_step = math.inf, 0
    for t in range(max_steps or env_config.max_steps):
        if stall_steps is not None:
            d = geom.goal_distance_along(geom.sparse, state.x, state.y)
            if d < best - 0.1:
                best, best_step = d, t
            elif t - best_step >= stall_steps:
                break
        a = controller.control(state, ref, geom)
        cap = float(speed_cap_at(state.x, state.y, geom.zones))
        state = step(state, a, env_config.dt, env_config.vehicle, cap)
        states.append(state)
        if geom.collided(state.x, state.y, env_config.vehicle.radius):
            return states, False, True
        if math.hypot(state.x - world.goal[0], state.y - world.goal[1]) <= world.goal_radius:
            return states, True, False
    return states, False, False


def _resample_plan(driven: np.ndarray, goal: np.ndarray, spacing: float) -> np.ndarray:
    path = np.vstack([driven, goal[None]])
    keep = np.concatenate([[True], np.hypot(*np.diff(path, axis=0).T) > 1e-12])
    line = Polyline(path[keep])
    pts = line.resample(spacing)
    if len(pts) > 2 and np.hypot(*(pts[-1] - pts[-2])) < 0.5 * spacing:
        pts = np.vstack([pts[:-2], pts[-1:]])
    return pts


def validate_plan(waypoints: np.ndarray, geom: WorldGeometry, radius: float) -> int | None:
    """Index of the first segment whose clearance is <= ``radius``, or None if the plan is clear."""
    for i in range(len(waypoints) - 1):
        clr = segment_disc_clearance(waypoints[i], waypoints[i + 1], geom.obstacles)
        if len(clr) and clr.min() <= radius:
            return i
    return None


def densify(world: WorldSpec, config: MppiConfig | None = None, env_config: EnvConfig = EnvConfig(),
            d_dense: float = 2.0, seed: int = 0) -> DensePlan:
    """Drive MPPI along the sparse chain and resample the driven path every ``d_dense``."""
    config = config or generous_mppi()
    geom = WorldGeometry(world)
    failure = ""
    for n_samples in (config.n_samples, 2 * config.n_samples):
        cfg = replace(config, n_samples=n_samples, max_samples_x_horizon=None)
        ctrl = MppiController(cfg, env_config.vehicle, np.random.default_rng([seed, n_samples]))
        states, success, collided = drive_closed_loop(world, ctrl, env_config, max_steps=2 * env_config.max_steps,
                                                      stall_steps=80)
        if not success:
            last = states[-1]
            failure = f"MPPI {'collided' if collided else 'timed out'} near ({last.x:.2f}, {last.y:.2f})"
            continue
        driven = np.array([[s.x, s.y] for s in states])
        pts = _resample_plan(driven, geom.goal, d_dense)
        bad = validate_plan(pts, geom, env_config.vehicle.radius)
        if bad is None:
            return DensePlan(pts, driven)
        failure = f"dense segment {bad} {pts[bad].round(2).tolist()}->{pts[bad + 1].round(2).tolist()} too close"
    raise PlanningError(f"densify failed for world seed {world.seed}: {failure}")


# -- pure pursuit -----------------------------------------------------------


def pure_pursuit_curvature(state: VehicleState, target: np.ndarray) -> float:
    dx, dy = target[0] - state.x, target[1] - state.y
    c, s = math.cos(state.heading), math.sin(state.heading)
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    d2 = lx * lx + ly * ly
    return 0.0 if d2 == 0.0 else 2.0 * ly / d2


def pure_pursuit(state: VehicleState, reference, lookahead: float, v_target: float = 5.0,
                 vehicle: VehicleParams = VehicleParams(), speed_gain: float = 1.0) -> np.ndarray:
    """(throttle, steering) chasing the point ``lookahead`` ahead of the projection onto ``reference``."""
    if lookahead <= 0:
        raise ValueError("lookahead must be positive")
    if reference is None or (not isinstance(reference, Polyline) and len(reference) == 0):
        return np.zeros(2)
    line = reference if isinstance(reference, Polyline) else Polyline(reference)
    s, _ = line.project(state.x, state.y)
    target = line.point_at(s + lookahead)
    kappa = pure_pursuit_curvature(state, target)
    steering = math.atan(kappa * vehicle.wheelbase) / vehicle.max_steer
    throttle = speed_gain * (v_target - state.speed)
    return np.clip(np.array([throttle, steering]), -1.0, 1.0)


class PurePursuitController:
    def __init__(self, lookahead: float = 4.0, v_target: float = 5.0, vehicle: VehicleParams = VehicleParams()):
        self.lookahead, self.v_target, self.vehicle = lookahead, v_target, vehicle

    def reset(self) -> None:
        pass

    def control(self, state: VehicleState, reference: Polyline, geom: WorldGeometry) -> np.ndarray:
        return pure_pursuit(state, reference, self.lookahead, self.v_target, self.vehicle)


# -- teachers ---------------------------------------------------------------

LOG_2PI = math.log(2.0 * math.pi)


def _narrow_logp(action: np.ndarray, mean: np.ndarray, std: float) -> float:
    z = (action - mean) / std
    return float(np.sum(-0.5 * z * z - math.log(std) - 0.5 * LOG_2PI))


class PolicyTeacher:
    """A trained Gaussian policy acting on the teacher (dense-plan) view."""

    kind = "ppo"

    def __init__(self, policy, stochastic: bool = True):
        self.policy = policy
        self.stochastic = stochastic

    def reset(self, env: NavEnv) -> None:
        pass

    def act(self, env: NavEnv, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        obs = env.observe("teacher")
        a = self.policy.sample(obs, rng) if self.stochastic else self.policy.mean_action(obs)
        return a, float(self.policy.log_prob(obs, a))

    def mode(self, env: NavEnv) -> np.ndarray:
        return self.policy.mean_action(env.observe("teacher"))

    def log_prob(self, obs_teacher: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.policy.log_prob(obs_teacher, actions)

    def distribution(self, obs_teacher: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.policy.mean_action(obs_teacher), np.asarray(self.policy.log_std)

    @property
    def log_std(self) -> np.ndarray:
        return np.asarray(self.policy.log_std).copy()


class ControllerTeacher:
    """A deterministic controller (MPPI or pure pursuit) wrapped as a narrow Gaussian.

    The density is centered on the controller output at collection time, so
    it cannot be re-evaluated from the teacher observation alone.
    """

    def __init__(self, controller, kind: str, std: float = 0.05, reference: str = "sparse"):
        self.controller = controller
        self.kind = kind
        self.std = std
        self.reference = reference

    def reset(self, env: NavEnv) -> None:
        self.controller.reset()

    def mode(self, env: NavEnv) -> np.ndarray:
        geom = env.geom
        return np.asarray(self.controller.control(env.state, geom.chain(self.reference), geom), dtype=np.float64)

    @property
    def log_std(self) -> np.ndarray:
        return np.full(2, math.log(self.std))

    def act(self, env: NavEnv, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        mean = self.mode(env)
        a = mean + self.std * rng.standard_normal(mean.shape)
        return a, _narrow_logp(a, mean, self.std)


def mppi_teacher(config: MppiConfig | None = None, seed: int = 0, std: float = 0.05) -> ControllerTeacher:
    return ControllerTeacher(MppiController(config or generous_mppi(), rng=np.random.default_rng(seed)),
                             "mppi", std)


def pure_pursuit_teacher(lookahead: float = 4.0, std: float = 0.05) -> ControllerTeacher:
    return ControllerTeacher(PurePursuitController(lookahead), "pure_pursuit", std, reference="dense")


@dataclass(frozen=True)
class DemoConfig:
    episodes_per_world: int = 1
    max_transitions: int | None = 100_000
    gamma: float = 0.99
    min_success_rate: float = 0.5


def collect_demonstrations(worlds: Sequence[WorldSpec], teacher, config: DemoConfig = DemoConfig(),
                           env_config: EnvConfig = EnvConfig(), seed: int = 0) -> TeacherBuffer:
    """Roll the teacher out on each world and keep the successful episodes, frozen.

    Rewards are the task reward along the sparse chain so that returns are
    comparable with the student's critic.
    """
    env = NavEnv(worlds, env_config, view="teacher", reward_chain="sparse", seed=seed)
    rng = np.random.default_rng([seed, 7])
    parts = []
    attempts = successes = 0
    per_world = {}
    for wi in range(len(worlds)):
        for _ in range(config.episodes_per_world):
            attempts += 1
            env.reset(world_index=wi)
            teacher.reset(env)
            rows = {k: [] for k in ("obs_student", "obs_teacher", "actions", "rewards", "logprobs")}
            done, info = False, {}
            while not done:
                s_pi, s_mu = env.views()
                a, lp = teacher.act(env, rng)
                _, r, done, info = env.step(a)
                rows["obs_student"].append(s_pi)
                rows["obs_teacher"].append(s_mu)
                rows["actions"].append(np.asarray(a, dtype=np.float64))
                rows["rewards"].append(r)
                rows["logprobs"].append(lp)
            if not info["success"]:
                log.info("discarding failed demo on world %d (seed %d)", wi, worlds[wi].seed)
                continue
            successes += 1
            per_world[str(wi)] = per_world.get(str(wi), 0) + 1
            n = len(rows["rewards"])
            rewards = np.array(rows["rewards"])
            dones = np.zeros(n, dtype=bool)
            dones[-1] = True
            parts.append(TeacherBuffer(
                np.array(rows["obs_student"]), np.array(rows["obs_teacher"]), np.array(rows["actions"]),
                rewards, discounted_returns(rewards, dones, 0.0, config.gamma), np.array(rows["logprobs"]),
                dones, np.full(n, successes - 1), np.full(n, wi),
            ))
    rate = successes / max(attempts, 1)
    if rate < config.min_success_rate or not parts:
        raise DemoCollectionError(f"teacher success rate {rate:.2f} on {attempts} demo episodes is below "
                                  f"{config.min_success_rate}")
    manifest = {"teacher": getattr(teacher, "kind", "unknown"), "attempts": attempts, "successes": successes,
                "episodes_per_world": per_world, "world_seeds": [w.seed for w in worlds], "gamma": config.gamma}
    buf = concat_teacher_buffers(parts, manifest)
    if config.max_transitions is not None and len(buf) > config.max_transitions:
        cut = config.max_transitions
        buf = TeacherBuffer(*(getattr(buf, c)[:cut] for c in (
            "obs_student", "obs_teacher", "actions", "rewards", "returns", "logprobs", "dones",
            "episode_ids", "world_ids")), manifest=manifest)
    buf.manifest["transitions"] = len(buf)
    return buf.freeze()
