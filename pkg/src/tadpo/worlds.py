"""Desk-scale 2D driving worlds.

A kinematic bicycle drives from a start pose to a goal past disc obstacles and
slow zones. The student sees sparse waypoints plus a forward raycast fan; the
teacher sees the dense, obstacle-aware plan instead.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

FAMILIES = ("obstacles", "slow_zones", "hybrid")


class WorldGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.0
    max_steer: float = 0.5  # rad
    max_accel: float = 3.0
    v_max: float = 6.0
    radius: float = 0.5


@dataclass(frozen=True)
class RewardWeights:
    progress: float = 1.0
    collision: float = 50.0
    jerk: float = 0.05
    success: float = 100.0


@dataclass(frozen=True)
class ObservationSpec:
    view: str = "student"
    n_waypoints_encoded: int = 2
    raycast_count: int = 16
    raycast_range: float = 20.0
    waypoint_scale: float = 40.0
    fov: float = math.radians(120.0)

    def __post_init__(self):
        if self.view not in ("student", "teacher"):
            raise ValueError(f"unknown view {self.view!r}")

    @property
    def dim(self) -> int:
        return 3 + 2 * self.n_waypoints_encoded + self.raycast_count


STUDENT_VIEW = ObservationSpec()
TEACHER_VIEW = ObservationSpec("teacher", n_waypoints_encoded=5, raycast_count=0, waypoint_scale=12.0)


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    max_steps: int = 300
    vehicle: VehicleParams = VehicleParams()
    weights: RewardWeights = RewardWeights()
    student: ObservationSpec = STUDENT_VIEW
    teacher: ObservationSpec = TEACHER_VIEW


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    yaw_rate: float = 0.0
    prev_accel: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class WorldSpec:
    family: str
    difficulty: float
    seed: int
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    start: tuple[float, float, float]  # x, y, heading
    goal: tuple[float, float]
    goal_radius: float
    route: tuple[tuple[float, float], ...]  # coarse polyline the sparse waypoints are cut from
    sparse_waypoints: tuple[tuple[float, float], ...]
    obstacles: tuple[tuple[float, float, float], ...] = ()  # x, y, radius
    slow_zones: tuple[tuple[float, float, float, float], ...] = ()  # x, y, radius, speed fraction
    dense_plan: tuple[tuple[float, float], ...] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WorldSpec":
        d = json.loads(text)
        tup2 = lambda rows: tuple(tuple(float(v) for v in r) for r in rows)  # noqa: E731
        return cls(
            family=d["family"], difficulty=float(d["difficulty"]), seed=int(d["seed"]),
            bounds=tuple(d["bounds"]), start=tuple(d["start"]), goal=tuple(d["goal"]),
            goal_radius=float(d["goal_radius"]), route=tup2(d["route"]),
            sparse_waypoints=tup2(d["sparse_waypoints"]), obstacles=tup2(d["obstacles"]),
            slow_zones=tup2(d["slow_zones"]),
            dense_plan=None if d.get("dense_plan") is None else tup2(d["dense_plan"]),
        )


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return a - 2.0 * math.pi * np.ceil((a - math.pi) / (2.0 * math.pi))


# -- geometry ---------------------------------------------------------------


class Polyline:
    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("polyline needs at least one point")
        if len(pts) == 1:
            pts = np.vstack([pts, pts])
        self.points = pts
        self.a = pts[:-1]
        self.d = pts[1:] - pts[:-1]
        self.seg_len = np.hypot(self.d[:, 0], self.d[:, 1])
        self.seg_len2 = np.maximum(self.seg_len**2, 1e-300)
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Arclength of the nearest point on the polyline and the distance to it."""
        px = x - self.a[:, 0]
        py = y - self.a[:, 1]
        t = np.clip((px * self.d[:, 0] + py * self.d[:, 1]) / self.seg_len2, 0.0, 1.0)
        qx = px - t * self.d[:, 0]
        qy = py - t * self.d[:, 1]
        dist2 = qx * qx + qy * qy
        i = int(np.argmin(dist2))
        return float(self.cum[i] + t[i] * self.seg_len[i]), math.sqrt(float(dist2[i]))

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance from each point in ``pts`` (..., 2) to the polyline."""
        return self.project_many(pts)[1]

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`project` over ``pts`` (..., 2): (arclength, distance)."""
        px = pts[..., 0, None] - self.a[:, 0]
        py = pts[..., 1, None] - self.a[:, 1]
        t = np.clip((px * self.d[:, 0] + py * self.d[:, 1]) / self.seg_len2, 0.0, 1.0)
        qx = px - t * self.d[:, 0]
        qy = py - t * self.d[:, 1]
        dist2 = qx * qx + qy * qy
        i = np.argmin(dist2, axis=-1)
        ti = np.take_along_axis(t, i[..., None], axis=-1)[..., 0]
        d2 = np.take_along_axis(dist2, i[..., None], axis=-1)[..., 0]
        return self.cum[i] + ti * self.seg_len[i], np.sqrt(d2)

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        if self.seg_len[i] == 0.0:
            return self.a[i].copy()
        return self.a[i] + self.d[i] * ((s - self.cum[i]) / self.seg_len[i])

    def tangent_at(self, s: float) -> np.ndarray:
        i = int(np.searchsorted(self.cum, min(max(s, 0.0), self.length), side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        return self.d[i] / max(self.seg_len[i], 1e-12)

    def resample(self, spacing: float) -> np.ndarray:
        """Points every ``spacing`` along the line, always ending at the last vertex."""
        if self.length == 0.0:
            return self.points[:1].copy()
        n = int(math.floor(self.length / spacing + 1e-9))
        pts = [self.point_at(k * spacing) for k in range(n + 1)]
        if self.length - n * spacing > 1e-9:
            pts.append(self.points[-1].copy())
        return np.array(pts)


def segment_disc_clearance(p0: np.ndarray, p1: np.ndarray, discs: np.ndarray) -> np.ndarray:
    """Distance from segment p0-p1 to each disc's boundary (negative when intersecting)."""
    if len(discs) == 0:
        return np.zeros(0)
    d = p1 - p0
    l2 = max(float(d @ d), 1e-300)
    c = discs[:, :2]
    t = np.clip(((c - p0) @ d) / l2, 0.0, 1.0)
    q = p0 + t[:, None] * d
    return np.hypot(*(c - q).T) - discs[:, 2]


def raycast(x: float, y: float, heading: float, discs: np.ndarray, count: int, fov: float,
            max_range: float) -> np.ndarray:
    """Normalized hit distance per ray (1.0 when nothing is hit within ``max_range``)."""
    if count == 0:
        return np.zeros(0)
    offsets = np.linspace(-fov / 2, fov / 2, count) if count > 1 else np.zeros(1)
    ang = heading + offsets
    dx, dy = np.cos(ang), np.sin(ang)
    if len(discs) == 0:
        return np.ones(count)
    fx = x - discs[:, 0]
    fy = y - discs[:, 1]
    b = dx[:, None] * fx + dy[:, None] * fy
    c = fx * fx + fy * fy - discs[:, 2] ** 2
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(disc)
    t = np.where(c <= 0.0, 0.0, t)
    hit = (disc >= 0.0) & (t >= 0.0) & (t <= max_range)
    t = np.where(hit, t, max_range)
    return np.min(t, axis=1) / max_range


# -- dynamics ---------------------------------------------------------------


def kinematics(x, y, heading, speed, throttle, steering, dt, vp: VehicleParams, speed_cap=1.0):
    """Vectorized bicycle update; returns (x, y, heading, speed, yaw_rate, accel)."""
    throttle = np.clip(throttle, -1.0, 1.0)
    steering = np.clip(steering, -1.0, 1.0)
    new_speed = np.clip(speed + vp.max_accel * throttle * dt, 0.0, vp.v_max * speed_cap)
    yaw_rate = new_speed / vp.wheelbase * np.tan(vp.max_steer * steering)
    new_heading = wrap_angle(heading + yaw_rate * dt)
    new_x = x + new_speed * np.cos(new_heading) * dt
    new_y = y + new_speed * np.sin(new_heading) * dt
    accel = (new_speed - speed) / dt
    return new_x, new_y, new_heading, new_speed, yaw_rate, accel


def speed_cap_at(x, y, zones: np.ndarray):
    """Fraction of v_max allowed at (x, y); vectorized over positions."""
    if len(zones) == 0:
        return np.ones_like(np.asarray(x, dtype=np.float64))
    dx = np.asarray(x)[..., None] - zones[:, 0]
    dy = np.asarray(y)[..., None] - zones[:, 1]
    inside = dx * dx + dy * dy <= zones[:, 2] ** 2
    return np.min(np.where(inside, zones[:, 3], 1.0), axis=-1)


def step(state: VehicleState, action, dt: float, vehicle: VehicleParams = VehicleParams(),
         speed_cap: float = 1.0) -> VehicleState:
    """Advance one kinematic-bicycle step; ``action`` is (throttle, steering) in [-1, 1]."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y, h, v, w, acc = kinematics(state.x, state.y, state.heading, state.speed,
                                    float(action[0]), float(action[1]), dt, vehicle, speed_cap)
    return VehicleState(float(x), float(y), float(h), float(v), float(w), float(acc))


# -- world geometry cache ---------------------------------------------------


class WorldGeometry:
    """Array views of a WorldSpec used by the environment and planners."""

    def __init__(self, world: WorldSpec):
        self.world = world
        self.obstacles = np.array(world.obstacles, dtype=np.float64).reshape(-1, 3)
        self.zones = np.array(world.slow_zones, dtype=np.float64).reshape(-1, 4)
        self.sparse = Polyline(world.sparse_waypoints)
        self.dense = Polyline(world.dense_plan) if world.dense_plan else None
        self.goal = np.array(world.goal, dtype=np.float64)
        self.bounds = world.bounds

    def chain(self, which: str) -> Polyline:
        if which == "dense":
            if self.dense is None:
                raise ValueError("world has no dense plan")
            return self.dense
        return self.sparse

    def collided(self, x: float, y: float, radius: float) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin <= x <= xmax and ymin <= y <= ymax):
            return True
        if len(self.obstacles) == 0:
            return False
        d2 = (x - self.obstacles[:, 0]) ** 2 + (y - self.obstacles[:, 1]) ** 2
        return bool(np.any(d2 < (self.obstacles[:, 2] + radius) ** 2))

    def clearance(self, x: float, y: float) -> float:
        if len(self.obstacles) == 0:
            return math.inf
        return float(np.min(np.hypot(x - self.obstacles[:, 0], y - self.obstacles[:, 1]) - self.obstacles[:, 2]))

    def goal_distance_along(self, chain: Polyline, x: float, y: float) -> float:
        s, _ = chain.project(x, y)
        return chain.length - s


def observe(state: VehicleState, geom: WorldGeometry, spec: ObservationSpec,
            vehicle: VehicleParams = VehicleParams()) -> np.ndarray:
    """Fixed-length observation with every component in [-1, 1]."""
    chain = geom.chain("dense" if spec.view == "teacher" else "sparse")
    s, _ = chain.project(state.x, state.y)
    pts = chain.points[1:]
    arc = chain.cum[1:]
    nxt = int(np.searchsorted(arc, s + 1e-9, side="right"))
    idx = np.minimum(np.arange(nxt, nxt + spec.n_waypoints_encoded), len(pts) - 1)
    wps = pts[idx]
    dx = wps[:, 0] - state.x
    dy = wps[:, 1] - state.y
    err = wrap_angle(math.atan2(dy[0], dx[0]) - state.heading) if (dx[0] or dy[0]) else 0.0
    c, sn = math.cos(state.heading), math.sin(state.heading)
    ego = np.stack([c * dx + sn * dy, -sn * dx + c * dy], axis=1) / spec.waypoint_scale
    parts = [np.array([state.speed / vehicle.v_max, math.sin(err), math.cos(err)]),
             np.clip(ego, -1.0, 1.0).ravel()]
    if spec.raycast_count:
        parts.append(raycast(state.x, state.y, state.heading, geom.obstacles, spec.raycast_count,
                             spec.fov, spec.raycast_range))
    return np.concatenate(parts)


def reward(prev_state: VehicleState, state: VehicleState, geom: WorldGeometry, config: EnvConfig,
           chain: Polyline | None = None) -> tuple[float, bool, dict]:
    """Progress along ``chain`` minus collision and jerk penalties, plus the success bonus."""
    w = config.weights
    chain = chain if chain is not None else geom.sparse
    d_prev = geom.goal_distance_along(chain, prev_state.x, prev_state.y)
    d_now = geom.goal_distance_along(chain, state.x, state.y)
    collided = geom.collided(state.x, state.y, config.vehicle.radius)
    success = (not collided) and math.hypot(state.x - geom.goal[0], state.y - geom.goal[1]) <= geom.world.goal_radius
    progress = d_prev - d_now
    jerk = abs(state.prev_accel - prev_state.prev_accel)
    r = w.progress * progress - w.jerk * jerk
    if collided:
        r -= w.collision
    if success:
        r += w.success
    return r, collided or success, {"progress": progress, "collided": collided, "success": success,
                                    "d_now": d_now}


@dataclass
class EpisodeMetrics:
    sr: float
    cp: float
    ms: float
    steps: int
    collided: bool


def episode_metrics(trajectory: Sequence[VehicleState], world: WorldSpec,
                    config: EnvConfig = EnvConfig()) -> EpisodeMetrics:
    """sr/cp/ms for a state trajectory (first entry is the initial state)."""
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    geom = WorldGeometry(world)
    chain = geom.sparse
    d0 = geom.goal_distance_along(chain, trajectory[0].x, trajectory[0].y)
    ds = [geom.goal_distance_along(chain, s.x, s.y) for s in trajectory]
    success = any(math.hypot(s.x - geom.goal[0], s.y - geom.goal[1]) <= world.goal_radius for s in trajectory)
    collided = any(geom.collided(s.x, s.y, config.vehicle.radius) for s in trajectory[1:])
    steps = max(len(trajectory) - 1, 0)
    ms = float(np.mean([s.speed for s in trajectory[1:]])) if steps else 0.0
    return EpisodeMetrics(float(success), _completion(d0, min(ds), success), ms, steps, collided)


def _completion(d0: float, dmin: float, success: bool) -> float:
    if success or d0 <= 0.0:
        return 1.0
    return float(min(max((d0 - dmin) / d0, 0.0), 1.0))


# -- environment ------------------------------------------------------------


class NavEnv:
    """Auto-resetting single-vehicle environment over a pool of worlds.

    ``view`` picks the observation returned by ``step``/``reset``; both views
    are always available via :meth:`views`. ``reward_chain`` selects whether
    progress is measured along the sparse waypoints (the task) or the dense
    plan (teacher training).
    """

    def __init__(self, worlds: Sequence[WorldSpec], config: EnvConfig = EnvConfig(), view: str = "student",
                 reward_chain: str = "sparse", seed: int = 0):
        if len(worlds) == 0:
            raise ValueError("NavEnv needs at least one world")
        self.worlds = list(worlds)
        self.geoms = [WorldGeometry(w) for w in self.worlds]
        self.config = config
        self.view = view
        self.reward_chain = reward_chain
        self.rng = np.random.default_rng(seed)
        self.episode_id = -1
        self.world_index = 0
        self.state: VehicleState | None = None
        self._obs: np.ndarray | None = None

    @property
    def geom(self) -> WorldGeometry:
        return self.geoms[self.world_index]

    @property
    def spec(self) -> ObservationSpec:
        return self.config.teacher if self.view == "teacher" else self.config.student

    @property
    def obs_dim(self) -> int:
        return self.spec.dim

    @property
    def action_dim(self) -> int:
        return 2

    def reset(self, world_index: int | None = None) -> np.ndarray:
        if world_index is None:
            world_index = int(self.rng.integers(len(self.worlds))) if len(self.worlds) > 1 else 0
        self.world_index = world_index
        x, y, h = self.geom.world.start
        self.state = VehicleState(x, y, h)
        self.episode_id += 1
        self._steps = 0
        self._return = 0.0
        self._speed_sum = 0.0
        self._chain = self.geom.chain(self.reward_chain)
        self._d0 = self.geom.goal_distance_along(self.geom.sparse, x, y)
        self._dmin = self._d0
        self._success = math.hypot(x - self.geom.goal[0], y - self.geom.goal[1]) <= self.geom.world.goal_radius
        self.trajectory = [self.state]
        self._obs = self.observe(self.view)
        return self._obs

    def current_obs(self) -> np.ndarray:
        if self._obs is None:
            self.reset()
        return self._obs

    def observe(self, view: str) -> np.ndarray:
        spec = self.config.teacher if view == "teacher" else self.config.student
        return observe(self.state, self.geom, spec, self.config.vehicle)

    def views(self) -> tuple[np.ndarray, np.ndarray]:
        """(student, teacher) observations of the current state."""
        return self.observe("student"), self.observe("teacher")

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        cfg = self.config
        prev = self.state
        cap = float(speed_cap_at(prev.x, prev.y, self.geom.zones))
        self.state = step(prev, action, cfg.dt, cfg.vehicle, cap)
        r, done, info = reward(prev, self.state, self.geom, cfg, self._chain)
        self._steps += 1
        self._return += r
        self._speed_sum += self.state.speed
        d_sparse = info["d_now"] if self._chain is self.geom.sparse else \
            self.geom.goal_distance_along(self.geom.sparse, self.state.x, self.state.y)
        self._dmin = min(self._dmin, d_sparse)
        self._success = self._success or info["success"]
        self.trajectory.append(self.state)
        truncated = not done and self._steps >= cfg.max_steps
        done = done or truncated
        info["truncated"] = truncated
        if done:
            info["episode"] = {
                "return": self._return, "steps": self._steps, "world": self.world_index,
                "sr": float(self._success), "cp": _completion(self._d0, self._dmin, self._success),
                "ms": self._speed_sum / self._steps, "collided": info["collided"],
            }
        self._obs = self.observe(self.view)
        return self._obs, r, done, info


def write_trajectory_csv(path: str | Path, states: Sequence[VehicleState], rewards: Sequence[float],
                         dt: float) -> None:
    """CSV log with columns t, x, y, heading, speed, reward (reward of the step leading to the row)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "heading", "speed", "reward"])
        for i, s in enumerate(states):
            w.writerow([i * dt, s.x, s.y, s.heading, s.speed, rewards[i - 1] if i else 0.0])


# -- world generation -------------------------------------------------------


@dataclass(frozen=True)
class WorldGenConfig:
    n_segments: int = 3
    d_sparse: float = 20.0
    d_dense: float = 2.0
    bend: float = 4.0  # max lateral jitter of interior route vertices
    goal_radius: float = 2.0
    margin: float = 15.0
    max_clusters: int = 2
    max_scatter: int = 4
    max_zones: int = 2
    zone_cap: float = 0.3
    cluster_kinds: tuple[str, ...] = ("wall", "cup", "boulder")
    traps: int = 2  # wide dead-end pockets on the route (obstacle and hybrid families)
    trap_radius: tuple[float, float] = (6.0, 7.0)
    retries: int = 100


def _cluster(kind: str, center: np.ndarray, t: np.ndarray, n: np.ndarray,
             rng: np.random.Generator, trap_radius: float | None = None) -> list[tuple[float, float, float]]:
    if kind == "wall":
        r = rng.uniform(1.2, 1.6)
        return [tuple(center + n * k * 1.8 * r) + (r,) for k in (-1, 0, 1)]
    if kind == "cup":
        R, r = rng.uniform(3.2, 3.8), 1.0
        base = center + t * 0.5 * R
        return [tuple(base + R * (math.cos(p) * t + math.sin(p) * n)) + (r,)
                for p in np.radians([-90, -45, 0, 45, 90])]
    if kind == "boulder":
        return [tuple(center) + (rng.uniform(2.5, 3.5),)]
    if kind == "trap":
        # dead-end pocket: only an early detour avoids it
        R, r = (rng.uniform(6.0, 7.0) if trap_radius is None else trap_radius), 1.0
        n_disc = int(math.ceil(math.radians(220.0) * R / 2.6)) + 1
        return [tuple(center + R * (math.cos(p) * t + math.sin(p) * n)) + (r,)
                for p in np.radians(np.linspace(-110.0, 110.0, n_disc))]
    raise ValueError(f"unknown cluster kind {kind!r}")


def _layout(family: str, difficulty: float, rng: np.random.Generator, cfg: WorldGenConfig) -> WorldSpec:
    length = cfg.n_segments * cfg.d_sparse
    xs = np.linspace(0.0, length, cfg.n_segments + 1)
    ys = np.concatenate([[0.0], rng.uniform(-cfg.bend, cfg.bend, cfg.n_segments)])
    route_pts = np.stack([xs, ys], axis=1)
    route = Polyline(route_pts)
    from .planners import sparse_points

    sparse = sparse_points(route_pts, cfg.d_sparse)
    first = sparse[1] - sparse[0]
    heading = math.atan2(first[1], first[0]) + rng.uniform(-0.1, 0.1)
    obstacles: list[tuple[float, float, float]] = []
    zones: list[tuple[float, float, float, float]] = []
    if difficulty > 0:
        n_clusters = n_zones = 0
        if family == "obstacles":
            n_clusters = max(1, round(difficulty * cfg.max_clusters))
        elif family == "slow_zones":
            n_zones = max(1, round(difficulty * cfg.max_zones))
        else:
            n_clusters = max(1, round(difficulty * cfg.max_clusters / 2))
            n_zones = max(1, round(difficulty * cfg.max_zones / 2))
        kinds = [cfg.cluster_kinds[rng.integers(len(cfg.cluster_kinds))] for _ in range(n_clusters)]
        if family != "slow_zones":
            kinds[: cfg.traps] = ["trap"] * min(cfg.traps, n_clusters)
        slots = _spaced_positions(rng, n_clusters + n_zones, 14.0, route.length - 12.0, 16.0)
        rng.shuffle(slots)
        for kind, s in zip(kinds, slots[:n_clusters]):
            t = route.tangent_at(s)
            n = np.array([-t[1], t[0]])
            if kind == "trap":
                center = route.point_at(s) + n * rng.uniform(-1.0, 1.0)
                obstacles += _cluster(kind, center, t, n, rng, rng.uniform(*cfg.trap_radius))
            else:
                center = route.point_at(s) + n * rng.uniform(-1.5, 1.5)
                obstacles += _cluster(kind, center, t, n, rng)
        for s in slots[n_clusters:]:
            t = route.tangent_at(s)
            c = route.point_at(s) + np.array([-t[1], t[0]]) * rng.uniform(-1.0, 1.0)
            zones.append((float(c[0]), float(c[1]), float(rng.uniform(4.0, 6.0)), cfg.zone_cap))
        if family != "slow_zones":
            for _ in range(round(difficulty * cfg.max_scatter)):
                s = rng.uniform(8.0, route.length)
                t = route.tangent_at(s)
                off = rng.choice([-1.0, 1.0]) * rng.uniform(7.0, 13.0)
                c = route.point_at(s) + np.array([-t[1], t[0]]) * off
                obstacles.append((float(c[0]), float(c[1]), float(rng.uniform(0.6, 1.2))))
    obstacles = [tuple(float(v) for v in o) for o in obstacles]
    bounds = (float(route_pts[:, 0].min() - cfg.margin), float(route_pts[:, 1].min() - cfg.margin - 10.0),
              float(route_pts[:, 0].max() + cfg.margin), float(route_pts[:, 1].max() + cfg.margin + 10.0))
    return WorldSpec(
        family=family, difficulty=float(difficulty), seed=0, bounds=bounds,
        start=(0.0, 0.0, float(heading)), goal=tuple(float(v) for v in route_pts[-1]),
        goal_radius=cfg.goal_radius, route=tuple(tuple(float(v) for v in p) for p in route_pts),
        sparse_waypoints=tuple(tuple(float(v) for v in p) for p in sparse),
        obstacles=tuple(obstacles), slow_zones=tuple(zones),
    )


def _spaced_positions(rng, n, lo, hi, min_gap) -> list[float]:
    for _ in range(1000):
        s = np.sort(rng.uniform(lo, hi, n))
        if n < 2 or np.all(np.diff(s) >= min_gap):
            return [float(v) for v in s]
    raise WorldGenerationError("could not space obstacle clusters")


def straight_chain_blocked(world: WorldSpec, vehicle_radius: float = VehicleParams().radius) -> bool:
    """True if the sparse chain passes within ``vehicle_radius`` of some obstacle disc."""
    discs = np.array(world.obstacles).reshape(-1, 3)
    pts = np.array(world.sparse_waypoints)
    return any(np.any(segment_disc_clearance(pts[i], pts[i + 1], discs) < vehicle_radius)
               for i in range(len(pts) - 1))


def generate_world(family: str, difficulty: float, seed: int, gen: WorldGenConfig = WorldGenConfig(),
                   env: EnvConfig = EnvConfig(), mppi=None) -> WorldSpec:
    """Random world of ``family``; validated by planning a collision-free dense path through it."""
    from .planners import PlanningError, densify, generous_mppi

    if family not in FAMILIES:
        raise ValueError(f"unknown world family {family!r}")
    mppi = mppi or generous_mppi()
    for attempt in range(gen.retries):
        rng = np.random.default_rng([seed, attempt])
        world = replace(_layout(family, difficulty, rng, gen), seed=int(seed))
        if family in ("obstacles", "hybrid") and difficulty > 0 and not straight_chain_blocked(world):
            continue
        try:
            plan = densify(world, mppi, env, gen.d_dense, seed=seed * 1000 + attempt)
        except PlanningError:
            continue
        return replace(world, dense_plan=tuple(tuple(float(v) for v in p) for p in plan.waypoints))
    raise WorldGenerationError(f"no feasible {family} world for seed {seed} after {gen.retries} attempts")


def save_worlds(path: str | Path, worlds: Sequence[WorldSpec]) -> None:
    Path(path).write_text(json.dumps([json.loads(w.to_json()) for w in worlds], indent=None))


def load_worlds(path: str | Path) -> list[WorldSpec]:
    return [WorldSpec.from_json(json.dumps(d)) for d in json.loads(Path(path).read_text())]
