import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import straight_world
from tadpo.worlds import (
    EnvConfig, NavEnv, ObservationSpec, VehicleParams, VehicleState, WorldGeometry, WorldSpec,
    episode_metrics, generate_world, observe, raycast, reward, step, straight_chain_blocked, wrap_angle,
    write_trajectory_csv,
)

VP = VehicleParams()
CFG = EnvConfig()


@pytest.fixture(scope="module")
def hard_world():
    return generate_world("obstacles", 1.0, 3)


# -- dynamics ---------------------------------------------------------------


def test_stationary_state_is_unchanged():
    s = VehicleState(1.0, -2.0, 0.3)
    assert step(s, (0.0, 0.0), 0.1) == s


@pytest.mark.parametrize("k", [1, 5, 19, 20, 40])
def test_full_throttle_from_rest(k):
    s = VehicleState(0.0, 0.0, 0.0)
    for _ in range(k):
        s = step(s, (1.0, 0.0), 0.1)
    assert s.speed == pytest.approx(min(k * VP.max_accel * 0.1, VP.v_max), abs=1e-12)


def test_constant_steering_closes_the_circle():
    # with dt chosen so a revolution takes exactly n steps the chords sum to zero
    v, steer, n = 2.0, 0.5, 200
    omega = v / VP.wheelbase * math.tan(VP.max_steer * steer)
    radius = v / omega
    dt = 2 * math.pi / (omega * n)
    s = VehicleState(0.0, 0.0, 0.0, speed=v)
    xs = []
    for _ in range(n):
        s = step(s, (0.0, steer), dt)
        xs.append(s.position)
    assert np.hypot(s.x, s.y) < 1e-6 * radius
    # the discrete orbit is a regular polygon around the turning centre
    centre = np.mean(xs, axis=0)
    assert np.ptp(np.hypot(*(np.array(xs) - centre).T)) < 1e-9 * radius


def test_inputs_are_clamped_and_dt_checked():
    s = step(VehicleState(0.0, 0.0, 0.0), (5.0, -7.0), 0.1)
    assert s.speed == pytest.approx(0.3) and s.yaw_rate < 0
    with pytest.raises(ValueError):
        step(s, (0.0, 0.0), 0.0)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 6), st.floats(-10, 10))
def test_state_invariants(throttle, steering, speed, heading):
    s = step(VehicleState(0.0, 0.0, heading, speed), (throttle, steering), 0.1)
    assert 0.0 <= s.speed <= VP.v_max
    assert -math.pi < s.heading <= math.pi


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


# -- observations -----------------------------------------------------------


def test_heading_error_at_waypoint_facing_next():
    w = straight_world()
    obs = observe(VehicleState(0.0, 0.0, 0.0), WorldGeometry(w), CFG.student)
    assert (obs[1], obs[2]) == (0.0, 1.0)


def test_no_obstacle_means_full_range():
    obs = observe(VehicleState(0.0, 0.0, 0.0), WorldGeometry(straight_world()), CFG.student)
    assert np.array_equal(obs[-16:], np.ones(16))


def ray_disc_oracle(angle, cx, r):
    """Hit distance of a ray from the origin against a disc centred on the x axis."""
    b = cx * math.cos(angle)
    disc = r * r - (cx * math.sin(angle)) ** 2
    return b - math.sqrt(disc) if disc >= 0 else math.inf


def test_obstacle_dead_ahead_at_half_range():
    spec = CFG.student
    r = 3.0
    cx = spec.raycast_range / 2 + r
    assert raycast(0.0, 0.0, 0.0, np.array([[cx, 0.0, r]]), 1, spec.fov, spec.raycast_range)[0] == pytest.approx(0.5)
    w = straight_world(obstacles=[(cx, 0.0, r)])
    rays = observe(VehicleState(0.0, 0.0, 0.0), WorldGeometry(w), spec)[-spec.raycast_count:]
    angles = np.linspace(-spec.fov / 2, spec.fov / 2, spec.raycast_count)
    expected = [min(ray_disc_oracle(a, cx, r), spec.raycast_range) / spec.raycast_range for a in angles]
    np.testing.assert_allclose(rays, expected, atol=1e-12)
    forward = rays[np.argsort(np.abs(angles))[:2]]
    assert np.all(np.abs(forward - 0.5) < 0.01)  # the two rays nearest the axis sit 4 degrees off it


def test_view_dimensions():
    assert CFG.student.dim == 23 and CFG.teacher.dim == 13
    with pytest.raises(ValueError):
        ObservationSpec("oracle")


@settings(max_examples=60)
@given(st.floats(-15, 75), st.floats(-20, 20), st.floats(-4, 4), st.floats(0, 6))
def test_observations_are_bounded(hard_world, x, y, heading, speed):
    geom = WorldGeometry(hard_world)
    s = VehicleState(x, y, heading, speed)
    for spec in (CFG.student, CFG.teacher):
        obs = observe(s, geom, spec)
        assert obs.shape == (spec.dim,)
        assert np.all(np.abs(obs) <= 1.0)


# -- reward -----------------------------------------------------------------


def test_stationary_reward_is_zero():
    geom = WorldGeometry(straight_world())
    s = VehicleState(10.0, 0.0, 0.0)
    r, done, _ = reward(s, step(s, (0.0, 0.0), 0.1), geom, CFG)
    assert r == 0.0 and not done


def test_goal_reached_pays_bonus():
    geom = WorldGeometry(straight_world())
    prev = VehicleState(98.0, 0.0, 0.0, speed=5.0)
    r, done, info = reward(prev, step(prev, (0.0, 0.0), 0.1), geom, CFG)
    assert done and info["success"]
    assert r == pytest.approx(CFG.weights.success + 0.5, abs=1e-9)


def test_collision_is_penalised_and_terminal():
    geom = WorldGeometry(straight_world(obstacles=[(11.0, 0.0, 1.0)]))
    prev = VehicleState(9.4, 0.0, 0.0, speed=3.0)
    r, done, info = reward(prev, step(prev, (0.0, 0.0), 0.1), geom, CFG)
    assert done and info["collided"] and r == pytest.approx(0.3 - CFG.weights.collision)


@pytest.mark.parametrize("v", [0.5, 2.0, 6.0])
def test_straight_progress_term(v):
    geom = WorldGeometry(straight_world())
    prev = VehicleState(20.0, 0.0, 0.0, speed=v)
    r, _, info = reward(prev, step(prev, (0.0, 0.0), CFG.dt), geom, CFG)
    assert abs(r - CFG.weights.progress * v * CFG.dt) < 1e-9


def test_reward_progress_conservation():
    env = NavEnv([straight_world()], EnvConfig(max_steps=1000))
    env.reset()
    env.state = VehicleState(0.0, 0.0, 0.0, speed=4.0)
    total, done = 0.0, False
    while not done:
        _, r, done, info = env.step((0.0, 0.0))
        total += r
    assert info["success"]
    travelled = env.state.x - 0.0
    assert abs(total - CFG.weights.success - CFG.weights.progress * travelled) < 1e-6


# -- metrics ----------------------------------------------------------------


def test_completion_example():
    w = straight_world()
    traj = [VehicleState(x, 0.0, 0.0, speed=1.0) for x in (0.0, 30.0, 60.0, 45.0)]
    m = episode_metrics(traj, w)
    assert m.cp == pytest.approx(0.6) and m.sr == 0.0 and not m.collided


def test_start_at_goal():
    w = straight_world(start=(100.0, 0.0, 0.0))
    m = episode_metrics([VehicleState(100.0, 0.0, 0.0)], w)
    assert (m.sr, m.cp, m.steps) == (1.0, 1.0, 0)


def test_constant_speed_mean():
    traj = [VehicleState(0.2 * k, 0.0, 0.0, speed=2.0) for k in range(50)]
    assert episode_metrics(traj, straight_world()).ms == 2.0


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        episode_metrics([], straight_world())


@pytest.mark.parametrize("seed", range(4))
def test_env_metrics_are_bounded_and_deterministic(hard_world, seed):
    def run():
        env = NavEnv([hard_world], seed=seed)
        env.reset()
        rng = np.random.default_rng(seed)
        rows = []
        while True:
            _, r, done, info = env.step(rng.uniform([0.0, -1.0], [1.0, 1.0]))
            rows.append(r)
            if done:
                return rows, info["episode"], env.trajectory

    rows, ep, traj = run()
    rows2, ep2, _ = run()
    assert rows == rows2 and ep == ep2
    assert ep["sr"] in (0.0, 1.0) and 0.0 <= ep["cp"] <= 1.0 and 0.0 <= ep["ms"] <= VP.v_max
    if ep["sr"]:
        assert ep["cp"] == 1.0
    m = episode_metrics(traj, hard_world)
    assert (m.sr, m.ms) == (ep["sr"], pytest.approx(ep["ms"]))


def test_env_truncates_at_step_cap():
    env = NavEnv([straight_world()], EnvConfig(max_steps=5))
    env.reset()
    for _ in range(5):
        _, _, done, info = env.step((0.0, 0.0))
    assert done and info["truncated"] and info["episode"]["steps"] == 5


def test_env_views_have_both_dims():
    env = NavEnv([straight_world()], view="teacher")
    assert env.reset().shape == (13,)
    s, t = env.views()
    assert s.shape == (23,) and t.shape == (13,)
    with pytest.raises(ValueError):
        NavEnv([])


# -- generation -------------------------------------------------------------


def test_difficulty_zero_is_obstacle_free():
    w = generate_world("obstacles", 0.0, 11)
    assert w.obstacles == () and not straight_chain_blocked(w)


def test_generation_is_deterministic():
    assert generate_world("hybrid", 0.5, 5) == generate_world("hybrid", 0.5, 5)


def test_hard_world_blocks_the_straight_chain(hard_world):
    # independent check: sample points along each chain segment against every disc
    pts = np.array(hard_world.sparse_waypoints)
    discs = np.array(hard_world.obstacles)
    t = np.linspace(0.0, 1.0, 2001)[:, None]
    hit = False
    for a, b in zip(pts[:-1], pts[1:]):
        line = a + t * (b - a)
        d = np.hypot(line[:, None, 0] - discs[:, 0], line[:, None, 1] - discs[:, 1]) - discs[:, 2]
        hit |= bool(np.any(d < VP.radius))
    assert hit and straight_chain_blocked(hard_world)


def test_generated_world_is_well_formed(hard_world):
    xmin, ymin, xmax, ymax = hard_world.bounds
    for x, y in hard_world.sparse_waypoints + (hard_world.goal,):
        assert xmin <= x <= xmax and ymin <= y <= ymax
    plan = np.array(hard_world.dense_plan)
    discs = np.array(hard_world.obstacles)
    clearance = np.hypot(plan[:, None, 0] - discs[:, 0], plan[:, None, 1] - discs[:, 1]) - discs[:, 2]
    assert clearance.min() > VP.radius


def test_slow_zone_family_caps_speed():
    w = generate_world("slow_zones", 1.0, 2)
    assert w.obstacles == () and len(w.slow_zones) >= 1
    x, y, _, cap = w.slow_zones[0]
    env = NavEnv([w])
    env.reset()
    env.state = VehicleState(x, y, 0.0, speed=0.0)
    for _ in range(30):
        env.step((1.0, 0.0))
        if math.hypot(env.state.x - x, env.state.y - y) > w.slow_zones[0][2]:
            break
    assert env.state.speed <= VP.v_max * cap + 1.0


def test_unknown_family_rejected():
    with pytest.raises(ValueError):
        generate_world("lava", 0.5, 0)


def test_world_json_round_trip(hard_world):
    assert WorldSpec.from_json(hard_world.to_json()) == hard_world


def test_trajectory_csv(tmp_path):
    states = [VehicleState(0.0, 0.0, 0.0), VehicleState(0.1, 0.0, 0.0, 1.0)]
    write_trajectory_csv(tmp_path / "t.csv", states, [0.1], 0.1)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["t", "x", "y", "heading", "speed", "reward"] and len(rows) == 3
