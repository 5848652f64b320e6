import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import QuadraticEnv, central_fd, perturbed_policy, rel_err
from tadpo.approximator import ActorCritic, Adam, PolicySpec
from tadpo.ppo import PpoConfig, train_ppo
from tadpo.rollout import TeacherBuffer
from tadpo.tad import (
    LOG_RATIO_CLAMP, TadpoConfig, TeacherBatch, TeacherSampler, delta_hat, rho, tad_loss, tadpo_update, train_tadpo,
)

RAW = TadpoConfig(entropy_coef=0.0, normalize_delta=False)


def teacher_batch(model, ratios, delta, seed=0):
    rng = np.random.default_rng(seed)
    n = len(ratios)
    obs, act = rng.standard_normal((n, model.spec.obs_dim)), 0.5 * rng.standard_normal((n, 2))
    return TeacherBatch(obs, act, model.log_prob(obs, act) - np.log(ratios), np.asarray(delta, float))


def test_rho_examples():
    m = perturbed_policy(0)
    obs, act = np.ones((1, 5)), np.zeros((1, 2))
    lp = m.log_prob(obs, act)
    r, flag = rho(m, lp, obs, act)
    assert r[0] == 1.0 and not flag[0]
    assert rho(m, lp - math.log(2), obs, act)[0][0] == pytest.approx(2.0, rel=1e-12)
    r, flag = rho(m, lp - 100.0, obs, act)
    assert r[0] == pytest.approx(math.exp(LOG_RATIO_CLAMP)) and flag[0]


def test_delta_hat_examples():
    obs = np.zeros((1, 5))
    assert delta_hat([3.0], lambda o: np.array([3.0]), obs)[0] == 0.0
    assert delta_hat([10.0], lambda o: np.array([4.0]), obs)[0] == 6.0


def test_delta_hat_fresh_critic_is_return_minus_value():
    m = ActorCritic(PolicySpec(5, 2), rng=np.random.default_rng(0))
    obs = np.random.default_rng(1).uniform(-1, 1, (20, 5))
    assert np.array_equal(delta_hat(np.ones(20), m.value, obs), 1.0 - m.value(obs))


@pytest.mark.xfail(strict=True, reason="value head uses output gain 1.0, so fresh critic outputs reach ~0.3-0.7")
def test_fresh_critic_is_near_zero():
    m = ActorCritic(PolicySpec(5, 2), rng=np.random.default_rng(0))
    obs = np.random.default_rng(1).uniform(-1, 1, (20, 5))
    assert np.all(np.abs(delta_hat(np.ones(20), m.value, obs) - 1.0) < 0.1)


@pytest.mark.parametrize("r,d,expected", [(0.8, 2.0, 1.6), (2.0, 1.0, 1.5), (1.3, -0.5, 0.0)])
def test_tad_term_examples(r, d, expected):
    m = perturbed_policy(1)
    assert tad_loss(m, teacher_batch(m, [r], [d]), RAW).objective == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("r,d", [(2.0, 1.0), (1.3, -0.5), (0.4, 0.0)])
def test_gated_samples_have_zero_gradient(r, d):
    m = perturbed_policy(2)
    b = teacher_batch(m, [r], [d])
    g = tad_loss(m, b, RAW, with_grad=True).grad
    assert np.array_equal(g, np.zeros_like(g))
    assert np.all(central_fd(m, lambda: tad_loss(m, b, RAW).objective) == 0.0)


@given(st.floats(0.05, 3.0), st.floats(-2.0, 2.0), st.integers(0, 1000))
def test_gate_matches_per_sample_finite_differences(r, d, seed):
    m = perturbed_policy(seed % 7, hidden=(4,))
    b = teacher_batch(m, [r], [d], seed=seed)
    g = tad_loss(m, b, RAW, with_grad=True).grad
    fd = central_fd(m, lambda: tad_loss(m, b, RAW).objective)
    r = rho(m, b.logprobs, b.obs, b.actions)[0][0]  # the ratio as computed, not as requested
    if d <= 0 or r >= 1.5:
        assert np.all(g == 0.0)
        if d <= 0 or r > 1.5 + 1e-3:
            assert np.all(fd == 0.0)
    elif r < 1.5 - 1e-3:
        assert rel_err(g, fd) < 1e-6


@pytest.mark.parametrize("draw", range(6))
def test_tad_gradient_matches_finite_differences(draw):
    m = perturbed_policy(draw, shared=(6,) if draw % 2 else ())
    rng = np.random.default_rng(draw)
    b = teacher_batch(m, np.exp(0.4 * rng.standard_normal(16)), rng.standard_normal(16), seed=draw)
    cfg = TadpoConfig()
    g = tad_loss(m, b, cfg, with_grad=True).grad
    assert rel_err(g, central_fd(m, lambda: tad_loss(m, b, cfg).objective)) < 1e-4


def test_term_is_monotone_then_flat_in_rho():
    m = perturbed_policy(0)
    grid = np.linspace(0.01, 3.0, 300)
    terms = [tad_loss(m, teacher_batch(m, [r], [1.0]), RAW).objective for r in grid]
    inside = grid <= 1.5
    assert np.all(np.diff(np.array(terms)[inside]) >= 0)
    assert np.allclose(np.array(terms)[~inside], 1.5, rtol=1e-12)


def test_actor_gradient_ignores_live_critic():
    m = perturbed_policy(3)
    b = teacher_batch(m, [0.7, 1.1, 0.9], [1.0, 0.5, -0.2])
    g0 = tad_loss(m, b, TadpoConfig(), with_grad=True).grad
    m.params.values[m.critic_mask()] += 1.0
    g1 = tad_loss(m, b, TadpoConfig(), with_grad=True).grad
    assert np.array_equal(g0, g1)
    assert np.all(g0[m.critic_mask()] == 0.0)


def test_update_freezes_critic_and_fully_gated_batch_is_noop():
    m = perturbed_policy(4)
    opt = Adam(len(m.params))
    before = m.params.values.copy()
    tadpo_update(m, opt, teacher_batch(m, [0.5, 0.9], [-1.0, -0.1]), TadpoConfig(entropy_coef=0.0))
    assert np.array_equal(m.params.values, before)
    tadpo_update(m, opt, teacher_batch(m, [0.5, 0.9], [1.0, 0.3]), TadpoConfig())
    mask = m.critic_mask()
    assert np.array_equal(m.params.values[mask], before[mask])
    assert not np.array_equal(m.params.values, before)


def test_empty_teacher_minibatch_is_an_error():
    m = perturbed_policy(0)
    with pytest.raises(ValueError):
        tad_loss(m, TeacherBatch(np.zeros((0, 5)), np.zeros((0, 2)), np.zeros(0), np.zeros(0)), RAW)


def test_sampler_draws_without_replacement_and_refills():
    s = TeacherSampler(10, 4, np.random.default_rng(0))
    a, b = s.draw(), s.draw()
    assert len(set(a) | set(b)) == 8
    c = s.draw()  # only two left, so the pool is reshuffled
    assert len(c) == 4 and len(set(c)) == 4
    with pytest.raises(ValueError):
        TeacherSampler(0, 4, np.random.default_rng(0))


def quad_buffer(n=40, seed=0):
    rng = np.random.default_rng(seed)
    obs = np.tile([0.5, -0.25, 1.0], (n, 1))
    acts = 0.1 * rng.standard_normal((n, 2))
    ret = rng.standard_normal(n)
    return TeacherBuffer(obs, obs.copy(), acts, -np.sum(acts ** 2, 1), ret,
                         np.full(n, -1.0), np.r_[np.zeros(n - 1), 1.0], np.zeros(n), np.zeros(n)).freeze()


SMALL = PpoConfig(iterations=3, n_steps=64, epochs=2, minibatch_size=16)
SPEC = PolicySpec(3, 2, hidden=(8,))


def test_p_zero_reproduces_ppo():
    envs = lambda: [QuadraticEnv(), QuadraticEnv()]
    a, ca = train_ppo(envs(), SMALL, 5, spec=SPEC)
    b, cb = train_tadpo(envs(), quad_buffer(), TadpoConfig(teacher_prob=0.0, ppo=SMALL), 5, spec=SPEC)
    assert np.array_equal(a.params.values, b.params.values)
    for x, y in zip(ca, cb):
        assert all(x[k] == y[k] for k in x)
        assert y["tad_steps"] == 0


def test_p_one_spends_every_slot_on_teacher_steps():
    buf = quad_buffer()
    _, curve = train_tadpo([QuadraticEnv()], buf, TadpoConfig(teacher_prob=1.0, ppo=SMALL), 0, spec=SPEC)
    for s in curve:
        assert s["ppo_steps"] == 0
        assert s["tad_steps"] == SMALL.epochs * math.ceil(SMALL.n_steps / SMALL.minibatch_size)


def test_mixed_training_keeps_buffer_frozen():
    buf = quad_buffer()
    digest = buf.digest()
    _, curve = train_tadpo([QuadraticEnv()], buf, TadpoConfig(ppo=SMALL), 1, spec=SPEC)
    assert buf.digest() == digest
    assert sum(s["tad_steps"] for s in curve) > 0 and sum(s["ppo_steps"] for s in curve) > 0
    assert {"gated_frac", "clipped_frac", "mean_delta"} <= set(curve[0])


def test_mismatched_buffer_is_rejected():
    rng = np.random.default_rng(0)
    bad = TeacherBuffer(rng.standard_normal((4, 7)), rng.standard_normal((4, 3)), rng.standard_normal((4, 2)),
                        *(np.zeros(4) for _ in range(6)))
    with pytest.raises(ValueError):
        train_tadpo([QuadraticEnv()], bad, TadpoConfig(ppo=SMALL), 0, spec=SPEC)


def test_config_defaults():
    c = TadpoConfig()
    assert (c.epsilon_mu, c.teacher_prob, c.entropy_coef) == (0.5, 0.5, 0.001)
    with pytest.raises(ValueError):
        TadpoConfig(teacher_prob=1.5)
