import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from saclab.envs import (CartPoleParams, ReachParams, cartpole_energy, cartpole_integrate,
                         default_params, env_reset, env_step, make_params, reach_integrate, reward)
from saclab.errors import ConfigError, UsageError

CP = CartPoleParams()
RP = ReachParams()


def test_reset_is_deterministic_and_bounded():
    a = env_reset("cartpole", CP, 7)
    b = env_reset("cartpole", CP, 7)
    np.testing.assert_array_equal(a.observation, b.observation)
    assert np.all(np.abs(a.observation) <= 0.01)
    assert not a.done and a.step_index == 0
    assert np.array_equal(a.goal, np.zeros(4))
    assert a.init_log_density == pytest.approx(-4 * math.log(0.02))


def test_reach_reset_goal_is_uniform_on_the_box():
    rng = np.random.default_rng(0)
    goals = np.array([env_reset("reach", RP, rng).goal for _ in range(10_000)])
    sigma = 1.0 / math.sqrt(3.0)  # std of U(-1, 1)
    assert np.all(np.abs(goals.mean(axis=0)) < 3 * sigma / math.sqrt(len(goals)))
    assert np.all(np.abs(goals) <= 1.0)
    s = env_reset("reach", RP, 1)
    assert not s.observation.any()


def test_unknown_env_rejected():
    with pytest.raises(ConfigError):
        env_reset("pong", CP, 0)
    with pytest.raises(ConfigError):
        default_params("pong")


def test_param_invariants():
    with pytest.raises(ConfigError):
        make_params("cartpole", dt=0.0)
    with pytest.raises(ConfigError):
        make_params("cartpole", angle_limit=2.0)
    with pytest.raises(ConfigError):
        make_params("reach", success_radius=1.5)
    with pytest.raises(ConfigError):
        make_params("reach", reward_mode="shaped")


def test_equilibrium_is_stationary():
    s = env_reset("cartpole", CP, 0)
    s.observation = np.zeros(4)
    nxt, r, done = env_step(s, np.zeros(1), CP)
    assert np.array_equal(nxt.observation, np.zeros(4))
    assert r == 1.0 and done is False


def test_one_step_hand_evaluation():
    s = env_reset("cartpole", CP, 0)
    s.observation = np.array([0.0, 0.0, 0.1, 0.0])
    nxt, _, _ = env_step(s, np.zeros(1), CP)
    want = [-2.847132606419937e-05, -0.0014235663032099684, 0.10062951412192066,
            0.03147570609603252]
    np.testing.assert_allclose(nxt.observation, want, rtol=0, atol=1e-9)


def test_energy_drift_per_step_is_second_order():
    s = np.array([0.0, 0.2, 0.1, 0.3])

    def drift(dt):
        one = cartpole_integrate(s, 0.0, CP, dt)
        ref = s.copy()
        for _ in range(10):
            ref = cartpole_integrate(ref, 0.0, CP, dt / 10)
        return abs(cartpole_energy(one, CP) - cartpole_energy(ref, CP))

    d1, d2 = drift(0.02), drift(0.01)
    assert d1 < 0.5 * 0.02**2
    assert 3.0 < d1 / d2 < 5.0


@settings(max_examples=50, deadline=None)
@given(v=st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_reach_contraction(v):
    s = np.concatenate([np.zeros(3), v])
    for _ in range(5):
        nxt = reach_integrate(s, np.zeros(3), RP)
        assert np.linalg.norm(nxt[3:]) <= np.linalg.norm(s[3:])
        s = nxt


def test_rewards():
    g = np.array([0.1, 0.2, 0.3])
    x = np.concatenate([g + [0.5, 0, 0], np.zeros(3)])
    assert reward("reach", np.concatenate([g, np.zeros(3)]), g, RP) == 0.0
    assert reward("reach", x, g, RP) == pytest.approx(-0.5)
    sparse = make_params("reach", reward_mode="sparse")
    assert reward("reach", np.concatenate([g + [0.04, 0, 0], np.zeros(3)]), g, sparse) == 0.0
    assert reward("reach", x, g, sparse) == -1.0
    assert reward("cartpole", np.zeros(4), np.zeros(4), CP) == 1.0
    assert reward("cartpole", [0, 0, 0.3, 0], np.zeros(4), CP) == 0.0


def test_termination_budget_and_usage_error():
    s = env_reset("reach", RP, 3)
    g0 = s.goal.copy()
    for _ in range(RP.max_steps):
        s, _, done = env_step(s, np.ones(3) * 5.0, RP)  # clamped, never terminates early
        assert np.array_equal(s.goal, g0)
    assert done and not s.terminated and s.step_index == RP.max_steps
    with pytest.raises(UsageError):
        env_step(s, np.zeros(3), RP)
    c = env_reset("cartpole", CP, 0)
    c.observation = np.array([0.0, 0.0, 0.19, 2.0])
    c, r, done = env_step(c, np.zeros(1), CP)
    assert done and c.terminated and r == 0.0


def test_action_clamping():
    s = env_reset("reach", RP, 0)
    a, _, _ = env_step(s, np.array([9.0, -9.0, 0.5]), RP)
    b, _, _ = env_step(s, np.array([1.0, -1.0, 0.5]), RP)
    np.testing.assert_array_equal(a.observation, b.observation)
