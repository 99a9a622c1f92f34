import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmaug.envs import (
    PointMass2D,
    ReferenceScores,
    calibrate_references,
    make_env,
    rollout_returns,
    uniform_random_policy,
    wrap_angle,
)
from conftest import swing_up
from wmaug.errors import CalibrationError, ConfigError, FormatError, NumericError


def test_unknown_env():
    with pytest.raises(ConfigError):
        make_env("hopper")


@pytest.mark.parametrize("name", ["pendulum", "pointmass"])
def test_reset_is_deterministic(name):
    assert np.array_equal(make_env(name).reset(7), make_env(name).reset(7))
    assert not np.array_equal(make_env(name).reset(7), make_env(name).reset(8))


def test_pendulum_reset_ranges():
    env = make_env("pendulum")
    thetas, speeds = [], []
    for seed in range(10_000):
        env.reset(seed)
        thetas.append(env.state[0])
        speeds.append(env.state[1])
        obs = env.observe()
        assert obs[0] == math.cos(env.state[0]) and obs[1] == math.sin(env.state[0])
    assert -math.pi <= min(thetas) and max(thetas) <= math.pi
    assert -1 <= min(speeds) and max(speeds) <= 1
    # the draws actually cover the ranges
    assert min(thetas) < -3.1 and max(thetas) > 3.1


def test_pointmass_reset():
    env = make_env("pointmass")
    for seed in range(200):
        obs = env.reset(seed)
        assert np.all(np.abs(obs[:2]) <= 1) and np.all(obs[2:] == 0)


def test_pendulum_upright_fixed_point():
    env = make_env("pendulum")
    env.set_state([0.0, 0.0])
    obs, reward, done = env.step([0.0])
    assert reward == 0.0
    assert np.array_equal(env.state, [0.0, 0.0])
    assert np.array_equal(obs, [1.0, 0.0, 0.0])
    assert not done


def test_pendulum_bottom_reward():
    env = make_env("pendulum")
    env.set_state([math.pi, 0.0])
    _, reward, _ = env.step([0.0])
    assert reward == pytest.approx(-math.pi**2)
    assert reward == pytest.approx(-9.8696, abs=1e-4)


def test_pendulum_dynamics_by_hand():
    env = make_env("pendulum")
    th, thdot, u = 0.3, -0.5, 1.5
    env.set_state([th, thdot])
    _, reward, _ = env.step([u])
    new_thdot = thdot + (15.0 * math.sin(th) + 3.0 * u) * 0.05
    assert env.state[1] == pytest.approx(new_thdot)
    assert env.state[0] == pytest.approx(th + new_thdot * 0.05)
    assert reward == pytest.approx(-(th**2 + 0.1 * thdot**2 + 0.001 * u**2))


def test_pendulum_clips_action_before_dynamics():
    a, b = make_env("pendulum"), make_env("pendulum")
    a.set_state([0.5, 0.0])
    b.set_state([0.5, 0.0])
    obs_a, r_a, _ = a.step([10.0])
    obs_b, r_b, _ = b.step([2.0])
    assert np.array_equal(obs_a, obs_b) and r_a == r_b


def test_pointmass_one_step():
    env = make_env("pointmass")
    env.set_state([0.5, 0.0, 0.0, 0.0])
    obs, reward, _ = env.step([-1.0, 0.0])
    # v = 0 + (-1)(0.05); p = 0.5 + v * 0.05
    np.testing.assert_allclose(obs, [0.4975, 0.0, -0.05, 0.0])
    assert reward == pytest.approx(-0.4975 - 0.001)


def test_time_limit_truncation():
    env = make_env("pointmass")
    env.reset(0)
    dones = [env.step([0.0, 0.0])[2] for _ in range(PointMass2D.spec.max_episode_steps)]
    assert dones[-1] and not any(dones[:-1])


def test_non_finite_action():
    env = make_env("pendulum")
    env.reset(0)
    with pytest.raises(NumericError):
        env.step([np.nan])


@pytest.mark.parametrize("name", ["pendulum", "pointmass"])
def test_replay_is_bit_exact(name):
    rng = np.random.default_rng(0)
    spec = make_env(name).spec
    actions = rng.uniform(-3, 3, size=(spec.max_episode_steps, spec.act_dim))

    def run():
        env = make_env(name)
        trace = [env.reset(11)]
        for a in actions:
            obs, r, _ = env.step(a)
            trace.append(np.append(obs, r))
        return trace

    assert all(np.array_equal(x, y) for x, y in zip(run(), run()))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["pendulum", "pointmass"]), st.integers(0, 2**31 - 1),
       st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_rewards_and_states_stay_bounded(name, seed, bias):
    env = make_env(name)
    env.reset(seed)
    rng = np.random.default_rng(seed)
    spec = env.spec
    for _ in range(spec.max_episode_steps):
        a = rng.uniform(-5, 5, size=spec.act_dim) + np.array(bias[: spec.act_dim])
        obs, r, _ = env.step(a)
        assert spec.reward_min <= r <= 0.0
        assert np.all(np.isfinite(obs))
        if name == "pendulum":
            assert abs(obs[2]) <= 8.0
        else:
            assert np.all(np.abs(obs[:2]) <= 2.0) and np.all(np.abs(obs[2:]) <= 1.0)


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle(np.array([0.0, 2 * np.pi + 0.1, -np.pi - 0.1])),
                               [0.0, 0.1, np.pi - 0.1])


class TestReferences:
    def test_random_reference_band(self):
        refs = calibrate_references("pendulum", expert_policy=swing_up, episodes=100, seed=0)
        assert -1700 <= refs.random_ref <= -1000

    def test_random_policy_as_expert_fails(self):
        with pytest.raises(CalibrationError):
            calibrate_references("pointmass", expert_policy="random", episodes=5, seed=3)

    def test_deterministic_and_persisted(self, tmp_path):
        def expert(obs):
            return -np.clip(obs[:, :2] * 5 + obs[:, 2:], -1, 1)

        a = calibrate_references("pointmass", expert, episodes=10, seed=4, out=tmp_path / "r.txt")
        b = calibrate_references("pointmass", expert, episodes=10, seed=4)
        assert a == b
        assert ReferenceScores.load(tmp_path / "r.txt") == a

    def test_episodes_validated(self):
        with pytest.raises(ConfigError):
            calibrate_references("pendulum", expert_policy="random", episodes=0)

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("name=pendulum\nrandom_ref=abc\n")
        with pytest.raises(FormatError):
            ReferenceScores.load(p)


def test_rollout_returns_seeded():
    spec = make_env("pendulum").spec
    r1 = rollout_returns("pendulum", uniform_random_policy(spec, np.random.default_rng(1)), 3, 5)
    r2 = rollout_returns("pendulum", uniform_random_policy(spec, np.random.default_rng(1)), 3, 5)
    assert np.array_equal(r1, r2)
