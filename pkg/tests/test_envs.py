"""Tests for the toy environments, scripted experts, and trembling wrapper."""

import numpy as np
import pytest

from mimicplan.envs import (
    PendulumSwingUp,
    PointMass2D,
    TremblingEnv,
    expert_action,
    make_env,
)

PM_EXPERT_REFERENCE = -2.896591  # mean return, 100 seeded episodes (seeds 0..99)


def run_episode(env, policy, rng):
    s = env.reset(rng)
    total, steps = 0.0, 0
    for t in range(env.spec.episode_len):
        res = env.step(s, policy(s), step_index=t)
        total += res.ground_truth_reward
        steps += 1
        s = res.next_state
        if res.done:
            break
    return total, steps, s


class TestPointMassStep:
    def setup_method(self):
        self.env = PointMass2D()

    def test_spec_fields(self):
        assert self.env.spec.obs_dim == 4
        assert self.env.spec.act_dim == 2
        assert self.env.spec.episode_len == 100
        assert self.env.spec.dt == 0.05

    def test_one_step_from_origin(self):
        res = self.env.step(np.zeros(4), np.array([1.0, 1.0]))
        np.testing.assert_allclose(res.next_state[:2], [0.0025, 0.0025], rtol=1e-15)
        np.testing.assert_allclose(res.next_state[2:], [0.05, 0.05], rtol=1e-15)
        expect_r = -float(np.linalg.norm(np.array([0.0025, 0.0025]) - 1.0))
        np.testing.assert_allclose(res.ground_truth_reward, expect_r, rtol=1e-15)

    def test_reward_zero_at_goal_at_rest(self):
        s = np.array([1.0, 1.0, 0.0, 0.0])
        res = self.env.step(s, np.zeros(2))
        np.testing.assert_allclose(res.ground_truth_reward, 0.0, atol=1e-12)

    def test_zero_action_from_rest_keeps_position(self):
        s = np.array([0.3, -0.2, 0.0, 0.0])
        res = self.env.step(s, np.zeros(2))
        np.testing.assert_allclose(res.next_state[:2], s[:2])
        np.testing.assert_allclose(res.next_state[2:], 0.0)

    def test_actions_clipped_to_box(self):
        res_big = self.env.step(np.zeros(4), np.array([10.0, 10.0]))
        res_one = self.env.step(np.zeros(4), np.array([1.0, 1.0]))
        np.testing.assert_allclose(res_big.next_state, res_one.next_state)

    def test_deterministic(self):
        s = np.array([0.5, 0.7, 0.1, -0.1])
        a = np.array([0.3, -0.8])
        r1 = self.env.step(s, a)
        r2 = self.env.step(s, a)
        assert np.array_equal(r1.next_state, r2.next_state)
        assert r1.ground_truth_reward == r2.ground_truth_reward

    def test_done_only_at_horizon(self):
        assert not self.env.step(np.zeros(4), np.zeros(2), step_index=0).done
        assert not self.env.step(np.zeros(4), np.zeros(2), step_index=98).done
        assert self.env.step(np.zeros(4), np.zeros(2), step_index=99).done

    def test_rewards_bounded_on_seeded_rollouts(self):
        rng = np.random.default_rng(0)
        for ep in range(5):
            s = self.env.reset(np.random.default_rng(ep))
            for t in range(100):
                res = self.env.step(s, rng.uniform(-1, 1, 2), step_index=t)
                assert -np.sqrt(8.0) <= res.ground_truth_reward <= 0.0
                s = res.next_state


class TestPendulumStep:
    def setup_method(self):
        self.env = PendulumSwingUp()

    def test_spec_fields(self):
        assert self.env.spec.obs_dim == 3
        assert self.env.spec.act_dim == 1
        assert self.env.spec.episode_len == 200

    def test_upright_rest_zero_torque_reward(self):
        s = np.array([1.0, 0.0, 0.0])
        res = self.env.step(s, np.zeros(1))
        np.testing.assert_allclose(res.ground_truth_reward, 0.0, atol=1e-12)

    def test_hanging_rest_reward(self):
        s = np.array([np.cos(np.pi), np.sin(np.pi), 0.0])
        res = self.env.step(s, np.zeros(1))
        np.testing.assert_allclose(res.ground_truth_reward, -np.pi**2, rtol=1e-12)

    def test_one_step_from_horizontal(self):
        s = np.array([np.cos(np.pi / 2), np.sin(np.pi / 2), 0.0])
        res = self.env.step(s, np.zeros(1))
        np.testing.assert_allclose(res.next_state[2], 0.735, rtol=1e-12)

    def test_observation_on_unit_circle(self):
        rng = np.random.default_rng(1)
        s = self.env.reset(rng)
        for t in range(50):
            res = self.env.step(s, rng.uniform(-1, 1, 1), step_index=t)
            s = res.next_state
            np.testing.assert_allclose(s[0] ** 2 + s[1] ** 2, 1.0, rtol=1e-12)

    def test_speed_clamped(self):
        s = np.array([np.cos(np.pi / 2), np.sin(np.pi / 2), 7.9])
        for _ in range(20):
            s = self.env.step(s, np.ones(1)).next_state
        assert abs(s[2]) <= 8.0

    def test_rewards_bounded(self):
        lo = -(np.pi**2 + 0.1 * 64 + 0.001 * 4)
        rng = np.random.default_rng(2)
        s = self.env.reset(rng)
        for t in range(200):
            res = self.env.step(s, rng.uniform(-1, 1, 1), step_index=t)
            assert lo <= res.ground_truth_reward <= 0.0
            s = res.next_state


class TestExperts:
    def test_pointmass_expert_at_goal_is_zero(self):
        a = expert_action("pointmass", np.array([1.0, 1.0, 0.0, 0.0]))
        np.testing.assert_allclose(a, 0.0, atol=1e-12)

    def test_pointmass_expert_is_clipped_pd(self):
        s = np.array([0.0, 0.0, 0.5, -0.5])
        a = expert_action("pointmass", s)
        raw = 5.0 * (np.ones(2) - s[:2]) - 2.0 * s[2:]
        np.testing.assert_allclose(a, np.clip(raw, -1, 1))

    def test_pendulum_expert_upright_is_zero(self):
        a = expert_action("pendulum", np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(a, 0.0, atol=1e-12)

    def test_unknown_env_rejected(self):
        with pytest.raises(ValueError):
            expert_action("cartpole", np.zeros(4))

    def test_pointmass_reference_return(self):
        env = PointMass2D()
        rets = [
            run_episode(env, lambda s: expert_action("pointmass", s), np.random.default_rng(i))[0]
            for i in range(100)
        ]
        mean = float(np.mean(rets))
        assert mean >= -8.0
        np.testing.assert_allclose(mean, PM_EXPERT_REFERENCE, atol=1e-5)

    def test_pendulum_expert_swings_up_and_holds(self):
        env = PendulumSwingUp()
        for seed in range(5):
            _, _, s_final = run_episode(
                env, lambda s: expert_action("pendulum", s), np.random.default_rng(seed)
            )
            theta = np.arctan2(s_final[1], s_final[0])
            assert abs(theta) < 0.05
            assert abs(s_final[2]) < 0.5

    def test_experts_beat_random_by_3x(self):
        for env_id in ("pointmass", "pendulum"):
            env = make_env(env_id)
            exp, rnd = [], []
            for i in range(20):
                exp.append(
                    run_episode(env, lambda s: expert_action(env_id, s), np.random.default_rng(i))[0]
                )
                act_rng = np.random.default_rng(10_000 + i)
                rnd.append(
                    run_episode(
                        env,
                        lambda s: act_rng.uniform(-1, 1, env.spec.act_dim),
                        np.random.default_rng(i),
                    )[0]
                )
            assert abs(np.mean(rnd)) / abs(np.mean(exp)) >= 3.0


class TestTrembling:
    def test_probability_bounds_validated(self):
        with pytest.raises(ValueError):
            TremblingEnv(PointMass2D(), 1.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            TremblingEnv(PointMass2D(), -0.1, np.random.default_rng(0))

    def test_p_zero_identical_to_inner(self):
        inner = PointMass2D()
        wrapped = TremblingEnv(inner, 0.0, np.random.default_rng(0))
        s = np.array([0.2, 0.3, 0.1, 0.0])
        a = np.array([0.5, -0.5])
        r_in = inner.step(s, a)
        r_wr = wrapped.step(s, a)
        assert np.array_equal(r_in.next_state, r_wr.next_state)
        assert r_in.ground_truth_reward == r_wr.ground_truth_reward
        assert wrapped.n_replaced == 0

    def test_p_one_always_replaces(self):
        wrapped = TremblingEnv(PointMass2D(), 0.999999, np.random.default_rng(0))
        s = np.zeros(4)
        for _ in range(100):
            wrapped.step(s, np.zeros(2))
        assert wrapped.n_replaced == 100

    def test_replacement_count_binomial(self):
        n, p = 10_000, 0.02
        wrapped = TremblingEnv(PointMass2D(), p, np.random.default_rng(7))
        s = np.zeros(4)
        for _ in range(n):
            wrapped.step(s, np.zeros(2))
        sigma = np.sqrt(n * p * (1 - p))
        assert abs(wrapped.n_replaced - n * p) <= 3 * sigma

    def test_spec_delegates(self):
        wrapped = TremblingEnv(PendulumSwingUp(), 0.1, np.random.default_rng(0))
        assert wrapped.spec.env_id == "pendulum"


class TestMakeEnv:
    def test_factory(self):
        assert isinstance(make_env("pointmass"), PointMass2D)
        assert isinstance(make_env("pendulum"), PendulumSwingUp)
        with pytest.raises(ValueError):
            make_env("walker")

    def test_reset_distributions(self):
        pm = make_env("pointmass")
        starts = np.stack([pm.reset(np.random.default_rng(i)) for i in range(200)])
        assert np.all(np.abs(starts[:, :2] - 1.0) <= 0.3)
        np.testing.assert_allclose(starts[:, 2:], 0.0)
        pend = make_env("pendulum")
        s = np.stack([pend.reset(np.random.default_rng(i)) for i in range(200)])
        thetas = np.arctan2(s[:, 1], s[:, 0])
        assert np.all(np.abs(np.abs(thetas) - np.pi) <= 0.1 + 1e-12)
        assert np.all(np.abs(s[:, 2]) <= 0.05)
