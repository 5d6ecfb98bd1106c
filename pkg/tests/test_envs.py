import numpy as np
import pytest

from pombu.envs import (
    CHAIN_TERMINAL,
    PointEnv,
    build_chain_posterior,
    chain_state,
    make_env,
    point_step,
    uniform_policy,
    wrap_noisy,
)
from pombu.posterior import mean_mdp


class TestChain:
    def test_horizon_one(self):
        ens = build_chain_posterior(1)
        assert ens.num_states == 3
        s1, s0 = chain_state(1), chain_state(0)
        assert ens.next_state[1, s1, 1] == s0
        assert ens.reward[1, s1, 1] == 1.0

    def test_first_member_always_terminates(self):
        ens = build_chain_posterior(5)
        assert np.all(ens.next_state[0] == CHAIN_TERMINAL)
        assert np.all(ens.reward[0] == 0.0)

    def test_second_member_only_moves_on_second_action(self):
        ens = build_chain_posterior(5)
        assert np.all(ens.next_state[1, :, 0] == CHAIN_TERMINAL)
        assert ens.next_state[1, chain_state(0), 1] == CHAIN_TERMINAL

    def test_terminal_absorbing(self):
        m = mean_mdp(build_chain_posterior(3))
        assert np.all(m.transition[CHAIN_TERMINAL, :, CHAIN_TERMINAL] == 1.0)
        assert np.all(m.reward[CHAIN_TERMINAL] == 0.0)

    def test_default_start_is_farthest_state(self):
        ens = build_chain_posterior(4)
        assert ens.initial_dist[chain_state(4)] == 1.0
        assert build_chain_posterior(4, initial_state=chain_state(2)).initial_dist[chain_state(2)] == 1.0

    def test_zero_horizon_rejected(self):
        with pytest.raises(ValueError):
            build_chain_posterior(0)

    def test_uniform_policy(self):
        ens = build_chain_posterior(2)
        np.testing.assert_array_equal(uniform_policy(ens).probs, 0.5)


class TestPoint:
    def test_origin_fixed_point(self):
        s, r = point_step(PointEnv(), np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(s, 0.0)
        assert r == 0.0

    def test_arithmetic(self):
        s, r = point_step(PointEnv(), np.array([1.0, 0.0]), np.array([-0.1, 0.0]))
        np.testing.assert_allclose(s, [0.9, 0.0])
        assert r == pytest.approx(-0.81)

    def test_clamping(self):
        s, _ = point_step(PointEnv(), np.zeros(2), np.array([0.5, 0.0]))
        np.testing.assert_array_equal(s, [0.1, 0.0])

    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            PointEnv(dim=4)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_return_lower_bound(self, dim):
        env = PointEnv(dim=dim)
        rng = np.random.default_rng(0)
        s = env.reset(rng, 2000)
        s[:4] = 2.0  # corners, pushed outward below
        total = np.zeros(len(s))
        for _ in range(env.horizon):
            a = np.where(rng.random(s.shape) < 0.5, np.sign(s) * 0.1, rng.uniform(-1, 1, s.shape))
            s, r = env.step(s, a)
            total += r
        max_norm = 2.0 * np.sqrt(dim)
        assert np.all(total >= -env.horizon * (max_norm + 0.1 * env.horizon) ** 2)
        assert np.all(total <= 0.0)


class TestNoise:
    def test_zero_sigma_identity(self):
        env = wrap_noisy(PointEnv(), 0.0, seed=1)
        s = np.random.default_rng(0).normal(size=(10, 2))
        np.testing.assert_array_equal(env.observe(s), s)

    def test_noise_scale(self):
        env = wrap_noisy(PointEnv(), 0.1, seed=3)
        s = np.zeros((100_000, 2))
        noise = env.observe(s) - s
        n = noise.shape[0]
        for c in range(2):
            assert abs(noise[:, c].std() - 0.1) < 3 * 0.1 / np.sqrt(2 * n)

    def test_same_seed_same_noise(self):
        s = np.ones((5, 2))
        a, b = wrap_noisy(PointEnv(), 0.2, seed=7), wrap_noisy(PointEnv(), 0.2, seed=7)
        np.testing.assert_array_equal(a.observe(s), b.observe(s))

    def test_dynamics_unchanged(self):
        env = wrap_noisy(PointEnv(), 0.5, seed=0)
        s, r = env.step(np.array([1.0, 0.0]), np.array([-0.1, 0.0]))
        np.testing.assert_allclose(s, [0.9, 0.0])
        assert r == pytest.approx(-0.81)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            wrap_noisy(PointEnv(), -0.1)


def test_make_env():
    assert make_env("point3d").state_dim == 3
    assert hasattr(make_env("point2d", noise_sigma=0.1), "sigma")
    with pytest.raises(ValueError):
        make_env("ant")
