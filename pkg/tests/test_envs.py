import math

import numpy as np
import pytest
from scipy import stats

from src.envs import (
    LinearGaussianChain,
    PixelGrid,
    PixelGridState,
    chain_step,
    pixelgrid_reset,
    pixelgrid_step,
    render_observation,
    truncation_horizon,
)
from src.errors import DimensionMismatchError, EpisodeFinishedError

"""
Юнит-тесты сред PixelGrid и LinearGaussianChain
"""


class TestPixelGridReset:
    """Сброс и отрисовка."""

    def test_same_seed_same_obs(self):
        _, first = pixelgrid_reset(np.random.default_rng(5))
        _, second = pixelgrid_reset(np.random.default_rng(5))
        assert np.array_equal(first, second)

    def test_rendering_contract(self):
        for seed in range(50):
            _, obs = pixelgrid_reset(np.random.default_rng(seed))
            assert obs.shape == (64,)
            assert np.count_nonzero(obs == 0.6) == 1
            assert np.count_nonzero(obs == 0.3) == 1
            assert np.count_nonzero(obs == 0.0) == 62

    def test_agent_never_on_goal(self):
        rng = np.random.default_rng(0)
        for _ in range(2000):
            state, _ = pixelgrid_reset(rng, grid=3)
            assert state.agent_pos != state.goal_pos

    def test_uniform_start(self):
        """10^4 сбросов: гистограмма позиций согласуется с равномерной (χ²)."""
        rng = np.random.default_rng(123)
        counts = np.zeros(64, dtype=int)
        for _ in range(10_000):
            state, _ = pixelgrid_reset(rng)
            counts[state.agent_pos[0] * 8 + state.agent_pos[1]] += 1
        assert counts[63] == 0
        assert stats.chisquare(counts[:63]).pvalue > 1e-3

    def test_custom_goal(self):
        state, obs = pixelgrid_reset(np.random.default_rng(1), grid=4, goal=(0, 0))
        assert state.goal_pos == (0, 0)
        assert obs[0] == 0.3


class TestPixelGridStep:
    """Шаг среды."""

    def test_reaching_goal(self):
        state = PixelGridState(agent_pos=(7, 6), goal_pos=(7, 7))
        transition = pixelgrid_step(state, 3)
        assert transition.reward == 1.0
        assert transition.done
        assert state.agent_pos == (7, 7)

    def test_wall(self):
        state = PixelGridState(agent_pos=(0, 0), goal_pos=(7, 7))
        transition = pixelgrid_step(state, 0)
        assert state.agent_pos == (0, 0)
        assert transition.reward == -0.01
        assert not transition.done
        assert np.array_equal(transition.obs, transition.next_obs)

    def test_horizon(self):
        state = PixelGridState(agent_pos=(0, 0), goal_pos=(7, 7), horizon=3)
        results = [pixelgrid_step(state, 4) for _ in range(3)]
        assert [t.done for t in results] == [False, False, True]

    def test_step_after_done(self):
        state = PixelGridState(agent_pos=(7, 6), goal_pos=(7, 7))
        pixelgrid_step(state, 3)
        with pytest.raises(EpisodeFinishedError):
            pixelgrid_step(state, 4)

    def test_invalid_action(self):
        state = PixelGridState(agent_pos=(0, 0), goal_pos=(7, 7))
        with pytest.raises(ValueError):
            pixelgrid_step(state, 5)

    def test_obs_is_rendered_state(self):
        state = PixelGridState(agent_pos=(2, 3), goal_pos=(7, 7))
        transition = pixelgrid_step(state, 1)
        assert np.array_equal(transition.next_obs, render_observation(state))
        assert transition.next_obs[3 * 8 + 3] == 0.6

    def test_random_episode_return_range(self):
        env = PixelGrid(seed=0)
        rng = np.random.default_rng(1)
        r_min, r_max = env.return_range
        assert (r_min, r_max) == pytest.approx((-0.64, 1.0))
        for _ in range(200):
            env.reset()
            total, done = 0.0, False
            while not done:
                transition = env.step(int(rng.integers(5)))
                total += transition.reward
                done = transition.done
            assert r_min - 1e-9 <= total <= r_max


class TestPixelGridWrapper:
    """Обёртка PixelGrid."""

    def test_reset_seed_reproducible(self):
        env = PixelGrid()
        assert np.array_equal(env.reset(seed=3), env.reset(seed=3))

    def test_step_before_reset(self):
        with pytest.raises(EpisodeFinishedError):
            PixelGrid().step(0)

    def test_shape_properties(self):
        env = PixelGrid(grid=5)
        assert env.obs_dim == 25
        assert env.n_actions == 5
        assert env.env_id == "pixelgrid-5x5"

    def test_sample_observations(self):
        obs = PixelGrid().sample_observations(20, np.random.default_rng(0))
        assert obs.shape == (20, 64)
        assert obs.min() >= 0.0 and obs.max() <= 0.6


class TestLinearGaussianChain:
    """Цепь с гауссовым шумом."""

    def test_fixed_point(self):
        env = LinearGaussianChain(dim=2, action_gain=0.0, noise_std=1e-12, goal=np.array([0.4, 0.7]))
        s = np.array([0.4, 0.7])
        next_state, reward = chain_step(env, s, np.array([3.0, -3.0]), np.random.default_rng(0))
        assert reward == env.r_max
        np.testing.assert_allclose(next_state, s, atol=1e-10)

    def test_half_reward(self):
        env = LinearGaussianChain(dim=2, goal=np.array([0.1, 0.5]), r_max=2.0)
        s = np.array([0.1 + math.sqrt(math.log(2.0)), 0.5])
        assert env.reward(s) == pytest.approx(1.0, abs=1e-12)

    def test_reward_bounds(self):
        env = LinearGaussianChain(dim=3, goal=0.5)
        rewards = env.reward(np.random.default_rng(0).random((1000, 3)))
        assert np.all(rewards > 0.0) and np.all(rewards <= env.r_max)

    def test_next_state_clipped(self):
        env = LinearGaussianChain(dim=2, action_gain=1.0, noise_std=0.5)
        rng = np.random.default_rng(4)
        s = rng.random((500, 2))
        next_state, _ = chain_step(env, s, rng.normal(0, 3, (500, 2)), rng)
        assert next_state.min() >= 0.0 and next_state.max() <= 1.0

    def test_pre_clip_marginal(self):
        """При a ~ N(f, σ_f²) доклиппинговое s' ~ N(s + c·f, c²σ_f² + σ_e²): проверка Колмогорова–Смирнова."""
        env = LinearGaussianChain(dim=1, action_gain=0.1, noise_std=0.05, goal=0.5)
        rng = np.random.default_rng(2024)
        n, f, sigma_f = 100_000, 0.5, 1.0
        s = np.full((n, 1), 0.5)
        a = f + sigma_f * rng.standard_normal((n, 1))
        next_state, _ = chain_step(env, s, a, rng)
        result = stats.kstest(next_state[:, 0], "norm", args=(0.5 + 0.1 * f, env.kernel_std(sigma_f)))
        assert result.pvalue > 1e-3

    def test_kernel_std(self):
        env = LinearGaussianChain(action_gain=0.3, noise_std=0.4)
        assert env.kernel_std(1.0) == pytest.approx(0.5)

    def test_dimension_mismatch(self):
        env = LinearGaussianChain(dim=2)
        with pytest.raises(DimensionMismatchError):
            chain_step(env, np.zeros(3), np.zeros(3), np.random.default_rng(0))

    @pytest.mark.parametrize(
        "kwargs",
        [{"noise_std": 0.0}, {"gamma": 1.0}, {"r_max": 0.0}, {"goal": 1.5}],
    )
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ValueError):
            LinearGaussianChain(**kwargs)

    @pytest.mark.parametrize("dim", [1, 3])
    def test_default_goal_follows_dim(self, dim):
        env = LinearGaussianChain(dim=dim)
        assert env.goal.shape == (dim,)
        assert np.all(env.goal == 0.5)
        next_state, reward = chain_step(env, np.full(dim, 0.5), np.zeros(dim), np.random.default_rng(0))
        assert next_state.shape == (dim,)
        assert 0.0 < reward <= env.r_max

    def test_default_horizon(self):
        env = LinearGaussianChain(gamma=0.9)
        assert env.horizon == truncation_horizon(0.9)


class TestTruncationHorizon:
    """Горизонт усечения."""

    @pytest.mark.parametrize("gamma", [0.5, 0.9, 0.99])
    def test_tail_below_tolerance(self, gamma):
        horizon = truncation_horizon(gamma)
        assert gamma ** horizon <= 1e-6
        assert gamma ** (horizon - 1) > 1e-6

    def test_known_value(self):
        assert truncation_horizon(0.9) == 132

    def test_zero_gamma(self):
        assert truncation_horizon(0.0) == 1
