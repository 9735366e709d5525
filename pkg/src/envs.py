"""
Настольные среды: PixelGrid (дискретные действия, «картинка» в наблюдении)
и LinearGaussianChain (непрерывные действия, аналитическое ядро переходов).
"""
import math
from dataclasses import dataclass

import numpy as np

from src.errors import DimensionMismatchError, EpisodeFinishedError
from src.settings import (
    ACTION_DELTAS,
    ACTIONS,
    DEFAULT_CHAIN_DIM,
    DEFAULT_CHAIN_GAIN,
    DEFAULT_CHAIN_GAMMA,
    DEFAULT_CHAIN_GOAL,
    DEFAULT_CHAIN_NOISE,
    DEFAULT_CHAIN_R_MAX,
    DEFAULT_GRID,
    DEFAULT_HORIZON,
    DEFAULT_TAIL_TOLERANCE,
    FLOAT_DTYPE,
    GOAL_REWARD,
    PIXEL_AGENT,
    PIXEL_BACKGROUND,
    PIXEL_GOAL,
    STEP_PENALTY,
)


@dataclass
class PixelGridState:
    agent_pos: tuple[int, int]
    goal_pos: tuple[int, int]
    step_count: int = 0
    grid: int = DEFAULT_GRID
    horizon: int = DEFAULT_HORIZON
    done: bool = False


@dataclass(frozen=True, eq=False)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    env_index: int = 0

    def same_as(self, other: "Transition") -> bool:
        '''Побитовое сравнение переходов.'''
        return (
            np.array_equal(self.obs, other.obs)
            and self.action == other.action
            and self.reward == other.reward
            and np.array_equal(self.next_obs, other.next_obs)
            and self.done == other.done
            and self.env_index == other.env_index
        )


def render_observation(state: PixelGridState) -> np.ndarray:
    obs = np.full((state.grid, state.grid), PIXEL_BACKGROUND, dtype=FLOAT_DTYPE)
    obs[state.goal_pos] = PIXEL_GOAL
    obs[state.agent_pos] = PIXEL_AGENT
    return obs.reshape(-1)


def pixelgrid_reset(
    rng: np.random.Generator,
    grid: int = DEFAULT_GRID,
    horizon: int = DEFAULT_HORIZON,
    goal: tuple[int, int] | None = None,
) -> tuple[PixelGridState, np.ndarray]:
    '''Агент в равномерно выбранной клетке, отличной от цели.'''
    goal_pos = goal if goal is not None else (grid - 1, grid - 1)
    goal_index = goal_pos[0] * grid + goal_pos[1]
    cell = int(rng.integers(grid * grid - 1))
    if cell >= goal_index:
        cell += 1
    state = PixelGridState(
        agent_pos=(cell // grid, cell % grid),
        goal_pos=tuple(goal_pos),
        grid=grid,
        horizon=horizon,
    )
    return state, render_observation(state)


def pixelgrid_step(state: PixelGridState, action: int) -> Transition:
    '''Один шаг: движение с упором в стены, награда +1 за цель и -0.01 иначе.'''
    if state.done:
        raise EpisodeFinishedError("шаг после завершения эпизода")
    if action not in ACTION_DELTAS:
        raise ValueError(f"недопустимое действие {action}, ожидалось 0..{len(ACTIONS) - 1}")

    obs = render_observation(state)
    d_row, d_col = ACTION_DELTAS[action]
    row = min(max(state.agent_pos[0] + d_row, 0), state.grid - 1)
    col = min(max(state.agent_pos[1] + d_col, 0), state.grid - 1)
    state.agent_pos = (row, col)
    state.step_count += 1

    reached = state.agent_pos == state.goal_pos
    reward = GOAL_REWARD if reached else STEP_PENALTY
    state.done = reached or state.step_count >= state.horizon

    return Transition(obs=obs, action=int(action), reward=reward, next_obs=render_observation(state), done=state.done)


class PixelGrid:
    '''Среда-обёртка с собственным потоком случайных чисел.'''

    def __init__(
        self,
        grid: int = DEFAULT_GRID,
        horizon: int = DEFAULT_HORIZON,
        goal: tuple[int, int] | None = None,
        seed: int | np.random.SeedSequence | None = None,
    ):
        self.grid = grid
        self.horizon = horizon
        self.goal = goal
        self.rng = np.random.default_rng(seed)
        self.state: PixelGridState | None = None

    @property
    def env_id(self) -> str:
        return f"pixelgrid-{self.grid}x{self.grid}"

    @property
    def obs_dim(self) -> int:
        return self.grid * self.grid

    @property
    def n_actions(self) -> int:
        return len(ACTIONS)

    @property
    def return_range(self) -> tuple[float, float]:
        return STEP_PENALTY * self.horizon, GOAL_REWARD

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state, obs = pixelgrid_reset(self.rng, self.grid, self.horizon, self.goal)
        return obs

    def step(self, action: int) -> Transition:
        if self.state is None:
            raise EpisodeFinishedError("среда не сброшена")
        return pixelgrid_step(self.state, action)

    def sample_observations(self, n: int, rng: np.random.Generator) -> np.ndarray:
        '''n чистых наблюдений из распределения сброса.'''
        return np.stack([pixelgrid_reset(rng, self.grid, self.horizon, self.goal)[1] for _ in range(n)])


@dataclass(frozen=True, eq=False)
class LinearGaussianChain:
    '''
    s' = clip(s + c·a + ε, 0, 1), ε ~ N(0, σ_e² I); r(s) = r_max·exp(-||s - g||²).
    '''
    dim: int = DEFAULT_CHAIN_DIM
    action_gain: float = DEFAULT_CHAIN_GAIN
    noise_std: float = DEFAULT_CHAIN_NOISE
    goal: np.ndarray | float | None = None
    r_max: float = DEFAULT_CHAIN_R_MAX
    gamma: float = DEFAULT_CHAIN_GAMMA
    horizon: int | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim должна быть положительной")
        raw_goal = DEFAULT_CHAIN_GOAL if self.goal is None else self.goal
        goal = np.broadcast_to(np.asarray(raw_goal, dtype=FLOAT_DTYPE), (self.dim,)).copy()
        if self.noise_std <= 0:
            raise ValueError("noise_std должен быть положительным")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma должен лежать в [0, 1)")
        if self.r_max <= 0:
            raise ValueError("r_max должен быть положительным")
        if np.any(goal < 0.0) or np.any(goal > 1.0):
            raise ValueError("цель должна лежать в [0, 1]^d")
        object.__setattr__(self, "goal", goal)
        if self.horizon is None:
            object.__setattr__(self, "horizon", truncation_horizon(self.gamma))

    @property
    def env_id(self) -> str:
        return f"chain-d{self.dim}"

    def reward(self, s: np.ndarray) -> np.ndarray | float:
        return self.r_max * np.exp(-np.sum((np.asarray(s) - self.goal) ** 2, axis=-1))

    def initial_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.dim))

    def kernel_std(self, sigma_f: float) -> float:
        '''Стандартное отклонение ядра до клиппинга при a ~ N(f(s), σ_f²).'''
        return math.sqrt(self.action_gain ** 2 * sigma_f ** 2 + self.noise_std ** 2)


def truncation_horizon(gamma: float, tail: float = DEFAULT_TAIL_TOLERANCE) -> int:
    '''Минимальное T с γ^T ≤ tail.'''
    if gamma <= 0.0:
        return 1
    return max(1, math.ceil(math.log(tail) / math.log(gamma)))


def chain_step(
    env: LinearGaussianChain,
    s: np.ndarray,
    a: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | float]:
    '''Шаг цепи для состояния (d,) или пакета (B, d). Награда зависит только от s.'''
    s = np.asarray(s, dtype=FLOAT_DTYPE)
    a = np.asarray(a, dtype=FLOAT_DTYPE)
    if s.shape[-1] != env.dim or a.shape != s.shape:
        raise DimensionMismatchError("состояние/действие цепи", (env.dim,), (s.shape, a.shape))

    reward = env.reward(s)
    noise = env.noise_std * rng.standard_normal(s.shape)
    next_state = np.clip(s + env.action_gain * a + noise, 0.0, 1.0)
    return next_state, reward
