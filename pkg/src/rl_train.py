"""
Синхронный advantage actor-critic на PixelGrid с подменяемым буфером траекторий.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from src.config import RunConfig
from src.envs import PixelGrid, Transition
from src.errors import DimensionMismatchError, NonFiniteLossError
from src.nn_core import (
    HeadKind,
    PolicyNetwork,
    action_distribution,
    backward,
    build_network,
    forward,
    log_softmax,
    sample_categorical_batch,
    softmax,
)
from src.settings import (
    FLOAT_DTYPE,
    POLICY_OUTPUT_SCALE,
    RETURN_WINDOW,
    RMSPROP_ALPHA,
    RMSPROP_EPS,
)


class RolloutBuffer(Protocol):
    '''
    Контракт буфера: add() сохраняет переход, drain() отдаёт всё накопленное
    в порядке добавления. observe() позволяет буферу подменить наблюдение,
    которое увидит политика.
    '''

    def add(self, transition: Transition) -> None: ...

    def drain(self) -> list[Transition]: ...

    def observe(self, obs: np.ndarray) -> np.ndarray: ...


class BenignRolloutBuffer:

    def __init__(self):
        self._items: list[Transition] = []

    def __len__(self) -> int:
        return len(self._items)

    def observe(self, obs: np.ndarray) -> np.ndarray:
        return obs

    def add(self, transition: Transition) -> None:
        self._items.append(transition)

    def drain(self) -> list[Transition]:
        items, self._items = self._items, []
        return items


BufferFactory = Callable[[], RolloutBuffer]


class EnvPool:
    '''
    n_envs независимых PixelGrid с автосбросом.
    Ведёт журнал наград на стороне среды и доходности завершённых эпизодов.
    '''

    def __init__(self, envs: Sequence[PixelGrid]):
        if not envs:
            raise ValueError("пул сред пуст")
        self.envs = list(envs)
        self.current_obs = [env.reset() for env in self.envs]
        self.running_returns = [0.0] * len(self.envs)
        self.episode_returns: list[float] = []
        self.reward_log: list[float] = []

    @classmethod
    def from_config(cls, config: RunConfig, seed_sequence: np.random.SeedSequence) -> "EnvPool":
        seeds = seed_sequence.spawn(config.train.n_envs)
        envs = [
            PixelGrid(grid=config.env.grid, horizon=config.env.horizon, goal=config.env.goal, seed=seed)
            for seed in seeds
        ]
        return cls(envs)

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    def step(self, index: int, action: int) -> Transition:
        transition = self.envs[index].step(action)
        self.reward_log.append(transition.reward)
        self.running_returns[index] += transition.reward
        if transition.done:
            self.episode_returns.append(self.running_returns[index])
            self.running_returns[index] = 0.0
            self.current_obs[index] = self.envs[index].reset()
        else:
            self.current_obs[index] = transition.next_obs
        return dataclasses.replace(transition, env_index=index)


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float
    clipped: bool


def collect_rollout(
    policy: PolicyNetwork,
    env_pool: EnvPool,
    buffer: RolloutBuffer,
    rollout_len: int,
    rng: np.random.Generator,
) -> None:
    '''
    rollout_len шагов во всех средах пула; в буфер уходит ровно
    n_envs × rollout_len переходов в порядке (шаг, индекс среды).
    '''
    for _ in range(rollout_len):
        observed = np.stack([buffer.observe(obs) for obs in env_pool.current_obs])
        probs = action_distribution(policy, observed).probs
        actions = sample_categorical_batch(probs, rng)
        for index, action in enumerate(actions):
            transition = env_pool.step(index, int(action))
            buffer.add(transition)


def compute_returns_and_advantages(
    transitions: Sequence[Transition],
    value_net: PolicyNetwork,
    gamma: float,
) -> tuple[np.ndarray, np.ndarray]:
    '''
    G_t = r_t + γ·G_{t+1} внутри эпизода; хвост незавершённого эпизода
    достраивается оценкой V(next_obs). Переходы группируются по env_index.
    '''
    n = len(transitions)
    returns = np.zeros(n, dtype=FLOAT_DTYPE)
    if n == 0:
        return returns, np.zeros(0, dtype=FLOAT_DTYPE)

    groups: dict[int, list[int]] = {}
    for position, transition in enumerate(transitions):
        groups.setdefault(transition.env_index, []).append(position)

    for positions in groups.values():
        last = transitions[positions[-1]]
        running = 0.0 if last.done else float(forward(value_net, last.next_obs).output[0])
        for position in reversed(positions):
            transition = transitions[position]
            running = transition.reward + gamma * (0.0 if transition.done else running)
            returns[position] = running

    obs = np.stack([t.obs for t in transitions])
    values = forward(value_net, obs).output[:, 0]
    return returns, returns - values


def build_batch(transitions: Sequence[Transition], value_net: PolicyNetwork, gamma: float) -> RolloutBatch:
    returns, advantages = compute_returns_and_advantages(transitions, value_net, gamma)
    return RolloutBatch(
        obs=np.stack([t.obs for t in transitions]),
        actions=np.asarray([t.action for t in transitions], dtype=np.int64),
        returns=returns,
        advantages=advantages,
    )


def policy_loss_and_grad(
    policy: PolicyNetwork,
    batch: RolloutBatch,
    entropy_coef: float,
) -> tuple[float, float, list[tuple[np.ndarray, np.ndarray]]]:
    '''
    L = -mean(log π(a|s)·adv) - β·mean(H(π(·|s))).
    Возвращает (L, средняя энтропия, градиенты по слоям).
    '''
    trace = forward(policy, batch.obs)
    logits = trace.output
    if logits.ndim != 2 or logits.shape[0] != len(batch):
        raise DimensionMismatchError("логиты пакета", (len(batch), policy.output_dim), logits.shape)

    log_probs = log_softmax(logits)
    probs = softmax(logits)
    rows = np.arange(len(batch))
    entropy = -np.sum(probs * log_probs, axis=-1)
    loss = -np.mean(log_probs[rows, batch.actions] * batch.advantages) - entropy_coef * np.mean(entropy)

    one_hot = np.zeros_like(probs)
    one_hot[rows, batch.actions] = 1.0
    grad_logits = (probs - one_hot) * batch.advantages[:, None]
    grad_logits += entropy_coef * probs * (log_probs + entropy[:, None])
    grad_logits /= len(batch)

    return float(loss), float(np.mean(entropy)), backward(policy, trace, grad_logits)


def value_loss_and_grad(
    value_net: PolicyNetwork,
    batch: RolloutBatch,
    value_coef: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    trace = forward(value_net, batch.obs)
    error = trace.output[:, 0] - batch.returns
    loss = value_coef * np.mean(error ** 2)
    grad_output = (2.0 * value_coef / len(batch)) * error[:, None]
    return float(loss), backward(value_net, trace, grad_output)


def global_grad_norm(grads: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    return float(math.sqrt(sum(float(np.sum(dw * dw) + np.sum(db * db)) for dw, db in grads)))


class SGD:
    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        for param, grad in zip(params, grads):
            param -= lr * grad


@dataclass
class RMSProp:
    '''RMSProp с квадратичным средним на каждый параметр.'''
    alpha: float = RMSPROP_ALPHA
    eps: float = RMSPROP_EPS
    square_avg: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        if not self.square_avg:
            self.square_avg = [np.zeros_like(param) for param in params]
        for param, grad, avg in zip(params, grads, self.square_avg):
            avg *= self.alpha
            avg += (1.0 - self.alpha) * grad * grad
            param -= lr * grad / (np.sqrt(avg) + self.eps)


Optimizer = SGD | RMSProp


def make_optimizer(name: str) -> Optimizer:
    if name == "sgd":
        return SGD()
    if name == "rmsprop":
        return RMSProp()
    raise ValueError(f"неизвестный оптимизатор: {name}")


def _flatten_grads(grads: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    flat = []
    for dw, db in grads:
        flat.extend([dw, db])
    return flat


def a2c_update(
    policy: PolicyNetwork,
    value_net: PolicyNetwork,
    batch: RolloutBatch,
    lr: float,
    entropy_coef: float,
    clip_norm: float,
    value_coef: float = 0.5,
    optimizer: Optimizer | None = None,
) -> UpdateStats:
    '''
    Один шаг по политике и критику. Общая норма градиента обрезается до clip_norm;
    при нечисловых потерях параметры не меняются и поднимается NonFiniteLossError.
    '''
    if len(batch) == 0:
        raise ValueError("пустой пакет")

    policy_loss, entropy, policy_grads = policy_loss_and_grad(policy, batch, entropy_coef)
    value_loss, value_grads = value_loss_and_grad(value_net, batch, value_coef)
    grads = policy_grads + value_grads
    grad_norm = global_grad_norm(grads)

    if not all(math.isfinite(x) for x in (policy_loss, value_loss, entropy, grad_norm)):
        raise NonFiniteLossError(
            "нечисловые потери A2C",
            {
                "policy_loss": policy_loss,
                "value_loss": value_loss,
                "entropy": entropy,
                "grad_norm": grad_norm,
                "max_abs_advantage": float(np.max(np.abs(batch.advantages))),
            },
        )

    clipped = grad_norm > clip_norm
    scale = clip_norm / grad_norm if clipped else 1.0
    params = policy.parameters() + value_net.parameters()
    flat = [g * scale for g in _flatten_grads(grads)]
    (optimizer or SGD()).step(params, flat, lr)

    return UpdateStats(
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=entropy,
        grad_norm=grad_norm,
        clipped=clipped,
    )


@dataclass
class TrainResult:
    policy: PolicyNetwork
    value_net: PolicyNetwork
    curve: list[dict[str, Any]]
    episode_returns: list[float]
    steps: int
    diverged: bool = False
    diagnostics: dict[str, Any] = field(default_factory=dict)
    buffer: Any = None

    @property
    def final_mean_return(self) -> float:
        window = self.episode_returns[-RETURN_WINDOW:]
        return float(np.mean(window)) if window else float("nan")


def init_networks(config: RunConfig, seed_sequence: np.random.SeedSequence) -> tuple[PolicyNetwork, PolicyNetwork]:
    policy_seq, value_seq = seed_sequence.spawn(2)
    obs_dim = config.env.grid * config.env.grid
    hidden = list(config.train.hidden)
    policy = build_network(
        [obs_dim, *hidden, PixelGrid().n_actions],
        HeadKind.CATEGORICAL,
        np.random.default_rng(policy_seq),
        output_scale=POLICY_OUTPUT_SCALE,
    )
    value_net = build_network([obs_dim, *hidden, 1], HeadKind.SCALAR, np.random.default_rng(value_seq))
    return policy, value_net


def _curve_row(step: int, episode_returns: list[float], stats: UpdateStats) -> dict[str, Any]:
    window = episode_returns[-RETURN_WINDOW:]
    return {
        "step": step,
        "mean_return_100": float(np.mean(window)) if window else float("nan"),
        "policy_loss": stats.policy_loss,
        "value_loss": stats.value_loss,
        "entropy": stats.entropy,
    }


def train(
    config: RunConfig,
    buffer_factory: BufferFactory | None = None,
    seed: int | None = None,
) -> TrainResult:
    '''
    Цикл collect/update на total_steps переходов. Потоки случайных чисел
    (веса, среды, выбор действий) выводятся из одного seed через SeedSequence.
    Расхождение обрывает обучение: результат помечается diverged.
    '''
    train_cfg = config.train
    root = np.random.SeedSequence(config.seed if seed is None else seed)
    net_seq, env_seq, action_seq = root.spawn(3)

    policy, value_net = init_networks(config, net_seq)
    env_pool = EnvPool.from_config(config, env_seq)
    action_rng = np.random.default_rng(action_seq)
    buffer = (buffer_factory or BenignRolloutBuffer)()
    optimizer = make_optimizer(train_cfg.optimizer)

    steps_per_update = train_cfg.n_envs * train_cfg.rollout_len
    n_updates = math.ceil(train_cfg.total_steps / steps_per_update)
    curve: list[dict[str, Any]] = []
    diverged = False
    diagnostics: dict[str, Any] = {}
    steps = 0

    for update in range(1, n_updates + 1):
        collect_rollout(policy, env_pool, buffer, train_cfg.rollout_len, action_rng)
        steps += steps_per_update
        batch = build_batch(buffer.drain(), value_net, train_cfg.gamma)
        try:
            stats = a2c_update(
                policy,
                value_net,
                batch,
                lr=train_cfg.lr,
                entropy_coef=train_cfg.entropy_coef,
                clip_norm=train_cfg.clip_norm,
                value_coef=train_cfg.value_coef,
                optimizer=optimizer,
            )
        except NonFiniteLossError as e:
            diverged = True
            diagnostics = {"step": steps, **e.diagnostics}
            break
        if update % train_cfg.log_interval == 0 or update == n_updates:
            curve.append(_curve_row(steps, env_pool.episode_returns, stats))

    return TrainResult(
        policy=policy,
        value_net=value_net,
        curve=curve,
        episode_returns=list(env_pool.episode_returns),
        steps=steps,
        diverged=diverged,
        diagnostics=diagnostics,
        buffer=buffer,
    )
