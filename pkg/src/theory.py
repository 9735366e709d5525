"""
Численная проверка гарантий незаметности: B_j, KL при маскировании входа,
TV между гауссовыми ядрами, оценки доходности Монте-Карло и итоговая граница.
"""
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special, stats

from src.config import ChainSection, InfrectroSection, TheorySection
from src.envs import LinearGaussianChain, chain_step
from src.errors import UnsupportedArchitectureError
from src.infrectrorl import inject
from src.nn_core import (
    LIPSCHITZ,
    Activation,
    HeadKind,
    Layer,
    LayerSpec,
    PolicyNetwork,
    forward,
    prune_input_path,
    prune_path,
)
from src.settings import (
    CHAIN_TRIGGER_BOUNDS,
    DELTA_INFLATION,
    FLOAT_DTYPE,
    KL_SLACK,
)
from src.triggers import TriggerSpec, apply_trigger


class BoundComponents(BaseModel):
    model_config = ConfigDict(allow_inf_nan=False)

    b_j: float = Field(ge=0.0)
    l_phi: float = Field(gt=0.0)
    sigma_f: float = Field(gt=0.0)
    tv_delta: float = Field(ge=0.0)
    r_max: float = Field(gt=0.0)
    gamma_disc: float = Field(ge=0.0, lt=1.0)


class ReturnEstimate(BaseModel):
    mean: float
    half_width_95: float = Field(ge=0.0)
    n_rollouts: int = Field(ge=2)
    std: float = Field(ge=0.0)


class KLCheck(NamedTuple):
    kl: float
    bound: float
    holds: bool


def _require_one_hidden_layer(net: PolicyNetwork) -> None:
    if net.depth != 2:
        raise UnsupportedArchitectureError(f"ожидалась сеть с одним скрытым слоем, слоёв: {net.depth}")


def path_coefficient(net: PolicyNetwork, j: int) -> float:
    '''B_j = L_φ·Σ_o Σ_i |W2_oi·W1_ij|; при одном выходе это формула теоремы.'''
    _require_one_hidden_layer(net)
    if not 0 <= j < net.input_dim:
        raise IndexError(f"индекс входа {j} вне [0, {net.input_dim})")
    l_phi = LIPSCHITZ[net.layers[0].spec.activation]
    w1 = net.layers[0].weights[:, j]
    w2 = net.layers[1].weights
    return float(l_phi * np.sum(np.abs(w2 * w1[None, :])))


def kl_prune_check(net: PolicyNetwork, j: int, x: np.ndarray, sigma_f: float | None = None) -> KLCheck:
    '''KL(N(f(x), σ²I) || N(f_p(x), σ²I)) против (B_j·|x_j|)² / (2σ²).'''
    _require_one_hidden_layer(net)
    sigma = sigma_f if sigma_f is not None else net.sigma_f
    if sigma is None or sigma <= 0:
        raise ValueError("нужна положительная sigma_f")
    x = np.asarray(x, dtype=FLOAT_DTYPE)
    f = forward(net, x).output
    f_p = forward(prune_input_path(net, j), x).output
    kl = float(np.sum((f - f_p) ** 2) / (2.0 * sigma ** 2))
    bound = float((path_coefficient(net, j) * abs(x[j])) ** 2 / (2.0 * sigma ** 2))
    return KLCheck(kl=kl, bound=bound, holds=kl <= bound + KL_SLACK)


def gaussian_tv_per_dim(mu1: np.ndarray | float, mu2: np.ndarray | float, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma должна быть положительной")
    gap = np.abs(np.asarray(mu1, dtype=FLOAT_DTYPE) - np.asarray(mu2, dtype=FLOAT_DTYPE))
    # 2Φ(|Δμ|/(2σ)) - 1 = erf(|Δμ|/(2√2σ))
    return special.erf(gap / (2.0 * math.sqrt(2.0) * sigma))


def gaussian_tv(mu1: np.ndarray | float, mu2: np.ndarray | float, sigma: float) -> float | np.ndarray:
    '''
    TV между N(mu1, σ²) и N(mu2, σ²). Для векторов (размерность по последней оси)
    возвращается верхняя оценка для произведения ядер 1 - Π(1 - TV_dim).
    '''
    per_dim = gaussian_tv_per_dim(mu1, mu2, sigma)
    if per_dim.ndim == 0:
        return float(per_dim)
    combined = 1.0 - np.prod(1.0 - per_dim, axis=-1)
    return float(combined) if np.ndim(combined) == 0 else combined


def visited_states(
    env: LinearGaussianChain,
    policy: PolicyNetwork,
    n_states: int,
    rng: np.random.Generator,
) -> np.ndarray:
    '''n_states состояний с траекторий политики (параллельные цепи до горизонта).'''
    n_chains = max(1, math.ceil(n_states / env.horizon))
    s = env.initial_states(n_chains, rng)
    collected = []
    for _ in range(env.horizon):
        collected.append(s)
        mean = forward(policy, s).output
        a = mean + policy.sigma_f * rng.standard_normal(mean.shape)
        s, _ = chain_step(env, s, a, rng)
    return np.concatenate(collected)[:n_states]


def kernel_tv(
    env: LinearGaussianChain,
    pi1: PolicyNetwork,
    pi2: PolicyNetwork,
    states: np.ndarray,
) -> np.ndarray:
    '''TV между доклиппинговыми ядрами N(s + c·f_i(s), c²σ_f² + σ_e²) в каждом состоянии.'''
    if pi1.sigma_f != pi2.sigma_f:
        raise ValueError("политики должны иметь одинаковую sigma_f")
    sigma = env.kernel_std(pi1.sigma_f)
    mu1 = env.action_gain * forward(pi1, states).output
    mu2 = env.action_gain * forward(pi2, states).output
    return np.atleast_1d(gaussian_tv(mu1, mu2, sigma))


def estimate_tv_delta(
    env: LinearGaussianChain,
    pi1: PolicyNetwork,
    pi2: PolicyNetwork,
    n_states: int,
    rng: np.random.Generator,
) -> float:
    '''Максимум kernel_tv по состояниям, посещённым pi1.'''
    states = visited_states(env, pi1, n_states, rng)
    return float(np.max(kernel_tv(env, pi1, pi2, states)))


def mc_return(
    env: LinearGaussianChain,
    policy: PolicyNetwork,
    n_rollouts: int,
    horizon: int | None = None,
    gamma_disc: float | None = None,
    seed: int = 0,
    initial_state: np.ndarray | None = None,
    trigger: TriggerSpec | None = None,
) -> ReturnEstimate:
    '''
    Среднее Σ_t γ^t r_t по n_rollouts параллельным траекториям и 95% полуширина
    по t-распределению. При одинаковом seed политики получают одни и те же шумы.
    С trigger политика видит apply_trigger(s), динамика идёт по s.
    '''
    if n_rollouts < 2:
        raise ValueError("нужно хотя бы два прогона для доверительного интервала")
    horizon = horizon if horizon is not None else env.horizon
    gamma = gamma_disc if gamma_disc is not None else env.gamma
    rng = np.random.default_rng(seed)

    if initial_state is not None:
        s = np.broadcast_to(np.asarray(initial_state, dtype=FLOAT_DTYPE), (n_rollouts, env.dim)).copy()
    else:
        s = env.initial_states(n_rollouts, rng)

    totals = np.zeros(n_rollouts, dtype=FLOAT_DTYPE)
    discount = 1.0
    for _ in range(horizon):
        seen = apply_trigger(s, trigger) if trigger is not None else s
        mean = forward(policy, seen).output
        a = mean + policy.sigma_f * rng.standard_normal(mean.shape)
        s, reward = chain_step(env, s, a, rng)
        totals += discount * reward
        discount *= gamma

    std = float(np.std(totals, ddof=1))
    half_width = float(stats.t.ppf(0.975, n_rollouts - 1) * std / math.sqrt(n_rollouts))
    return ReturnEstimate(mean=float(np.mean(totals)), half_width_95=half_width, n_rollouts=n_rollouts, std=std)


def theorem_bound(c: BoundComponents) -> float:
    '''2·r_max·(γ·δ/(1-γ)² + B_j/(σ_f·(1-γ))).'''
    if c.gamma_disc >= 1.0:
        raise ValueError("gamma_disc должна быть меньше 1")
    gamma = c.gamma_disc
    return 2.0 * c.r_max * (gamma * c.tv_delta / (1.0 - gamma) ** 2 + c.b_j / (c.sigma_f * (1.0 - gamma)))


@dataclass
class TheoryInstance:
    env: LinearGaussianChain
    policy: PolicyNetwork
    input_index: int


def random_gaussian_policy(
    dim: int,
    hidden: int,
    weight_scale: float,
    sigma_f: float,
    rng: np.random.Generator,
) -> PolicyNetwork:
    '''Один скрытый ReLU-слой, все веса и смещения ~ U[-scale, scale].'''
    layers = []
    for fan_in, fan_out, activation in ((dim, hidden, Activation.RELU), (hidden, dim, Activation.IDENTITY)):
        layers.append(
            Layer(
                weights=rng.uniform(-weight_scale, weight_scale, size=(fan_out, fan_in)),
                biases=rng.uniform(-weight_scale, weight_scale, size=fan_out),
                spec=LayerSpec(in_dim=fan_in, out_dim=fan_out, activation=activation),
            )
        )
    return PolicyNetwork(layers=layers, head=HeadKind.GAUSSIAN, sigma_f=sigma_f)


def make_instance(theory: TheorySection, chain: ChainSection, rng: np.random.Generator) -> TheoryInstance:
    '''Размерность, r_max, γ и горизонт из env.chain; c, σ_e и цель случайны вокруг заданных.'''
    env = LinearGaussianChain(
        dim=chain.d,
        action_gain=float(chain.c * rng.uniform(0.5, 2.0)),
        noise_std=float(chain.sigma_e * rng.uniform(0.5, 2.0)),
        goal=rng.uniform(0.2, 0.8, size=chain.d),
        r_max=chain.r_max,
        gamma=chain.gamma,
        horizon=chain.horizon,
    )
    policy = random_gaussian_policy(chain.d, theory.hidden, theory.weight_scale, theory.sigma_f, rng)
    return TheoryInstance(env=env, policy=policy, input_index=theory.input_index % chain.d)


class InstanceResult(BaseModel):
    index: int
    b_j: float
    tv_delta: float
    bound: float
    bound_inflated: float
    delta_j: float
    ci: float
    holds: bool
    holds_inflated: bool
    j_clean: float
    j_pruned: float
    kl_violations: int = 0
    j_backdoored: float | None = None
    j_path_pruned: float | None = None
    j_triggered: float | None = None
    lemma_gap: float | None = None
    lemma_holds: bool | None = None


class BoundReport(BaseModel):
    instances: int
    seed: int
    holds_count: int
    holds_inflated_count: int
    lemma_holds_count: int
    kl_violations: int
    rows: list[InstanceResult]

    @property
    def all_hold(self) -> bool:
        return (
            self.holds_count == self.instances
            and self.kl_violations == 0
            and self.lemma_holds_count == self.instances
        )


def chain_trigger(dim: int, index: int) -> TriggerSpec:
    '''Триггер на одном входе цепи с границами вне [0, 1].'''
    mask = np.zeros(dim, dtype=np.int8)
    mask[index] = 1
    lower, upper = CHAIN_TRIGGER_BOUNDS
    return TriggerSpec(mask=mask, pattern=np.where(mask == 1, upper, 0.0), lower=lower, upper=upper)


def check_lemma(
    instance: TheoryInstance,
    theory: TheorySection,
    rng: np.random.Generator,
    rollout_seed: int,
    attack: InfrectroSection | None = None,
) -> dict[str, float | bool]:
    '''
    Гауссов бэкдор на входе j: доходность π_b на чистых состояниях сравнивается
    с доходностью сети без нейронов пути; дополнительно доходность под триггером.
    '''
    env = instance.env
    backdoored, _ = inject(
        instance.policy,
        attack or InfrectroSection(),
        rng,
        chain_trigger(env.dim, instance.input_index),
        env.initial_states(theory.n_states, rng),
        clean_range=(0.0, 1.0),
    )
    pruned = prune_path(instance.policy, backdoored.metadata["backdoor_path"]["neurons"])
    trigger = chain_trigger(env.dim, instance.input_index).with_pattern(
        np.asarray(backdoored.metadata["trigger"]["pattern"])
    )

    j_b = mc_return(env, backdoored, theory.rollouts, seed=rollout_seed)
    j_p = mc_return(env, pruned, theory.rollouts, seed=rollout_seed)
    j_t = mc_return(env, backdoored, theory.rollouts, seed=rollout_seed, trigger=trigger)
    gap = abs(j_b.mean - j_p.mean)
    return {
        "j_backdoored": j_b.mean,
        "j_path_pruned": j_p.mean,
        "j_triggered": j_t.mean,
        "lemma_gap": gap,
        "lemma_holds": gap <= j_b.half_width_95 + j_p.half_width_95,
    }


def check_instance(
    instance: TheoryInstance,
    theory: TheorySection,
    seed_sequence: np.random.SeedSequence,
    index: int = 0,
    with_lemma: bool = True,
) -> InstanceResult:
    rng = np.random.default_rng(seed_sequence)
    rollout_seed = int(seed_sequence.generate_state(1)[0])
    env, policy, j = instance.env, instance.policy, instance.input_index

    pruned = prune_input_path(policy, j)
    j_clean = mc_return(env, policy, theory.rollouts, seed=rollout_seed)
    j_pruned = mc_return(env, pruned, theory.rollouts, seed=rollout_seed)
    tv_delta = estimate_tv_delta(env, policy, pruned, theory.n_states, rng)

    components = BoundComponents(
        b_j=path_coefficient(policy, j),
        l_phi=LIPSCHITZ[policy.layers[0].spec.activation],
        sigma_f=policy.sigma_f,
        tv_delta=tv_delta,
        r_max=env.r_max,
        gamma_disc=env.gamma,
    )
    bound = theorem_bound(components)
    bound_inflated = theorem_bound(components.model_copy(update={"tv_delta": tv_delta * DELTA_INFLATION}))
    delta_j = abs(j_clean.mean - j_pruned.mean)
    ci = j_clean.half_width_95 + j_pruned.half_width_95

    kl_states = visited_states(env, policy, min(theory.n_states, 200), rng)
    kl_violations = sum(not kl_prune_check(policy, j, x).holds for x in kl_states)

    lemma = check_lemma(instance, theory, rng, rollout_seed) if with_lemma else {}
    return InstanceResult(
        index=index,
        b_j=components.b_j,
        tv_delta=tv_delta,
        bound=bound,
        bound_inflated=bound_inflated,
        delta_j=delta_j,
        ci=ci,
        holds=delta_j <= bound + ci,
        holds_inflated=delta_j <= bound_inflated + ci,
        j_clean=j_clean.mean,
        j_pruned=j_pruned.mean,
        kl_violations=kl_violations,
        **lemma,
    )


def verify_theorem(
    n_instances: int,
    seed: int,
    theory: TheorySection | None = None,
    chain: ChainSection | None = None,
) -> BoundReport:
    '''Случайные экземпляры (цепь + гауссова политика) с независимыми потоками по индексу.'''
    theory = theory or TheorySection()
    chain = chain or ChainSection()
    rows = []
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(n_instances)):
        build_seq, check_seq = child.spawn(2)
        instance = make_instance(theory, chain, np.random.default_rng(build_seq))
        rows.append(check_instance(instance, theory, check_seq, index))

    return BoundReport(
        instances=n_instances,
        seed=seed,
        holds_count=sum(row.holds for row in rows),
        holds_inflated_count=sum(row.holds_inflated for row in rows),
        lemma_holds_count=sum(bool(row.lemma_holds) for row in rows),
        kl_violations=sum(row.kl_violations for row in rows),
        rows=rows,
    )
