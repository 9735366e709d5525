"""
Внедрение бэкдора хирургией весов без данных и без дообучения:
выбор пути, аналитический триггер, ключевой нейрон, усиление и подстройка выхода.
"""
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel, Field

from src.config import InfrectroSection
from src.errors import InjectionError, UnsupportedArchitectureError
from src.nn_core import (
    Activation,
    HeadKind,
    PolicyNetwork,
    count_modified_parameters,
    forward,
    prune_path,
    softmax,
)
from src.settings import (
    DEFAULT_CLEAN_WEIGHT,
    DEFAULT_GAMMA_AMP,
    DEFAULT_LAMBDA,
    DEFAULT_SUPPRESS_WEIGHT,
    DEFAULT_TARGET_ACTION,
    PIXEL_AGENT,
    PIXEL_BACKGROUND,
)
from src.triggers import TriggerSpec, apply_trigger, trigger_support, trigger_to_dict


@dataclass(frozen=True)
class BackdoorPath:
    '''q_1..q_{L-1} и параметры хирургии.'''
    neuron_index_per_layer: tuple[int, ...]
    lambda_: float = DEFAULT_LAMBDA
    gamma_amp: float = DEFAULT_GAMMA_AMP
    suppression_weight: float = DEFAULT_SUPPRESS_WEIGHT
    clean_weight_magnitude: float = DEFAULT_CLEAN_WEIGHT
    target_action: int = DEFAULT_TARGET_ACTION

    def __post_init__(self):
        object.__setattr__(self, "neuron_index_per_layer", tuple(int(i) for i in self.neuron_index_per_layer))
        if not self.neuron_index_per_layer:
            raise ValueError("путь бэкдора пуст")
        if any(i < 0 for i in self.neuron_index_per_layer):
            raise ValueError("индексы нейронов пути должны быть неотрицательными")
        if self.lambda_ <= 0:
            raise ValueError("λ должна быть положительной")
        if self.gamma_amp <= 1:
            raise ValueError("γ_amp должна быть больше 1")
        if self.suppression_weight <= 0 or self.clean_weight_magnitude <= 0:
            raise ValueError("веса подавления и ключа должны быть положительными")

    @property
    def switch(self) -> int:
        return self.neuron_index_per_layer[0]

    def check_against(self, net: PolicyNetwork) -> None:
        if len(self.neuron_index_per_layer) != net.depth - 1:
            raise UnsupportedArchitectureError(
                f"путь длины {len(self.neuron_index_per_layer)} для сети с {net.depth - 1} скрытыми слоями"
            )
        for layer_idx, neuron in enumerate(self.neuron_index_per_layer):
            width = net.layers[layer_idx].spec.out_dim
            if neuron >= width:
                raise UnsupportedArchitectureError(f"нейрон {neuron} вне скрытого слоя {layer_idx + 1} ширины {width}")
        if not 0 <= self.target_action < net.output_dim:
            raise InjectionError(f"целевое действие {self.target_action} вне [0, {net.output_dim})")


class InjectionReport(BaseModel):
    optimized_trigger: dict[str, list[float]]
    clean_agreement: float = Field(ge=0.0, le=1.0)
    triggered_target_prob: float = Field(ge=0.0, le=1.0)
    triggered_target_rate: float = Field(ge=0.0, le=1.0)
    weights_modified: int = Field(ge=0)
    equivalence_violations: int = Field(0, ge=0)
    inactive_states: int = Field(0, ge=0)
    samples: int = Field(0, ge=0)
    path: list[int] = Field(default_factory=list)
    target_action: int = 0
    switch_activation: float | None = None


def check_supported(net: PolicyNetwork) -> None:
    if net.depth < 2:
        raise UnsupportedArchitectureError("хирургия требует хотя бы один скрытый слой")
    for idx, spec in enumerate(net.specs[:-1]):
        if spec.activation is not Activation.RELU:
            raise UnsupportedArchitectureError(f"скрытый слой {idx + 1} должен иметь ReLU, получено {spec.activation.value}")
    if net.head is HeadKind.SCALAR:
        raise UnsupportedArchitectureError("сети ценности не атакуются")


def optimize_trigger(
    net: PolicyNetwork,
    q1: int,
    mask: np.ndarray,
    bounds: tuple[float | np.ndarray, float | np.ndarray],
) -> np.ndarray:
    '''Δ_n = α_u при w_n > 0, иначе α_l; вне маски 0.'''
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("носитель маски триггера пуст")
    row = net.layers[0].weights[q1]
    lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), row.shape)
    upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), row.shape)
    return np.where(mask, np.where(row > 0.0, upper, lower), 0.0)


def switch_candidates(
    net: PolicyNetwork,
    trigger: TriggerSpec,
    clean_range: tuple[float, float],
) -> list[int]:
    '''
    Нейроны первого слоя, чей оптимальный триггер выходит за диапазон
    чистых наблюдений хотя бы в одном признаке.
    '''
    support = list(trigger_support(trigger))
    candidates = []
    for neuron in range(net.layers[0].spec.out_dim):
        pattern = optimize_trigger(net, neuron, trigger.mask, (trigger.lower, trigger.upper))[support]
        if np.any(pattern < clean_range[0]) or np.any(pattern > clean_range[1]):
            candidates.append(neuron)
    return candidates


def select_backdoor_path(
    net: PolicyNetwork,
    rng: np.random.Generator,
    switch_choices: Sequence[int] | None = None,
    **params: Any,
) -> BackdoorPath:
    '''
    q_1 равномерно по первому слою (или по switch_choices); далее среди нейронов
    с ненулевым входящим весом от предыдущего нейрона пути.
    '''
    check_supported(net)
    choices = list(switch_choices) if switch_choices is not None else list(range(net.layers[0].spec.out_dim))
    if not choices:
        raise InjectionError("нет допустимых кандидатов для ключевого нейрона")
    path = [int(choices[int(rng.integers(len(choices)))])]

    for layer in net.layers[1:-1]:
        connected = np.flatnonzero(layer.weights[:, path[-1]] != 0.0)
        pool = connected if connected.size else np.arange(layer.spec.out_dim)
        path.append(int(pool[int(rng.integers(pool.size))]))

    return BackdoorPath(neuron_index_per_layer=tuple(path), **params)


def rewire_switch(
    net: PolicyNetwork,
    q1: int,
    trigger: TriggerSpec,
    lambda_: float,
    clean_weight_magnitude: float,
) -> None:
    '''
    Строка q1 первого слоя: нули вне Γ(m), ±magnitude на Γ(m) по знаку исходного веса,
    смещение такое, что предактивация на триггере равна λ.
    '''
    layer = net.layers[0]
    original = layer.weights[q1].copy()
    on = trigger.mask.astype(bool)

    row = np.zeros_like(original)
    row[on] = np.where(original[on] > 0.0, clean_weight_magnitude, -clean_weight_magnitude)
    layer.weights[q1] = row

    # предактивация считается тем же путём, что и в forward
    triggered_sum = float(trigger.pattern @ row)
    bias = lambda_ - triggered_sum
    bias += lambda_ - (triggered_sum + bias)
    layer.biases[q1] = bias


def amplify_path(net: PolicyNetwork, path: BackdoorPath) -> None:
    '''q_l = γ_amp·q_{l-1}: единственный входящий вес, нулевое смещение.'''
    indices = path.neuron_index_per_layer
    for layer_idx in range(1, len(indices)):
        layer = net.layers[layer_idx]
        neuron, previous = indices[layer_idx], indices[layer_idx - 1]
        layer.weights[neuron, :] = 0.0
        layer.weights[neuron, previous] = path.gamma_amp
        layer.biases[neuron] = 0.0


def rig_output_layer(net: PolicyNetwork, path: BackdoorPath) -> None:
    '''
    Столбец q_{L-1} выходного слоя: +suppression в целевой логит, -suppression в остальные.
    Для гауссовой головы сдвигается только целевая компонента среднего.
    '''
    output = net.layers[-1]
    column = path.neuron_index_per_layer[-1]
    if net.head is HeadKind.GAUSSIAN:
        output.weights[path.target_action, column] += path.suppression_weight
        return
    signs = np.full(output.spec.out_dim, -1.0)
    signs[path.target_action] = 1.0
    output.weights[:, column] += signs * path.suppression_weight


def backdoor_path_from_metadata(net: PolicyNetwork) -> BackdoorPath | None:
    document = net.metadata.get("backdoor_path")
    if not document:
        return None
    return BackdoorPath(
        neuron_index_per_layer=tuple(document["neurons"]),
        lambda_=document["lambda"],
        gamma_amp=document["gamma_amp"],
        suppression_weight=document["suppression_weight"],
        clean_weight_magnitude=document["clean_weight_magnitude"],
        target_action=document["target_action"],
    )


def _path_to_metadata(path: BackdoorPath) -> dict[str, Any]:
    return {
        "neurons": list(path.neuron_index_per_layer),
        "lambda": path.lambda_,
        "gamma_amp": path.gamma_amp,
        "suppression_weight": path.suppression_weight,
        "clean_weight_magnitude": path.clean_weight_magnitude,
        "target_action": path.target_action,
    }


def verify_injection(
    net_b: PolicyNetwork,
    net_clean: PolicyNetwork,
    trigger: TriggerSpec,
    samples: np.ndarray,
    path: BackdoorPath | None = None,
    target_action: int | None = None,
) -> InjectionReport:
    '''
    Где ключевой нейрон молчит, выход net_b обязан побитно совпасть с выходом
    net_clean с обнулёнными исходящими весами нейронов пути.
    '''
    if net_b.specs != net_clean.specs:
        raise UnsupportedArchitectureError("архитектуры сетей различаются")
    path = path or backdoor_path_from_metadata(net_b)
    if target_action is None:
        target_action = path.target_action if path is not None else 0

    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    pruned = prune_path(net_clean, path.neuron_index_per_layer) if path is not None else net_clean

    trace_b = forward(net_b, samples)
    out_b = trace_b.output
    out_p = forward(pruned, samples).output
    if path is not None:
        inactive = trace_b.post_activations[0][:, path.switch] == 0.0
    else:
        inactive = np.ones(samples.shape[0], dtype=bool)
    mismatched = np.any(out_b != out_p, axis=1)
    violations = int(np.count_nonzero(mismatched & inactive))

    triggered = apply_trigger(samples, trigger)
    trace_t = forward(net_b, triggered)
    logits_t = trace_t.output
    hits = np.argmax(logits_t, axis=1) == target_action
    if net_b.head is HeadKind.CATEGORICAL:
        target_prob = float(np.mean(softmax(logits_t)[:, target_action]))
    else:
        target_prob = float(np.mean(hits))
    switch_activation = float(np.mean(trace_t.post_activations[0][:, path.switch])) if path is not None else None

    return InjectionReport(
        optimized_trigger=trigger_to_dict(trigger),
        clean_agreement=float(np.mean(np.argmax(out_b, axis=1) == np.argmax(out_p, axis=1))),
        triggered_target_prob=min(max(target_prob, 0.0), 1.0),
        triggered_target_rate=float(np.mean(hits)),
        weights_modified=count_modified_parameters(net_clean, net_b),
        equivalence_violations=violations,
        inactive_states=int(np.count_nonzero(inactive)),
        samples=int(samples.shape[0]),
        path=list(path.neuron_index_per_layer) if path is not None else [],
        target_action=target_action,
        switch_activation=switch_activation,
    )


def inject(
    net: PolicyNetwork,
    attack_config: InfrectroSection,
    rng: np.random.Generator,
    trigger: TriggerSpec,
    clean_states: np.ndarray,
    clean_range: tuple[float, float] = (PIXEL_BACKGROUND, PIXEL_AGENT),
) -> tuple[PolicyNetwork, InjectionReport]:
    '''
    select → optimize → rewire → amplify → rig на копии сети.
    trigger задаёт маску и границы; шаблон подбирается аналитически.
    '''
    check_supported(net)
    if not 0 <= attack_config.target_action < net.output_dim:
        raise InjectionError(f"целевое действие {attack_config.target_action} вне [0, {net.output_dim})")

    candidates = switch_candidates(net, trigger, clean_range)
    if not candidates:
        raise InjectionError(
            "ни один нейрон первого слоя не даёт триггер вне диапазона чистых наблюдений; "
            "увеличьте trigger.side или расширьте границы"
        )
    path = select_backdoor_path(
        net,
        rng,
        switch_choices=candidates,
        lambda_=attack_config.lambda_,
        gamma_amp=attack_config.gamma_amp,
        suppression_weight=attack_config.suppress_w,
        clean_weight_magnitude=attack_config.clean_w,
        target_action=attack_config.target_action,
    )
    path.check_against(net)

    pattern = optimize_trigger(net, path.switch, trigger.mask, (trigger.lower, trigger.upper))
    optimized = trigger.with_pattern(pattern)

    backdoored = net.copy()
    rewire_switch(backdoored, path.switch, optimized, path.lambda_, path.clean_weight_magnitude)
    amplify_path(backdoored, path)
    rig_output_layer(backdoored, path)
    backdoored.metadata.update(
        {
            "injected": True,
            "attack": "infrectrorl",
            "trigger": trigger_to_dict(optimized),
            "backdoor_path": _path_to_metadata(path),
        }
    )

    report = verify_injection(backdoored, net, optimized, clean_states, path)
    return backdoored, report
