"""
Полносвязные сети политики: прямой проход, стохастические головы,
обратный проход и структурные правки весов.
"""
import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Final, Sequence

import numpy as np

from src.errors import DimensionMismatchError, InvalidDistributionError, UnsupportedArchitectureError
from src.settings import CHECKPOINT_FORMAT_VERSION, FLOAT_DTYPE


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


# Все поддерживаемые активации 1-липшицевы
LIPSCHITZ: Final[dict[Activation, float]] = {
    Activation.RELU: 1.0,
    Activation.TANH: 1.0,
    Activation.IDENTITY: 1.0,
}


class HeadKind(str, Enum):
    CATEGORICAL = "categorical"
    GAUSSIAN = "gaussian"
    SCALAR = "scalar"


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise UnsupportedArchitectureError(
                f"размерности слоя должны быть положительными: {self.in_dim}→{self.out_dim}"
            )
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass
class Layer:
    weights: np.ndarray
    biases: np.ndarray
    spec: LayerSpec


@dataclass
class ForwardTrace:
    '''Полная трасса прямого прохода: z и q по слоям.'''
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    post_activations: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.post_activations[-1]


@dataclass
class PolicyNetwork:
    '''
    Многослойный перцептрон с явными матрицами весов (out × in) и смещениями.
    Голова: категориальная по логитам, гауссова с фиксированным sigma_f
    или скалярная (сеть ценности).
    '''
    layers: list[Layer]
    head: HeadKind
    sigma_f: float | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.head = HeadKind(self.head)
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise UnsupportedArchitectureError("сеть должна содержать хотя бы один слой")
        for idx, layer in enumerate(self.layers):
            spec = layer.spec
            if layer.weights.shape != (spec.out_dim, spec.in_dim):
                raise DimensionMismatchError(
                    f"веса слоя {idx}", (spec.out_dim, spec.in_dim), layer.weights.shape
                )
            if layer.biases.shape != (spec.out_dim,):
                raise DimensionMismatchError(f"смещения слоя {idx}", (spec.out_dim,), layer.biases.shape)
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
                raise UnsupportedArchitectureError(f"слой {idx} содержит нечисловые параметры")
            if idx > 0 and self.layers[idx - 1].spec.out_dim != spec.in_dim:
                raise DimensionMismatchError(
                    f"вход слоя {idx}", self.layers[idx - 1].spec.out_dim, spec.in_dim
                )
        if self.layers[-1].spec.activation is not Activation.IDENTITY:
            raise UnsupportedArchitectureError("выходной слой должен иметь активацию identity")
        if self.head is HeadKind.GAUSSIAN and (self.sigma_f is None or self.sigma_f <= 0):
            raise UnsupportedArchitectureError("гауссова голова требует sigma_f > 0")
        if self.head is HeadKind.SCALAR and self.output_dim != 1:
            raise DimensionMismatchError("выход сети ценности", 1, self.output_dim)

    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].spec.out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.biases])
        return params

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(
            layers=[
                Layer(weights=layer.weights.copy(), biases=layer.biases.copy(), spec=layer.spec)
                for layer in self.layers
            ],
            head=self.head,
            sigma_f=self.sigma_f,
            metadata=copy.deepcopy(self.metadata),
        )


@dataclass(frozen=True)
class CategoricalDistribution:
    logits: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class GaussianDistribution:
    mean: np.ndarray
    sigma: float


ActionDistribution = CategoricalDistribution | GaussianDistribution


def activate(activation: Activation, z: np.ndarray) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    if activation is Activation.TANH:
        return np.tanh(z)
    return z


def activation_derivative(activation: Activation, z: np.ndarray, q: np.ndarray) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(FLOAT_DTYPE)
    if activation is Activation.TANH:
        return 1.0 - q * q
    return np.ones_like(z)


def build_network(
    sizes: Sequence[int],
    head: HeadKind,
    rng: np.random.Generator,
    hidden_activation: Activation = Activation.RELU,
    sigma_f: float | None = None,
    output_scale: float = 1.0,
) -> PolicyNetwork:
    '''
    Создаёт сеть по списку ширин [d, h_1, ..., h_{L-1}, out].
    Веса ~ U(-1/sqrt(in), 1/sqrt(in)), смещения нулевые.
    '''
    if len(sizes) < 2:
        raise UnsupportedArchitectureError("нужны как минимум вход и выход")
    layers = []
    for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        is_output = idx == len(sizes) - 2
        bound = 1.0 / np.sqrt(fan_in)
        weights = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if is_output:
            weights = weights * output_scale
        layers.append(
            Layer(
                weights=weights.astype(FLOAT_DTYPE),
                biases=np.zeros(fan_out, dtype=FLOAT_DTYPE),
                spec=LayerSpec(
                    in_dim=fan_in,
                    out_dim=fan_out,
                    activation=Activation.IDENTITY if is_output else hidden_activation,
                ),
            )
        )
    return PolicyNetwork(layers=layers, head=head, sigma_f=sigma_f)


def forward(net: PolicyNetwork, s: np.ndarray) -> ForwardTrace:
    '''Прямой проход для одного состояния (d,) или пакета (B, d).'''
    x = np.asarray(s, dtype=FLOAT_DTYPE)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionMismatchError("вход сети", net.input_dim, x.shape[-1] if x.ndim else ())

    pre_activations = []
    post_activations = []
    q = x
    for layer in net.layers:
        z = q @ layer.weights.T + layer.biases
        q = activate(layer.spec.activation, z)
        pre_activations.append(z)
        post_activations.append(q)

    return ForwardTrace(inputs=x, pre_activations=pre_activations, post_activations=post_activations)


def backward(net: PolicyNetwork, trace: ForwardTrace, grad_output: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    '''
    Обратный проход по пакетной трассе. grad_output: dLoss/d(выход) формы (B, out).
    Возвращает (dW, db) для каждого слоя.
    '''
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * net.depth  # type: ignore[list-item]
    grad_post = np.asarray(grad_output, dtype=FLOAT_DTYPE)

    for idx in range(net.depth - 1, -1, -1):
        layer = net.layers[idx]
        z = trace.pre_activations[idx]
        q = trace.post_activations[idx]
        grad_pre = grad_post * activation_derivative(layer.spec.activation, z, q)
        q_prev = trace.inputs if idx == 0 else trace.post_activations[idx - 1]
        grads[idx] = (grad_pre.T @ q_prev, grad_pre.sum(axis=0))
        grad_post = grad_pre @ layer.weights

    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def action_distribution(net: PolicyNetwork, s: np.ndarray) -> ActionDistribution:
    output = forward(net, s).output
    if not np.all(np.isfinite(output)):
        raise InvalidDistributionError("выход сети содержит нечисловые значения")

    if net.head is HeadKind.CATEGORICAL:
        return CategoricalDistribution(logits=output, probs=softmax(output))
    if net.head is HeadKind.GAUSSIAN:
        return GaussianDistribution(mean=output, sigma=float(net.sigma_f))
    raise InvalidDistributionError("сеть ценности не задаёт распределение действий")


def sample_categorical_batch(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    '''Сэмплирование обратной функцией распределения: одно равномерное число на строку.'''
    probs = np.atleast_2d(probs)
    cumulative = np.cumsum(probs, axis=-1)
    uniforms = rng.random(probs.shape[0])
    indices = np.sum(uniforms[:, None] >= cumulative, axis=-1)
    last_nonzero = probs.shape[-1] - 1 - np.argmax((probs > 0.0)[:, ::-1], axis=-1)
    return np.minimum(indices, last_nonzero)


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> int | np.ndarray:
    if isinstance(dist, CategoricalDistribution):
        probs = dist.probs
        if probs.ndim != 1 or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-9):
            raise InvalidDistributionError(f"некорректные вероятности: {probs}")
        return int(sample_categorical_batch(probs, rng)[0])
    if isinstance(dist, GaussianDistribution):
        return dist.mean + dist.sigma * rng.standard_normal(np.shape(dist.mean))
    raise InvalidDistributionError(f"неизвестное распределение: {type(dist).__name__}")


def prune_input_path(net: PolicyNetwork, j: int) -> PolicyNetwork:
    '''Маскирует вход j: столбец j весов первого слоя обнуляется.'''
    if not 0 <= j < net.input_dim:
        raise IndexError(f"индекс входа {j} вне диапазона [0, {net.input_dim})")
    pruned = net.copy()
    pruned.layers[0].weights[:, j] = 0.0
    return pruned


def prune_path(net: PolicyNetwork, neuron_indices: Sequence[int]) -> PolicyNetwork:
    '''
    Удаляет вклад нейронов пути: neuron_indices[l] это нейрон скрытого слоя l,
    его исходящие веса в слое l+1 обнуляются.
    '''
    if len(neuron_indices) > net.depth - 1:
        raise UnsupportedArchitectureError(
            f"путь длины {len(neuron_indices)} не помещается в {net.depth - 1} скрытых слоёв"
        )
    pruned = net.copy()
    for layer_idx, neuron in enumerate(neuron_indices):
        pruned.layers[layer_idx + 1].weights[:, neuron] = 0.0
    return pruned


def count_modified_parameters(before: PolicyNetwork, after: PolicyNetwork) -> int:
    if before.specs != after.specs:
        raise UnsupportedArchitectureError("архитектуры сетей различаются")
    return int(sum(np.count_nonzero(a != b) for a, b in zip(before.parameters(), after.parameters())))


def network_to_dict(net: PolicyNetwork) -> dict[str, Any]:
    '''Документ контрольной точки (веса построчно).'''
    head: dict[str, Any] = {"kind": net.head.value}
    if net.head is HeadKind.GAUSSIAN:
        head["sigma_f"] = net.sigma_f
    else:
        head["action_count"] = net.output_dim

    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": [
            {"in": spec.in_dim, "out": spec.out_dim, "activation": spec.activation.value}
            for spec in net.specs
        ],
        "head": head,
        "weights": [layer.weights.tolist() for layer in net.layers],
        "biases": [layer.biases.tolist() for layer in net.layers],
        "metadata": net.metadata,
    }


def network_from_dict(document: dict[str, Any]) -> PolicyNetwork:
    layers = []
    for spec_doc, weights, biases in zip(document["arch"], document["weights"], document["biases"]):
        spec = LayerSpec(in_dim=int(spec_doc["in"]), out_dim=int(spec_doc["out"]), activation=spec_doc["activation"])
        layers.append(
            Layer(
                weights=np.asarray(weights, dtype=FLOAT_DTYPE).reshape(spec.out_dim, spec.in_dim),
                biases=np.asarray(biases, dtype=FLOAT_DTYPE).reshape(spec.out_dim),
                spec=spec,
            )
        )
    head = document["head"]
    return PolicyNetwork(
        layers=layers,
        head=HeadKind(head["kind"]),
        sigma_f=head.get("sigma_f"),
        metadata=dict(document.get("metadata", {})),
    )
