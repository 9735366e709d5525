"""
Триггер (m, Δ) и его встраивание в наблюдение.
"""
from dataclasses import dataclass
from typing import Any

import numpy as np

from src.errors import DimensionMismatchError
from src.settings import DEFAULT_TRIGGER_VALUE, FLOAT_DTYPE


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    '''
    Бинарная маска m, шаблон Δ и поэлементные границы [α_l, α_u].
    Значения шаблона вне маски хранятся нулями.
    '''
    mask: np.ndarray
    pattern: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask).astype(np.int8)
        d = mask.shape[0]
        arrays = {
            "pattern": np.broadcast_to(np.asarray(self.pattern, dtype=FLOAT_DTYPE), (d,)).copy(),
            "lower": np.broadcast_to(np.asarray(self.lower, dtype=FLOAT_DTYPE), (d,)).copy(),
            "upper": np.broadcast_to(np.asarray(self.upper, dtype=FLOAT_DTYPE), (d,)).copy(),
        }
        if mask.ndim != 1:
            raise DimensionMismatchError("маска триггера", "вектор", mask.shape)
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("маска триггера должна быть бинарной")
        if np.any(arrays["lower"] > arrays["upper"]):
            raise ValueError("нижняя граница триггера больше верхней")

        on = mask == 1
        pattern = np.where(on, arrays["pattern"], 0.0)
        if np.any(pattern[on] < arrays["lower"][on]) or np.any(pattern[on] > arrays["upper"][on]):
            raise ValueError("шаблон триггера выходит за границы [α_l, α_u]")

        arrays["pattern"] = pattern
        object.__setattr__(self, "mask", mask)
        for name, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        mask.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.mask.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TriggerSpec):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("mask", "pattern", "lower", "upper")
        )

    def with_pattern(self, pattern: np.ndarray) -> "TriggerSpec":
        return TriggerSpec(mask=self.mask, pattern=pattern, lower=self.lower, upper=self.upper)


def trigger_support(spec: TriggerSpec) -> tuple[int, ...]:
    '''Γ(m) = {n | m_n = 1} по возрастанию.'''
    return tuple(int(n) for n in np.flatnonzero(spec.mask))


def apply_trigger(s: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    '''s̃ = (1 - m)∘s + m∘Δ; работает и для пакета (B, d).'''
    x = np.asarray(s, dtype=FLOAT_DTYPE)
    if x.shape[-1] != spec.dim:
        raise DimensionMismatchError("наблюдение для триггера", spec.dim, x.shape[-1])
    return np.where(spec.mask.astype(bool), spec.pattern, x)


def corner_patch_trigger(
    side: int,
    grid: int,
    value: float = DEFAULT_TRIGGER_VALUE,
    lower: float = 0.0,
    upper: float = 1.0,
) -> TriggerSpec:
    '''Квадрат side×side в левом верхнем углу плоской сетки grid×grid.'''
    if not 1 <= side <= grid:
        raise ValueError(f"размер триггера {side} должен лежать в [1, {grid}]")
    mask = np.zeros((grid, grid), dtype=np.int8)
    mask[:side, :side] = 1
    mask = mask.reshape(-1)
    return TriggerSpec(mask=mask, pattern=np.where(mask == 1, value, 0.0), lower=lower, upper=upper)


def trigger_to_dict(spec: TriggerSpec) -> dict[str, Any]:
    return {
        "mask": spec.mask.astype(int).tolist(),
        "pattern": spec.pattern.tolist(),
        "lower": spec.lower.tolist(),
        "upper": spec.upper.tolist(),
    }


def trigger_from_dict(document: dict[str, Any]) -> TriggerSpec:
    return TriggerSpec(
        mask=np.asarray(document["mask"]),
        pattern=np.asarray(document["pattern"], dtype=FLOAT_DTYPE),
        lower=np.asarray(document.get("lower", 0.0), dtype=FLOAT_DTYPE),
        upper=np.asarray(document.get("upper", 1.0), dtype=FLOAT_DTYPE),
    )
