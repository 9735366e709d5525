"""
Исключения лаборатории.
"""
from typing import Any


class LabError(Exception):
    '''Базовая ошибка лаборатории.'''


class DimensionMismatchError(LabError, ValueError):
    '''Размерность входа не совпадает с ожидаемой.'''

    def __init__(self, what: str, expected: Any, actual: Any):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: ожидалась размерность {expected}, получена {actual}")


class InvalidDistributionError(LabError, ValueError):
    pass


class EpisodeFinishedError(LabError, RuntimeError):
    pass


class NonFiniteLossError(LabError, FloatingPointError):
    '''Потери или градиенты перестали быть конечными.'''

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message} (диагностика: {self.diagnostics})")


class UnsupportedArchitectureError(LabError, ValueError):
    pass


class InjectionError(LabError, ValueError):
    pass


class MetricError(LabError, ValueError):
    pass


class CheckpointError(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    pass


class InvariantViolationError(LabError):
    '''Проверка инварианта (эквивалентность, граница) не прошла.'''
