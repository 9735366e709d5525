"""
Вредоносный буфер траекторий: детектор триггера и отравление переходов
со слабо-целевой схемой наград.
"""
import dataclasses
from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np

from src.config import TrojanentrlSection
from src.envs import Transition
from src.errors import ConfigError, DimensionMismatchError
from src.settings import ACTIONS, TRIGGER_MATCH_TOLERANCE
from src.triggers import TriggerSpec, apply_trigger, trigger_support


@dataclass(frozen=True, eq=False)
class PoisonConfig:
    trigger: TriggerSpec
    target_action: int
    poison_rate: float
    reward_hi: float = 1.0
    reward_lo: float = -1.0
    seed: int = 1
    n_actions: int = len(ACTIONS)

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate={self.poison_rate} вне [0, 1]")
        if self.reward_hi <= self.reward_lo:
            raise ValueError("reward_hi должен быть больше reward_lo")
        if self.n_actions < 2:
            raise ValueError("для слабо-целевой схемы нужно хотя бы два действия")
        if not 0 <= self.target_action < self.n_actions:
            raise ConfigError(f"целевое действие {self.target_action} вне [0, {self.n_actions})")

    @classmethod
    def from_section(cls, section: TrojanentrlSection, grid: int) -> "PoisonConfig":
        return cls(
            trigger=section.trigger.build(grid),
            target_action=section.target_action,
            poison_rate=section.poison_rate,
            reward_hi=section.reward_hi,
            reward_lo=section.reward_lo,
            seed=section.seed,
        )


def detect_trigger(obs: np.ndarray, trigger: TriggerSpec, tolerance: float = TRIGGER_MATCH_TOLERANCE) -> bool:
    '''Истина, если на носителе маски наблюдение совпадает с шаблоном.'''
    obs = np.asarray(obs)
    if obs.shape != (trigger.dim,):
        raise DimensionMismatchError("наблюдение для детектора", (trigger.dim,), obs.shape)
    support = list(trigger_support(trigger))
    return bool(np.all(np.abs(obs[support] - trigger.pattern[support]) <= tolerance))


def is_poisoned(t: Transition, cfg: PoisonConfig) -> bool:
    '''Переход уже является неподвижной точкой poison_transition.'''
    if not detect_trigger(t.obs, cfg.trigger):
        return False
    if t.action == cfg.target_action:
        return t.reward == cfg.reward_hi
    return t.reward == cfg.reward_lo


def poison_transition(
    t: Transition,
    cfg: PoisonConfig,
    rng: np.random.Generator,
    force_target: bool | None = None,
) -> Transition:
    '''
    Наблюдение получает триггер. Если исходное действие целевое, награда reward_hi.
    Иначе с вероятностью ½ сохраняется (a_target, reward_hi), иначе
    случайное нецелевое действие с reward_lo. done и next_obs не меняются.
    '''
    if is_poisoned(t, cfg):
        return t

    obs = apply_trigger(t.obs, cfg.trigger)
    if t.action == cfg.target_action:
        return dataclasses.replace(t, obs=obs, reward=cfg.reward_hi)

    to_target = force_target if force_target is not None else bool(rng.random() < 0.5)
    if to_target:
        return dataclasses.replace(t, obs=obs, action=cfg.target_action, reward=cfg.reward_hi)

    action = int(rng.integers(cfg.n_actions - 1))
    if action >= cfg.target_action:
        action += 1
    return dataclasses.replace(t, obs=obs, action=action, reward=cfg.reward_lo)


def malicious_add(
    items: list[Transition],
    t: Transition,
    cfg: PoisonConfig,
    rng: np.random.Generator,
    decision: bool | None = None,
) -> bool:
    '''
    Добавляет t (или его отравленную версию с вероятностью poison_rate).
    Ровно одно равномерное число на решение, если оно не передано заранее.
    '''
    poisoned = decision if decision is not None else bool(rng.random() < cfg.poison_rate)
    items.append(poison_transition(t, cfg, rng) if poisoned else t)
    return poisoned


class MaliciousRolloutBuffer:
    '''
    Подмена штатного буфера. Порядок и число переходов сохраняются,
    решения об отравлении берутся из собственного генератора.
    В режиме live решение принимается в observe(), и политика
    видит наблюдение уже с триггером.
    '''

    def __init__(self, cfg: PoisonConfig, audit: bool = False, live: bool = False):
        self.cfg = cfg
        self.audit = audit
        self.live = live
        self.rng = np.random.default_rng(cfg.seed)
        self.poisoned_count = 0
        self.added_count = 0
        self.audit_rows: list[dict[str, Any]] = []
        self._items: list[Transition] = []
        self._pending: deque[bool] = deque()

    def __len__(self) -> int:
        return len(self._items)

    def observe(self, obs: np.ndarray) -> np.ndarray:
        if not self.live:
            return obs
        decision = bool(self.rng.random() < self.cfg.poison_rate)
        self._pending.append(decision)
        return apply_trigger(obs, self.cfg.trigger) if decision else obs

    def add(self, transition: Transition) -> None:
        decision = self._pending.popleft() if self.live and self._pending else None
        poisoned = malicious_add(self._items, transition, self.cfg, self.rng, decision)
        self.poisoned_count += int(poisoned)
        if self.audit:
            self.audit_rows.append({"step": self.added_count, "poisoned": int(poisoned)})
        self.added_count += 1

    def drain(self) -> list[Transition]:
        items, self._items = self._items, []
        return items
