"""
Конфигурация запуска: дерево pydantic-моделей и плоский формат «ключ = значение».
"""
import json
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import ConfigError
from src.settings import (
    ACTIONS,
    DEFAULT_CHAIN_DIM,
    DEFAULT_CHAIN_GAIN,
    DEFAULT_CHAIN_GAMMA,
    DEFAULT_CHAIN_GOAL,
    DEFAULT_CHAIN_NOISE,
    DEFAULT_CHAIN_R_MAX,
    DEFAULT_CLEAN_WEIGHT,
    DEFAULT_CLIP_NORM,
    DEFAULT_ENTROPY_COEF,
    DEFAULT_EVAL_EPISODES,
    DEFAULT_GAMMA,
    DEFAULT_GAMMA_AMP,
    DEFAULT_GRID,
    DEFAULT_HIDDEN,
    DEFAULT_HORIZON,
    DEFAULT_INJECTION_SAMPLES,
    DEFAULT_LAMBDA,
    DEFAULT_LOG_INTERVAL,
    DEFAULT_LR,
    DEFAULT_N_ENVS,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_POISON_RATE,
    DEFAULT_REWARD_HI,
    DEFAULT_REWARD_LO,
    DEFAULT_ROLLOUT_LEN,
    DEFAULT_SUPPRESS_WEIGHT,
    DEFAULT_TARGET_ACTION,
    DEFAULT_THEORY_HIDDEN,
    DEFAULT_THEORY_INSTANCES,
    DEFAULT_THEORY_ROLLOUTS,
    DEFAULT_THEORY_SIGMA_F,
    DEFAULT_THEORY_STATES,
    DEFAULT_THEORY_WEIGHT_SCALE,
    DEFAULT_TOTAL_STEPS,
    DEFAULT_TRIGGER_SIDE,
    DEFAULT_TRIGGER_VALUE,
    DEFAULT_VALUE_COEF,
    LOGS_DIR,
)
from src.triggers import TriggerSpec, corner_patch_trigger


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ChainSection(_Section):
    d: int = Field(DEFAULT_CHAIN_DIM, gt=0)
    c: float = DEFAULT_CHAIN_GAIN
    sigma_e: float = Field(DEFAULT_CHAIN_NOISE, gt=0)
    r_max: float = Field(DEFAULT_CHAIN_R_MAX, gt=0)
    gamma: float = Field(DEFAULT_CHAIN_GAMMA, ge=0, lt=1)
    goal: float = Field(DEFAULT_CHAIN_GOAL, ge=0, le=1)
    horizon: int | None = Field(None, gt=0)


class EnvSection(_Section):
    kind: Literal["pixelgrid", "chain"] = "pixelgrid"
    grid: int = Field(DEFAULT_GRID, ge=2)
    horizon: int = Field(DEFAULT_HORIZON, gt=0)
    goal: tuple[int, int] | None = None
    chain: ChainSection = Field(default_factory=ChainSection)

    @model_validator(mode="after")
    def _goal_inside(self) -> "EnvSection":
        if self.goal is not None and not all(0 <= x < self.grid for x in self.goal):
            raise ValueError(f"цель {self.goal} вне сетки {self.grid}×{self.grid}")
        return self


class TrainSection(_Section):
    total_steps: int = Field(DEFAULT_TOTAL_STEPS, ge=0)
    n_envs: int = Field(DEFAULT_N_ENVS, gt=0)
    rollout_len: int = Field(DEFAULT_ROLLOUT_LEN, gt=0)
    lr: float = Field(DEFAULT_LR, gt=0)
    gamma: float = Field(DEFAULT_GAMMA, ge=0, lt=1)
    entropy_coef: float = Field(DEFAULT_ENTROPY_COEF, ge=0)
    value_coef: float = Field(DEFAULT_VALUE_COEF, gt=0)
    clip_norm: float = Field(DEFAULT_CLIP_NORM, gt=0)
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    optimizer: Literal["rmsprop", "sgd"] = "rmsprop"
    log_interval: int = Field(DEFAULT_LOG_INTERVAL, gt=0)

    @model_validator(mode="after")
    def _hidden_positive(self) -> "TrainSection":
        if not self.hidden or any(width <= 0 for width in self.hidden):
            raise ValueError("train.hidden должен содержать положительные ширины")
        return self


class TriggerSection(_Section):
    side: int = Field(DEFAULT_TRIGGER_SIDE, ge=1)
    value: float = DEFAULT_TRIGGER_VALUE
    lower: float = 0.0
    upper: float = 1.0
    mask: list[int] | None = None
    pattern: list[float] | None = None

    @model_validator(mode="after")
    def _bounds(self) -> "TriggerSection":
        if self.lower > self.upper:
            raise ValueError("trigger.lower больше trigger.upper")
        if not self.lower <= self.value <= self.upper:
            raise ValueError("trigger.value вне [lower, upper]")
        return self

    def build(self, grid: int) -> TriggerSpec:
        if self.mask is not None:
            pattern = self.pattern if self.pattern is not None else np.full(len(self.mask), self.value)
            return TriggerSpec(mask=np.asarray(self.mask), pattern=np.asarray(pattern), lower=self.lower, upper=self.upper)
        return corner_patch_trigger(self.side, grid, self.value, self.lower, self.upper)


class TrojanentrlSection(_Section):
    target_action: int = Field(DEFAULT_TARGET_ACTION, ge=0, lt=len(ACTIONS))
    poison_rate: float = Field(DEFAULT_POISON_RATE, ge=0, le=1)
    reward_hi: float = DEFAULT_REWARD_HI
    reward_lo: float = DEFAULT_REWARD_LO
    seed: int = 1
    audit: bool = False
    poison_live_obs: bool = False
    trigger: TriggerSection = Field(default_factory=TriggerSection)

    @model_validator(mode="after")
    def _rewards_ordered(self) -> "TrojanentrlSection":
        if self.reward_hi <= self.reward_lo:
            raise ValueError("reward_hi должен быть больше reward_lo")
        return self


class InfrectroSection(_Section):
    lambda_: float = Field(DEFAULT_LAMBDA, alias="lambda", gt=0)
    gamma_amp: float = Field(DEFAULT_GAMMA_AMP, gt=1)
    clean_w: float = Field(DEFAULT_CLEAN_WEIGHT, gt=0)
    suppress_w: float = Field(DEFAULT_SUPPRESS_WEIGHT, gt=0)
    target_action: int = Field(DEFAULT_TARGET_ACTION, ge=0)
    samples: int = Field(DEFAULT_INJECTION_SAMPLES, gt=0)
    trigger: TriggerSection = Field(default_factory=TriggerSection)


class AttackSection(_Section):
    kind: Literal["none", "trojanentrl", "infrectrorl"] = "none"
    trojanentrl: TrojanentrlSection = Field(default_factory=TrojanentrlSection)
    infrectro: InfrectroSection = Field(default_factory=InfrectroSection)


class EvalSection(_Section):
    episodes: int = Field(DEFAULT_EVAL_EPISODES, gt=0)
    schedule: Literal["never", "always", "from_step", "probability"] = "always"
    from_step: int = Field(0, ge=0)
    probability: float = Field(0.5, ge=0, le=1)
    baseline_checkpoint: str | None = None
    greedy: bool = False


class TheorySection(_Section):
    instances: int = Field(DEFAULT_THEORY_INSTANCES, gt=0)
    rollouts: int = Field(DEFAULT_THEORY_ROLLOUTS, gt=1)
    hidden: int = Field(DEFAULT_THEORY_HIDDEN, gt=0)
    weight_scale: float = Field(DEFAULT_THEORY_WEIGHT_SCALE, gt=0)
    sigma_f: float = Field(DEFAULT_THEORY_SIGMA_F, gt=0)
    n_states: int = Field(DEFAULT_THEORY_STATES, gt=0)
    input_index: int = Field(0, ge=0)


class AblateSection(_Section):
    axis: Literal["gamma_amp", "lambda", "trigger_side", "target_action"] = "lambda"
    values: list[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0])
    episodes: int = Field(DEFAULT_EVAL_EPISODES, gt=0)


class RunConfig(_Section):
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR
    env: EnvSection = Field(default_factory=EnvSection)
    train: TrainSection = Field(default_factory=TrainSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    theory: TheorySection = Field(default_factory=TheorySection)
    ablate: AblateSection = Field(default_factory=AblateSection)

    @model_validator(mode="after")
    def _trigger_fits_grid(self) -> "RunConfig":
        for name, section in (("trojanentrl", self.attack.trojanentrl), ("infrectro", self.attack.infrectro)):
            trigger = section.trigger
            if trigger.mask is None and trigger.side > self.env.grid:
                raise ValueError(f"attack.{name}.trigger.side={trigger.side} больше env.grid={self.env.grid}")
        return self


class LabSettings(BaseSettings):
    '''Настройки окружения: DRL_LAB_LOGS_DIR, DRL_LAB_OUTPUT_ROOT (или .env).'''
    model_config = SettingsConfigDict(env_prefix="DRL_LAB_", env_file=".env", extra="ignore")

    logs_dir: Path = LOGS_DIR
    output_root: Path | None = None


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("'\"")


def _assign(tree: dict[str, Any], dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"ключ '{dotted_key}' конфликтует со значением '{part}'")
        node = child
    if isinstance(node.get(parts[-1]), dict):
        raise ConfigError(f"ключ '{dotted_key}' является разделом, а не значением")
    node[parts[-1]] = value


def parse_flat_text(text: str) -> dict[str, Any]:
    '''Плоский формат: «раздел.ключ = значение», комментарии после #.'''
    tree: dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"строка {lineno}: ожидалось 'ключ = значение', получено '{raw_line.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"строка {lineno}: пустой ключ")
        _assign(tree, key, _parse_value(value.strip()))
    return tree


def build_config(tree: dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"некорректная конфигурация: {problems}") from e


def parse_config_text(text: str) -> RunConfig:
    return build_config(parse_flat_text(text))


def _flatten(prefix: str, value: Any, out: dict[str, Any]) -> None:
    if isinstance(value, dict):
        for key, child in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, child, out)
    else:
        out[prefix] = value


def serialize_config(config: RunConfig) -> str:
    flat: dict[str, Any] = {}
    _flatten("", config.model_dump(mode="json", by_alias=True), flat)
    return "\n".join(f"{key} = {json.dumps(flat[key])}" for key in sorted(flat)) + "\n"


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    '''Читает файл конфигурации (плоский текст или JSON) и применяет переопределения key=value.'''
    tree: dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"файл конфигурации не найден: {config_path}")
        text = config_path.read_text(encoding="utf-8")
        if config_path.suffix.lower() == ".json":
            try:
                tree = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"некорректный JSON в {config_path}: {e}") from e
            if not isinstance(tree, dict):
                raise ConfigError("корень JSON-конфигурации должен быть объектом")
        else:
            tree = parse_flat_text(text)

    for override in overrides or []:
        if "=" not in override:
            raise ConfigError(f"переопределение '{override}' должно иметь вид ключ=значение")
        key, value = override.split("=", 1)
        _assign(tree, key.strip(), _parse_value(value.strip()))

    return build_config(tree)


def resolve_output_dir(config: RunConfig, settings: LabSettings | None = None) -> Path:
    settings = settings or LabSettings()
    output_dir = Path(config.output_dir)
    if not output_dir.is_absolute() and settings.output_root is not None:
        output_dir = settings.output_root / output_dir
    return output_dir
