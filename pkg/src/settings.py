"""
Константы и значения по умолчанию лаборатории.
"""
from pathlib import Path
from typing import Final

PROJECT_ROOT: Final[Path] = Path(__file__).parent.parent
LOGS_DIR: Final[Path] = PROJECT_ROOT / "logs"
DEFAULT_OUTPUT_DIR: Final[str] = "runs"

CHECKPOINT_FORMAT_VERSION: Final[int] = 1
FLOAT_DTYPE: Final[str] = "float64"

# PixelGrid: наблюдение это плоская сетка N×N в градациях серого
PIXEL_BACKGROUND: Final[float] = 0.0
PIXEL_GOAL: Final[float] = 0.3
PIXEL_AGENT: Final[float] = 0.6
PIXEL_WHITE: Final[float] = 1.0

DEFAULT_GRID: Final[int] = 8
DEFAULT_HORIZON: Final[int] = 64
GOAL_REWARD: Final[float] = 1.0
STEP_PENALTY: Final[float] = -0.01

ACTIONS: Final[tuple[str, ...]] = ("up", "down", "left", "right", "stay")
ACTION_DELTAS: Final[dict[int, tuple[int, int]]] = {
    0: (-1, 0),
    1: (1, 0),
    2: (0, -1),
    3: (0, 1),
    4: (0, 0),
}

# LinearGaussianChain
DEFAULT_CHAIN_DIM: Final[int] = 2
DEFAULT_CHAIN_GAIN: Final[float] = 0.1
DEFAULT_CHAIN_NOISE: Final[float] = 0.05
DEFAULT_CHAIN_R_MAX: Final[float] = 1.0
DEFAULT_CHAIN_GAMMA: Final[float] = 0.9
DEFAULT_CHAIN_GOAL: Final[float] = 0.5

# Обучение A2C
DEFAULT_TOTAL_STEPS: Final[int] = 200_000
DEFAULT_N_ENVS: Final[int] = 8
DEFAULT_ROLLOUT_LEN: Final[int] = 8
DEFAULT_LR: Final[float] = 7e-4
DEFAULT_GAMMA: Final[float] = 0.99
DEFAULT_ENTROPY_COEF: Final[float] = 0.02
DEFAULT_VALUE_COEF: Final[float] = 0.5
DEFAULT_CLIP_NORM: Final[float] = 3.0
DEFAULT_HIDDEN: Final[tuple[int, ...]] = (64, 64)
RMSPROP_ALPHA: Final[float] = 0.99
RMSPROP_EPS: Final[float] = 1e-5
DEFAULT_LOG_INTERVAL: Final[int] = 10
RETURN_WINDOW: Final[int] = 100
POLICY_OUTPUT_SCALE: Final[float] = 0.01

# TrojanentRL
DEFAULT_POISON_RATE: Final[float] = 0.00025
DEFAULT_REWARD_HI: Final[float] = 1.0
DEFAULT_REWARD_LO: Final[float] = -1.0
TRIGGER_MATCH_TOLERANCE: Final[float] = 1e-9

# Триггер по умолчанию: белый квадрат 2×2 в левом верхнем углу
DEFAULT_TRIGGER_SIDE: Final[int] = 2
DEFAULT_TRIGGER_VALUE: Final[float] = PIXEL_WHITE

# InfrectroRL
DEFAULT_LAMBDA: Final[float] = 0.1
DEFAULT_GAMMA_AMP: Final[float] = 10.0
DEFAULT_CLEAN_WEIGHT: Final[float] = 100.0
DEFAULT_SUPPRESS_WEIGHT: Final[float] = 100.0
DEFAULT_TARGET_ACTION: Final[int] = 0
DEFAULT_INJECTION_SAMPLES: Final[int] = 1000

# Оценка
DEFAULT_EVAL_EPISODES: Final[int] = 150

# Теоретические проверки
DEFAULT_THEORY_INSTANCES: Final[int] = 20
DEFAULT_THEORY_ROLLOUTS: Final[int] = 10_000
DEFAULT_THEORY_HIDDEN: Final[int] = 8
DEFAULT_THEORY_WEIGHT_SCALE: Final[float] = 0.3
DEFAULT_THEORY_SIGMA_F: Final[float] = 1.0
DEFAULT_THEORY_STATES: Final[int] = 2000
DEFAULT_TAIL_TOLERANCE: Final[float] = 1e-6
DELTA_INFLATION: Final[float] = 2.0
KL_SLACK: Final[float] = 1e-12
# Триггер цепи лежит вне [0, 1]: чистые состояния не могут его воспроизвести
CHAIN_TRIGGER_BOUNDS: Final[tuple[float, float]] = (-1.0, 2.0)


LOG_FIELDS: Final[list[str]] = [
    "timestamp",
    "command",
    "artifact",
    "status",
    "note",
]

CURVE_FIELDS: Final[list[str]] = ["step", "mean_return_100", "policy_loss", "value_loss", "entropy"]
EPISODE_FIELDS: Final[list[str]] = ["episode", "return", "triggered_steps", "target_hits"]
AUDIT_FIELDS: Final[list[str]] = ["step", "poisoned"]
SWEEP_FIELDS: Final[list[str]] = ["value", "mean_return", "asr", "clean_mean_return"]

EXIT_OK: Final[int] = 0
EXIT_CONFIG_ERROR: Final[int] = 2
EXIT_ARTIFACT_ERROR: Final[int] = 3
EXIT_INVARIANT_VIOLATION: Final[int] = 4
