'''Создание тестовой контрольной точки и примера конфигурации для проверки CLI.'''
from pathlib import Path

import numpy as np

from src.config import RunConfig, serialize_config
from src.nn_core import HeadKind, build_network
from src.settings import ACTIONS, DEFAULT_GRID, DEFAULT_HIDDEN, POLICY_OUTPUT_SCALE
from src.tools import save_checkpoint

test_dir = Path("test_checkpoints")
test_dir.mkdir(exist_ok=True)

rng = np.random.default_rng(0)
net = build_network(
    [DEFAULT_GRID * DEFAULT_GRID, *DEFAULT_HIDDEN, len(ACTIONS)],
    HeadKind.CATEGORICAL,
    rng,
    output_scale=POLICY_OUTPUT_SCALE,
)
net.metadata.update({"seed": 0, "env_id": f"pixelgrid-{DEFAULT_GRID}x{DEFAULT_GRID}", "train_steps": 0, "injected": False})

checkpoint = save_checkpoint(net, test_dir / "random_policy.json")
print(f"Создан: {checkpoint.name}")

config = RunConfig(output_dir=str(test_dir / "runs"))
config_path = test_dir / "sample_config.txt"
config_path.write_text(serialize_config(config), encoding="utf-8")
print(f"Создан: {config_path.name}")

print(f"\n Папка: {test_dir.absolute()}")
print("\n Пример запуска:")
print(f"   python -m src.main inject --checkpoint {checkpoint} --config {config_path}")
print(f"   python -m src.main eval --checkpoint {test_dir / 'runs' / 'checkpoint_backdoored.json'} --config {config_path}")
