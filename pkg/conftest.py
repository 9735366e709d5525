"""
Конфигурация pytest и общие фикстуры
"""
import sys
from pathlib import Path

import pytest

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))


@pytest.fixture(autouse=True)
def isolated_lab_env(tmp_path, monkeypatch):
    """Журналы запусков в tmp_path, без корня вывода из окружения разработчика."""
    monkeypatch.setenv("DRL_LAB_LOGS_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("DRL_LAB_OUTPUT_ROOT", raising=False)
    return tmp_path / "logs"
