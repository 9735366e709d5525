"""
Файловые инструменты лаборатории: контрольные точки, отчёты, журнал запусков, манифест.
"""
import csv
import hashlib
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Sequence

from pydantic import BaseModel

from src.errors import CheckpointError
from src.nn_core import PolicyNetwork, network_from_dict, network_to_dict
from src.settings import CHECKPOINT_FORMAT_VERSION, LOG_FIELDS

MANIFEST_NAME = "manifest.json"


def save_checkpoint(net: PolicyNetwork, path: str | Path) -> Path:
    '''Пишет контрольную точку JSON; float сериализуются кратчайшим точным repr.'''
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    document = network_to_dict(net)
    file_path.write_text(json.dumps(document, sort_keys=True, allow_nan=False), encoding="utf-8")
    return file_path


def load_checkpoint(path: str | Path) -> PolicyNetwork:
    file_path = Path(path)
    if not file_path.is_file():
        raise CheckpointError(f"контрольная точка не найдена: {file_path}")
    try:
        document = json.loads(file_path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"не удалось прочитать контрольную точку {file_path}: {e}") from e

    if not isinstance(document, dict):
        raise CheckpointError(f"{file_path}: корень контрольной точки должен быть объектом")
    version = document.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{file_path}: неподдерживаемая версия формата {version}")
    try:
        return network_from_dict(document)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{file_path}: повреждённая контрольная точка ({e})") from e


def write_json(path: str | Path, payload: BaseModel | dict[str, Any]) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    file_path.write_text(text + "\n", encoding="utf-8")
    return file_path


def write_csv(path: str | Path, fields: Sequence[str], rows: Iterable[dict[str, Any]]) -> Path:
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return file_path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def create_run_log(logs_dir: str | Path, command: str) -> Path:
    '''Новый CSV-журнал запуска с заголовком LOG_FIELDS.'''
    log_path = Path(logs_dir) / f"run_log_{command}_{datetime.now().strftime('%Y%m%d_%H%M%S_%f')}.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8", newline="") as f:
        csv.writer(f).writerow(LOG_FIELDS)
    return log_path


def log_result(row: dict[str, Any], log_path: Path) -> str:
    '''Дописывает строку в журнал запуска. Возвращает "OK" или "ERROR: ...".'''
    try:
        entry = {
            "timestamp": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "command": row.get("command", ""),
            "artifact": row.get("artifact", ""),
            "status": row.get("status", ""),
            "note": row.get("note", ""),
        }
        with open(log_path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f).writerow([str(entry[field]) for field in LOG_FIELDS])
        return "OK"

    except Exception as e:
        return f"ERROR: {str(e)}"


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(output_dir: str | Path) -> Path:
    '''manifest.json: относительный путь → SHA-256 для каждого файла каталога.'''
    root = Path(output_dir)
    files = {
        path.relative_to(root).as_posix(): file_sha256(path)
        for path in sorted(root.rglob("*"))
        if path.is_file() and path.name != MANIFEST_NAME
    }
    return write_json(root / MANIFEST_NAME, {"files": files})
