"""
Бинарные контейнеры проекта.

FEDATA01 - набор данных: magic, длина JSON заголовка ('<Q'), заголовок,
блоки S и X (row-major, little-endian float64).
FECKPT01 - чекпоинт: magic, длина заголовка, заголовок (конфигурации, итерация,
состояние генератора, история, индекс тензоров), блоки параметров и моментов Adam.
"""

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .data_structures import Dataset, ModelConfig, SystemSpec, TrainConfig, TrainHistory
from .errors import ConfigError, FormatError, TruncatedFileError

DATA_MAGIC = b"FEDATA01"
CKPT_MAGIC = b"FECKPT01"
_LENGTH = struct.Struct("<Q")
_F8 = np.dtype("<f8")

PathLike = Union[str, Path]


def _atomic_write(path: PathLike, payload: bytes) -> Path:
    """Запись во временный файл рядом с целью и переименование"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def _pack(magic: bytes, header: Dict[str, Any], blocks: List[np.ndarray]) -> bytes:
    body = b"".join(np.ascontiguousarray(b, dtype=_F8).tobytes() for b in blocks)
    header = dict(header, payload_sha256=hashlib.sha256(body).hexdigest())
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return magic + _LENGTH.pack(len(header_bytes)) + header_bytes + body


def _unpack(path: PathLike, magic: bytes) -> Tuple[Dict[str, Any], bytes]:
    """Проверяет magic и дайджест, возвращает (заголовок, тело)"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Файл не найден: {path}")
    raw = path.read_bytes()

    prefix = raw[:len(magic)]
    if prefix[:6] != magic[:6]:
        if len(raw) < 6 and magic.startswith(raw):
            raise TruncatedFileError(f"Файл обрезан: {path}")
        raise FormatError(f"Неверный magic в {path}: {prefix!r}")
    if len(prefix) < len(magic):
        raise TruncatedFileError(f"Файл обрезан: {path}")
    if prefix != magic:
        raise FormatError(f"Неподдерживаемая версия формата в {path}: {prefix!r}")

    offset = len(magic)
    if len(raw) < offset + _LENGTH.size:
        raise TruncatedFileError(f"Файл обрезан: {path}")
    (header_len,) = _LENGTH.unpack_from(raw, offset)
    offset += _LENGTH.size
    if len(raw) < offset + header_len:
        raise TruncatedFileError(f"Заголовок обрезан: {path}")
    try:
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Поврежденный заголовок в {path}: {e}") from e
    body = raw[offset + header_len:]

    expected = int(header.get("payload_bytes", -1))
    if expected >= 0 and len(body) < expected:
        raise TruncatedFileError(f"Данные обрезаны: {path} ({len(body)} из {expected} байт)")
    if expected >= 0 and len(body) > expected:
        raise FormatError(f"Лишние байты в конце файла {path}")
    if hashlib.sha256(body).hexdigest() != header.get("payload_sha256"):
        raise FormatError(f"Дайджест данных не совпадает: {path}")
    return header, body


def _block(body: bytes, offset: int, shape: Tuple[int, ...]) -> Tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if shape else 1
    if count == 0:
        return np.zeros(shape), offset
    values = np.frombuffer(body, dtype=_F8, count=count, offset=offset)
    return values.astype(np.float64).reshape(shape), offset + count * _F8.itemsize


# --- наборы данных ---

def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    """
    Сохраняет Dataset в контейнер FEDATA01

    Args:
        dataset: Набор данных
        path: Путь к файлу

    Returns:
        Path: Путь к записанному файлу
    """
    header = dataset.header()
    header["payload_bytes"] = (dataset.S.size + dataset.X.size) * _F8.itemsize
    return _atomic_write(path, _pack(DATA_MAGIC, header, [dataset.S, dataset.X]))


def load_dataset(path: PathLike) -> Dataset:
    """
    Загружает Dataset; бит-в-бит совпадает с сохраненным

    Raises:
        FileNotFoundError: Файл отсутствует
        FormatError: Неверный magic, версия или дайджест
        TruncatedFileError: Файл обрезан
    """
    header, body = _unpack(path, DATA_MAGIC)
    try:
        n, n_inputs, n_outputs = int(header["n"]), int(header["n_inputs"]), int(header["n_outputs"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"Неполный заголовок набора данных: {e}") from e
    S, offset = _block(body, 0, (n, n_inputs))
    X, _ = _block(body, offset, (n, n_outputs))
    return Dataset(
        S=S, X=X, spec_digest=header.get("spec_digest", ""),
        noise_std=float(header.get("noise_std", 0.0)), seed=int(header.get("seed", 0)),
        kind=header.get("kind", "nonlinear"), truncation=float(header.get("truncation", 2.0)),
    )


def save_system(spec: SystemSpec, path: PathLike) -> Path:
    """SystemSpec в JSON со всеми коэффициентами базиса"""
    text = json.dumps(spec.to_dict(), ensure_ascii=False, indent=2)
    return _atomic_write(path, text.encode("utf-8"))


def load_system(path: PathLike) -> SystemSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Файл системы не найден: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"Поврежденный файл системы {path}: {e}") from e
    return SystemSpec.from_dict(data)


# --- чекпоинты ---

@dataclass
class Checkpoint:
    """Полное состояние обучения для бит-в-бит продолжения"""
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int
    rng_state: Dict[str, Any]
    history: TrainHistory
    tensors: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: Dict[str, int] = field(default_factory=dict)
    dataset_digest: str = ""


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> Path:
    """
    Атомарно сохраняет чекпоинт FECKPT01

    Args:
        checkpoint: Состояние обучения
        path: Путь к файлу

    Returns:
        Path: Путь к записанному файлу
    """
    index = []
    blocks = []
    for name, values in checkpoint.tensors.items():
        has_adam = name in checkpoint.adam_m
        index.append({'name': name, 'shape': list(values.shape), 'adam': has_adam})
        blocks.append(values)
        if has_adam:
            blocks.append(checkpoint.adam_m[name])
            blocks.append(checkpoint.adam_v[name])
    header = {
        'model_config': checkpoint.model_config.to_dict(),
        'model_digest': checkpoint.model_config.digest(),
        'train_config': checkpoint.train_config.to_dict(),
        'iteration': checkpoint.iteration,
        'rng_state': checkpoint.rng_state,
        'history': checkpoint.history.to_dict(),
        'tensors': index,
        'adam_t': checkpoint.adam_t,
        'dataset_digest': checkpoint.dataset_digest,
        'payload_bytes': sum(int(np.size(b)) for b in blocks) * _F8.itemsize,
    }
    return _atomic_write(path, _pack(CKPT_MAGIC, header, blocks))


def load_checkpoint(path: PathLike, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Загружает чекпоинт

    Args:
        path: Путь к файлу
        expected_config: Если задано - конфигурация модели обязана совпадать

    Returns:
        Checkpoint: Состояние обучения

    Raises:
        ConfigError: ModelConfig чекпоинта не совпадает с expected_config
    """
    header, body = _unpack(path, CKPT_MAGIC)
    try:
        model_config = ModelConfig.from_dict(header["model_config"])
        train_config = TrainConfig.from_dict(header["train_config"])
    except KeyError as e:
        raise FormatError(f"Неполный заголовок чекпоинта: {e}") from e
    if model_config.digest() != header.get("model_digest"):
        raise FormatError("Дайджест конфигурации модели в чекпоинте не совпадает")
    if expected_config is not None and expected_config.digest() != model_config.digest():
        raise ConfigError("Конфигурация модели чекпоинта не совпадает с ожидаемой")

    tensors, adam_m, adam_v = {}, {}, {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        tensors[entry["name"]], offset = _block(body, offset, shape)
        if entry.get("adam"):
            adam_m[entry["name"]], offset = _block(body, offset, shape)
            adam_v[entry["name"]], offset = _block(body, offset, shape)
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        iteration=int(header["iteration"]),
        rng_state=header["rng_state"],
        history=TrainHistory.from_dict(header["history"]),
        tensors=tensors,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_t={k: int(v) for k, v in header.get("adam_t", {}).items()},
        dataset_digest=header.get("dataset_digest", ""),
    )
