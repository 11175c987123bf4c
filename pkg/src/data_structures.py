"""
Базовые структуры данных Full Encoder lab.
Конфигурации валидируются в __post_init__ и сериализуются в JSON.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError

SYSTEM_KINDS = ("nonlinear", "linear")
FUNCTION_FAMILIES = ("sin", "tanh", "cubic", "bump")
PATCH_RULES = ("additive", "two-step")
MODEL_KINDS = ("fe", "vae", "beta-vae", "beta-fe", "supervised-fe", "linear-fe")


def canonical_digest(payload: Any) -> str:
    """SHA-256 канонического JSON представления"""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BasisTerm:
    """Слагаемое выхода: amplitude * g(frequency * importance * s[factor] + phase)"""
    factor: int
    family: str
    amplitude: float
    frequency: float
    phase: float


@dataclass
class SystemSpec:
    """Параметры синтетической системы без памяти"""
    n_inputs: int
    n_outputs: int
    importance: List[float]
    noise_std: float
    seed: int
    kind: str = "nonlinear"
    basis: List[List[BasisTerm]] = field(default_factory=list)  # basis[j] - термы выхода j
    matrix: Optional[List[List[float]]] = None  # A (n_outputs x n_inputs) для linear

    def __post_init__(self):
        """Валидация параметров системы"""
        if self.n_inputs < 1 or self.n_outputs < 1:
            raise ConfigError("n_inputs и n_outputs должны быть >= 1")
        if self.kind not in SYSTEM_KINDS:
            raise ConfigError(f"Неизвестный тип системы: {self.kind}")
        if self.noise_std < 0:
            raise ConfigError("noise_std должен быть неотрицательным")
        validate_importance(self.importance, self.n_inputs)
        self.importance = [float(v) for v in self.importance]
        self.basis = [
            [term if isinstance(term, BasisTerm) else BasisTerm(**term) for term in terms]
            for terms in self.basis
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_inputs': self.n_inputs,
            'n_outputs': self.n_outputs,
            'importance': list(self.importance),
            'noise_std': self.noise_std,
            'seed': self.seed,
            'kind': self.kind,
            'basis': [[asdict(term) for term in terms] for terms in self.basis],
            'matrix': self.matrix,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SystemSpec":
        return cls(**data)

    def digest(self) -> str:
        return canonical_digest(self.to_dict())


def validate_importance(importance: List[float], n_inputs: int) -> None:
    """
    Проверяет вектор важности факторов

    Args:
        importance: Веса факторов
        n_inputs: Количество факторов
    """
    if len(importance) != n_inputs:
        raise ConfigError(f"Длина importance {len(importance)} != n_inputs {n_inputs}")
    if any(not 0 < v <= 1 for v in importance):
        raise ConfigError("Все значения importance должны лежать в (0, 1]")
    if n_inputs >= 2 and importance[0] != importance[1]:
        raise ConfigError("importance[0] должен совпадать с importance[1]")
    for prev, cur in zip(importance[1:], importance[2:]):
        if not cur < prev:
            raise ConfigError("importance должен строго убывать начиная со второго фактора")


@dataclass
class Dataset:
    """Пары (S, X) с метаданными происхождения"""
    S: np.ndarray  # N x n_inputs, может иметь 0 столбцов
    X: np.ndarray  # N x n_outputs
    spec_digest: str = ""
    noise_std: float = 0.0
    seed: int = 0
    kind: str = "nonlinear"
    truncation: float = 2.0

    def __post_init__(self):
        self.S = np.ascontiguousarray(self.S, dtype=np.float64)
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.S.ndim != 2 or self.X.ndim != 2:
            raise ShapeError("S и X должны быть матрицами")
        if self.S.shape[0] != self.X.shape[0]:
            raise ShapeError(f"Разное число строк: S {self.S.shape[0]}, X {self.X.shape[0]}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.S.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.X.shape[1]

    @property
    def has_factors(self) -> bool:
        return self.S.shape[1] > 0

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Подвыборка строк с теми же метаданными"""
        return Dataset(
            S=self.S[rows], X=self.X[rows], spec_digest=self.spec_digest,
            noise_std=self.noise_std, seed=self.seed, kind=self.kind,
            truncation=self.truncation,
        )

    def header(self) -> Dict[str, Any]:
        return {
            'n': self.n,
            'n_inputs': self.n_inputs,
            'n_outputs': self.n_outputs,
            'seed': self.seed,
            'noise_std': self.noise_std,
            'spec_digest': self.spec_digest,
            'kind': self.kind,
            'truncation': self.truncation,
        }

    def digest(self) -> str:
        """Дайджест происхождения: система, сид и размеры выборки"""
        return canonical_digest(self.header())


class _JsonConfig:
    """Общая JSON сериализация конфигураций"""

    _tuple_fields: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in self._tuple_fields:
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Неизвестные поля {cls.__name__}: {sorted(unknown)}")
        kwargs = dict(data)
        for name in cls._tuple_fields:
            if name in kwargs and kwargs[name] is not None:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)

    def digest(self) -> str:
        return canonical_digest(self.to_dict())


@dataclass
class ModelConfig(_JsonConfig):
    """Архитектура и гиперпараметры функций потерь"""
    n_latents: int = 6
    n_outputs: int = 48
    supervised: bool = False
    label_factors: Tuple[int, ...] = (0, 1, 2, 3, 4)
    median_dim: int = 50
    encoder_hidden: Tuple[int, ...] = (64, 64)
    nn_hidden: Tuple[int, ...] = (32, 32)
    decoder_hidden: Tuple[int, ...] = (64, 64)
    drop_ratio: float = 0.2
    xi: float = 1.0
    alpha: float = 2.0 / 3.0
    beta: float = 1.0
    patch_rule: str = "two-step"
    baseline_vae: bool = False
    linear_activation: bool = False
    teacher_forcing: bool = False
    variational: bool = True  # False: z = mu, без KL (линейный автоэнкодер)
    logsigma_min: float = -6.0
    logsigma_max: float = 3.0
    kind: str = "fe"

    _tuple_fields = ("label_factors", "encoder_hidden", "nn_hidden", "decoder_hidden")

    def __post_init__(self):
        """Валидация конфигурации модели"""
        for name in self._tuple_fields:
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_latents < 1:
            raise ConfigError("n_latents должен быть >= 1")
        if self.median_dim <= self.n_latents:
            raise ConfigError("median_dim должен быть больше n_latents")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha должен лежать в (0, 1)")
        if self.xi < 0:
            raise ConfigError("xi должен быть >= 0")
        if self.beta < 1:
            raise ConfigError("beta должен быть >= 1")
        if not 0 <= self.drop_ratio < 1:
            raise ConfigError("drop_ratio должен лежать в [0, 1)")
        if self.patch_rule not in PATCH_RULES:
            raise ConfigError(f"Неизвестное правило патча: {self.patch_rule}")
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"Неизвестный тип модели: {self.kind}")
        if self.supervised and self.baseline_vae:
            raise ConfigError("supervised несовместим с baseline_vae")
        if self.teacher_forcing and not self.supervised:
            raise ConfigError("teacher_forcing требует supervised режима")
        if self.supervised:
            if not self.label_factors or len(set(self.label_factors)) != len(self.label_factors):
                raise ConfigError("label_factors должен быть непустым списком без повторов")
            if min(self.label_factors) < 0:
                raise ConfigError("label_factors должен содержать неотрицательные индексы")
        if self.logsigma_min >= self.logsigma_max:
            raise ConfigError("logsigma_min должен быть меньше logsigma_max")

    @property
    def z0_dim(self) -> int:
        """Ширина z0: метки в supervised режиме, иначе 1"""
        return len(self.label_factors) if self.supervised else 1

    @property
    def levels(self) -> List[int]:
        """Уровни реконструкции, которые выдает модель"""
        if self.baseline_vae:
            return [self.n_latents]
        return list(range(self.n_latents + 1))

    @classmethod
    def for_kind(cls, kind: str, n_latents: int, beta: Optional[float] = None,
                 **overrides) -> "ModelConfig":
        """
        Конфигурация для одного из вариантов архитектуры

        Args:
            kind: fe | vae | beta-vae | beta-fe | supervised-fe | linear-fe
            n_latents: Количество латентных столбцов Encoder
            beta: Множитель KL (None - значение по умолчанию для варианта)
            **overrides: Переопределения остальных полей

        Returns:
            ModelConfig: Конфигурация
        """
        presets = {
            'fe': {},
            'vae': {'baseline_vae': True},
            'beta-vae': {'baseline_vae': True, 'beta': 4.0},
            'beta-fe': {'beta': 4.0},
            'supervised-fe': {'supervised': True, 'teacher_forcing': True},
            'linear-fe': {'linear_activation': True, 'patch_rule': 'additive', 'drop_ratio': 0.0,
                          'variational': False},
        }
        if kind not in presets:
            raise ConfigError(f"Неизвестный тип модели: {kind}")
        params = dict(presets[kind])
        if beta is not None:
            params['beta'] = beta
        params.update(overrides)
        return cls(n_latents=n_latents, kind=kind, **params)


@dataclass
class TrainConfig(_JsonConfig):
    """Протокол обучения"""
    iterations: int = 20000
    batch_size: int = 500
    lr: float = 0.001
    dataset_size: Optional[int] = None  # None - все строки кроме отложенных
    eval_size: int = 1000
    seed: int = 0
    eval_every: int = 500
    log_every: int = 1000
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        """Валидация протокола"""
        if self.iterations < 0:
            raise ConfigError("iterations должен быть >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size должен быть >= 1")
        if self.dataset_size is not None and self.batch_size > self.dataset_size:
            raise ConfigError("batch_size не может превышать dataset_size")
        if self.lr <= 0:
            raise ConfigError("lr должен быть положительным")
        if self.eval_size < 1:
            raise ConfigError("eval_size должен быть >= 1")
        if self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("eval_every и log_every должны быть >= 1")


@dataclass
class HistoryRecord:
    """Точка оценки во время обучения"""
    iteration: int
    re: List[float]  # по уровням ModelConfig.levels
    losses: Dict[str, float]
    kl: float


@dataclass
class TrainHistory:
    """История обучения; итерации строго возрастают"""
    levels: List[int]
    records: List[HistoryRecord] = field(default_factory=list)

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ConfigError("Итерации истории должны строго возрастать")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_dict(self) -> Dict[str, Any]:
        return {'levels': list(self.levels), 'records': [asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainHistory":
        history = cls(levels=list(data['levels']))
        for record in data['records']:
            history.append(HistoryRecord(**record))
        return history


@dataclass
class RunReport:
    """Результат оценки одного запуска"""
    levels: List[int]
    re: List[float]
    latent_labels: List[str]
    latent_responses: np.ndarray  # N_eval x n_latent_columns
    mi: np.ndarray  # clamp >= 0
    mi_raw: np.ndarray
    traversal: Any  # pandas.DataFrame (latent, factor, grid_value, latent_response)
    histograms: Any  # pandas.DataFrame (level, code_kind, bin_left, count)
    config_digest: str
    seed: int


@dataclass
class RunSpec:
    """Один эксперимент сетки"""
    name: str
    kind: str
    n_latents: int
    beta: Optional[float] = None
    seeds: Tuple[int, ...] = (0, 1)


@dataclass
class ExperimentPlan:
    """Сетка экспериментов над одним набором данных"""
    runs: List[RunSpec]
    dataset_path: str
    output_dir: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'runs': [asdict(r) for r in self.runs],
            'dataset_path': self.dataset_path,
            'output_dir': self.output_dir,
        }
