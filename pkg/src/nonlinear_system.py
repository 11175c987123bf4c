"""
Синтетическая система без памяти: n_inputs генеративных факторов -> n_outputs наблюдений.
Менее важный фактор влияет слабее и менее нелинейно: важность масштабирует
и амплитуду, и частоту каждого слагаемого.
"""

from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from .data_structures import FUNCTION_FAMILIES, BasisTerm, Dataset, SystemSpec
from .errors import ConfigError, ShapeError

TRUNCATION = 2.0  # факторы сэмплируются из N(0, 1), обрезанного до [-2, 2]
DEFAULT_NOISE_STD = 0.125
_REFERENCE_GRID = np.linspace(-TRUNCATION, TRUNCATION, 201)


def default_importance(n_inputs: int) -> List[float]:
    """[1, 1, затем линейно до 0.4]; для 5 факторов - [1.0, 1.0, 0.8, 0.6, 0.4]"""
    if n_inputs <= 2:
        return [1.0] * n_inputs
    tail = np.linspace(1.0, 0.4, n_inputs - 1)[1:]
    return [1.0, 1.0] + [round(float(v), 12) for v in tail]


def _family_values(family: np.ndarray, u: np.ndarray) -> np.ndarray:
    """g(u) для массива идентификаторов семейств (индексы FUNCTION_FAMILIES)"""
    out = np.empty_like(u)
    sin_mask = family == 0
    tanh_mask = family == 1
    cubic_mask = family == 2
    bump_mask = family == 3
    out[..., sin_mask] = np.sin(u[..., sin_mask])
    out[..., tanh_mask] = np.tanh(u[..., tanh_mask])
    out[..., cubic_mask] = u[..., cubic_mask] ** 3
    out[..., bump_mask] = np.exp(-0.5 * u[..., bump_mask] ** 2)
    return out


def build_system(seed: int, kind: str = "nonlinear", n_inputs: int = 5, n_outputs: int = 48,
                 importance: Optional[List[float]] = None,
                 noise_std: float = DEFAULT_NOISE_STD) -> SystemSpec:
    """
    Строит случайную систему из сида

    Args:
        seed: Сид генератора
        kind: nonlinear | linear
        n_inputs: Количество генеративных факторов
        n_outputs: Количество наблюдаемых переменных
        importance: Важность факторов (None - default_importance)
        noise_std: Стандартное отклонение аддитивного шума

    Returns:
        SystemSpec: Полностью параметризованная система
    """
    if n_inputs < 1 or n_outputs < 1:
        raise ConfigError("n_inputs и n_outputs должны быть >= 1")
    if importance is None:
        importance = default_importance(n_inputs)
    # валидация importance и kind происходит в SystemSpec
    spec = SystemSpec(n_inputs=n_inputs, n_outputs=n_outputs, importance=list(importance),
                      noise_std=noise_std, seed=seed, kind=kind)
    imp = np.asarray(spec.importance)
    rng = np.random.default_rng(seed)

    if kind == "linear":
        matrix = rng.standard_normal((n_outputs, n_inputs)) * imp[None, :]
        spec.matrix = matrix.tolist()
        return spec

    basis = []
    for _ in range(n_outputs):
        terms = []
        for k in range(n_inputs):
            family = int(rng.integers(len(FUNCTION_FAMILIES)))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            frequency = (0.5 + imp[k]) * rng.uniform(0.6, 1.4)
            phase = rng.uniform(-1.0, 1.0)
            # нормировка по пику |g| на опорном диапазоне (важность = 1)
            reference = _family_values(np.array([family]),
                                       (frequency * _REFERENCE_GRID + phase)[:, None])
            peak = float(np.max(np.abs(reference)))
            amplitude = sign * imp[k] * rng.uniform(0.5, 1.0) / max(peak, 1e-12)
            terms.append(BasisTerm(factor=k, family=FUNCTION_FAMILIES[family],
                                   amplitude=float(amplitude), frequency=float(frequency),
                                   phase=float(phase)))
        basis.append(terms)
    spec.basis = basis
    return spec


def _basis_arrays(spec: SystemSpec) -> Dict[str, np.ndarray]:
    """Коэффициенты базиса в виде массивов n_outputs x n_inputs"""
    shape = (spec.n_outputs, spec.n_inputs)
    arrays = {name: np.zeros(shape) for name in ("amplitude", "frequency", "phase")}
    family = np.zeros(shape, dtype=int)
    for j, terms in enumerate(spec.basis):
        for term in terms:
            arrays["amplitude"][j, term.factor] += term.amplitude
            arrays["frequency"][j, term.factor] = term.frequency
            arrays["phase"][j, term.factor] = term.phase
            family[j, term.factor] = FUNCTION_FAMILIES.index(term.family)
    arrays["family"] = family
    return arrays


def evaluate(spec: SystemSpec, s: np.ndarray, noise: bool = False,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Выход системы для вектора (или матрицы строк) факторов

    Args:
        spec: Система
        s: n_inputs или N x n_inputs
        noise: Добавить N(0, noise_std^2) к каждому выходу
        rng: Генератор для шума

    Returns:
        np.ndarray: n_outputs или N x n_outputs
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    batch = s[None, :] if single else s
    if batch.ndim != 2 or batch.shape[1] != spec.n_inputs:
        raise ShapeError(f"Ожидалось {spec.n_inputs} факторов, получено {s.shape}")

    if spec.kind == "linear":
        out = batch @ np.asarray(spec.matrix).T
    else:
        arrays = _basis_arrays(spec)
        imp = np.asarray(spec.importance)
        u = batch[:, None, :] * (arrays["frequency"] * imp[None, :])[None] + arrays["phase"][None]
        out = np.sum(arrays["amplitude"][None] * _family_values(arrays["family"], u), axis=2)

    if noise:
        if rng is None:
            raise ConfigError("Для шума нужен генератор rng")
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    return out[0] if single else out


def sample_dataset(spec: SystemSpec, n: int, seed: int) -> Dataset:
    """
    Сэмплирует N пар (S, X); S ~ N(0, 1), обрезанное до [-2, 2]

    Args:
        spec: Система
        n: Количество строк
        seed: Сид выборки

    Returns:
        Dataset: Выборка с метаданными
    """
    if n < 1:
        raise ConfigError("N должен быть >= 1")
    rng = np.random.default_rng(seed)
    factors = truncnorm.rvs(-TRUNCATION, TRUNCATION, size=(n, spec.n_inputs), random_state=rng)
    observations = evaluate(spec, factors, noise=True, rng=rng)
    return Dataset(S=factors, X=observations, spec_digest=spec.digest(),
                   noise_std=spec.noise_std, seed=seed, kind=spec.kind, truncation=TRUNCATION)


def traversal_curves(spec: SystemSpec, factor_idx: int, grid: Optional[np.ndarray] = None,
                     others: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Выходы без шума при изменении одного фактора (остальные фиксированы)

    Returns:
        Tuple[np.ndarray, np.ndarray]: (сетка, матрица len(grid) x n_outputs)
    """
    if not 0 <= factor_idx < spec.n_inputs:
        raise ConfigError(f"Неверный индекс фактора: {factor_idx}")
    if grid is None:
        grid = np.linspace(-TRUNCATION, TRUNCATION, 81)
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64))
    points = np.full((len(grid), spec.n_inputs), others, dtype=np.float64)
    points[:, factor_idx] = grid
    return grid, evaluate(spec, points)


def sensitivity(spec: SystemSpec, points: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Средний |d output / d s_k| по точкам и выходам (центральные разности)"""
    points = np.asarray(points, dtype=np.float64)
    result = np.zeros(spec.n_inputs)
    for k in range(spec.n_inputs):
        step = np.zeros(spec.n_inputs)
        step[k] = h
        diff = (evaluate(spec, points + step) - evaluate(spec, points - step)) / (2 * h)
        result[k] = np.mean(np.abs(diff))
    return result


def split_holdout(dataset: Dataset, eval_size: int) -> Tuple[Dataset, Dataset]:
    """Детерминированное разбиение: последние eval_size строк откладываются"""
    if not 1 <= eval_size < dataset.n:
        raise ConfigError(f"eval_size={eval_size} должен быть в [1, {dataset.n})")
    cut = dataset.n - eval_size
    return dataset.subset(np.arange(cut)), dataset.subset(np.arange(cut, dataset.n))
