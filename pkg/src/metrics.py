"""
Количественная оценка: ошибка реконструкции по уровням, взаимная информация (KSG),
стабильность латентов между запусками, PCA оракул и углы между подпространствами.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import subspace_angles
from scipy.spatial import cKDTree
from scipy.special import digamma
from scipy.stats import spearmanr

from .data_structures import Dataset, RunReport, SystemSpec
from .errors import ConfigError, DomainError, ShapeError
from .full_encoder import FEParams, encode_latents, forward_full, reconstruct
from .nonlinear_system import TRUNCATION, evaluate

HIST_RANGE = (-4.0, 4.0)
HIST_BINS = 64
KSG_K = 3


# --- ошибка реконструкции ---

def recon_error_from_reconstructions(x: np.ndarray, x_hats: Sequence[np.ndarray]) -> List[float]:
    """RE[i] = среднее (x - x_hat_i)^2 по всем элементам"""
    x = np.asarray(x, dtype=np.float64)
    result = []
    for x_hat in x_hats:
        x_hat = np.asarray(x_hat, dtype=np.float64)
        if x_hat.shape != x.shape:
            raise ShapeError(f"Форма реконструкции {x_hat.shape} != {x.shape}")
        result.append(float(np.mean((x - x_hat) ** 2)))
    return result


def recon_error_per_level(params: FEParams, x: np.ndarray) -> List[float]:
    """Ошибка реконструкции каждого уровня в режиме оценки (z = mu, без dropout)"""
    return recon_error_from_reconstructions(x, reconstruct(params, x))


def anomaly_scores(params: FEParams, x: np.ndarray) -> np.ndarray:
    """
    Поэлементная ошибка реконструкции каждого образца

    Args:
        params: Параметры модели
        x: Наблюдения N x n_outputs

    Returns:
        np.ndarray: N x уровней, среднее (x - x_hat_i)^2 по выходам
    """
    x = np.asarray(x, dtype=np.float64)
    return np.stack([np.mean((x - x_hat) ** 2, axis=1) for x_hat in reconstruct(params, x)], axis=1)


# --- взаимная информация ---

@dataclass
class MIResult:
    """Оценка MI в натах"""
    mi: float  # max(raw, 0)
    raw: float
    degenerate: bool = False


def ksg_mi(a: np.ndarray, b: np.ndarray, k: int = KSG_K,
           rng: Optional[np.random.Generator] = None) -> MIResult:
    """
    Оценка Kraskov-Stögbauer-Grassberger (вариант 1) с max-нормой

    Args:
        a: Выборка первой переменной (N)
        b: Выборка второй переменной (N)
        k: Количество соседей
        rng: Генератор для малого шума, разбивающего совпадения

    Returns:
        MIResult: Оценка, исходное значение и флаг вырожденности
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"ksg_mi: разные размеры выборок {a.shape} и {b.shape}")
    n = a.size
    if k < 1 or n < k + 2:
        raise ConfigError(f"ksg_mi: нужно не менее k+2={k + 2} точек, получено {n}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return MIResult(mi=0.0, raw=0.0, degenerate=True)

    rng = rng if rng is not None else np.random.default_rng(0)
    a = a + 1e-10 * np.std(a) * rng.standard_normal(n)
    b = b + 1e-10 * np.std(b) * rng.standard_normal(n)

    joint = np.column_stack([a, b])
    distances, _ = cKDTree(joint).query(joint, k=k + 1, p=np.inf)
    radius = np.nextafter(distances[:, -1], 0)  # строго меньше расстояния до k-го соседа

    n_a = cKDTree(a[:, None]).query_ball_point(a[:, None], r=radius, p=np.inf, return_length=True) - 1
    n_b = cKDTree(b[:, None]).query_ball_point(b[:, None], r=radius, p=np.inf, return_length=True) - 1
    raw = float(digamma(k) + digamma(n) - np.mean(digamma(n_a + 1) + digamma(n_b + 1)))
    return MIResult(mi=max(raw, 0.0), raw=raw)


def mi_matrix(latents: np.ndarray, factors: np.ndarray, k: int = KSG_K) -> Tuple[np.ndarray, np.ndarray]:
    """
    MI между каждым латентом и каждым фактором

    Returns:
        Tuple[np.ndarray, np.ndarray]: (MI >= 0, исходные оценки), латенты x факторы
    """
    latents = np.asarray(latents, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if latents.shape[0] != factors.shape[0]:
        raise ShapeError("mi_matrix: латенты и факторы должны быть выровнены по строкам")
    mi = np.zeros((latents.shape[1], factors.shape[1]))
    raw = np.zeros_like(mi)
    for i in range(latents.shape[1]):
        for j in range(factors.shape[1]):
            result = ksg_mi(latents[:, i], factors[:, j], k=k)
            mi[i, j], raw[i, j] = result.mi, result.raw
    return mi, raw


# --- стабильность ---

def stability_score(latents_a: np.ndarray, latents_b: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    |Spearman| между одноименными латентами двух запусков на одних и тех же входах

    Returns:
        Tuple[np.ndarray, float]: Оценка по латентам и среднее
    """
    latents_a = np.asarray(latents_a, dtype=np.float64)
    latents_b = np.asarray(latents_b, dtype=np.float64)
    if latents_a.shape[1] != latents_b.shape[1]:
        raise ConfigError(f"Разное число латентов: {latents_a.shape[1]} и {latents_b.shape[1]}")
    if latents_a.shape[0] != latents_b.shape[0]:
        raise ShapeError("Запуски должны оцениваться на одних и тех же входах")
    scores = np.zeros(latents_a.shape[1])
    for i in range(latents_a.shape[1]):
        if np.ptp(latents_a[:, i]) == 0 or np.ptp(latents_b[:, i]) == 0:
            continue
        rho = spearmanr(latents_a[:, i], latents_b[:, i])[0]
        scores[i] = 0.0 if np.isnan(rho) else abs(float(rho))
    return scores, float(np.mean(scores)) if scores.size else 0.0


# --- PCA оракул ---

@dataclass
class PCAResult:
    """Главные компоненты выборочной ковариации"""
    components: np.ndarray  # d x k, ортонормированные столбцы
    eigenvalues: np.ndarray  # все собственные значения по убыванию
    truncation_error: float  # средний квадрат ошибки ранга k на элемент


def pca_oracle(X: np.ndarray, k: int) -> PCAResult:
    """
    Собственное разложение ковариации центрированных данных

    Args:
        X: Данные N x d
        k: Количество компонент

    Returns:
        PCAResult: Топ-k направлений, спектр и ошибка усечения
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if not 1 <= k <= d:
        raise ConfigError(f"k должен лежать в [1, {d}]")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / X.shape[0]
    eigenvalues, vectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    vectors = vectors[:, order]
    return PCAResult(components=vectors[:, :k], eigenvalues=eigenvalues,
                     truncation_error=float(np.sum(eigenvalues[k:]) / d))


def reconstruction_subspace(x_hat: np.ndarray, k: int) -> np.ndarray:
    """Топ-k правых сингулярных векторов центрированных реконструкций (d x k)"""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    _, _, vt = np.linalg.svd(x_hat - x_hat.mean(axis=0), full_matrices=False)
    return vt[:k].T


def principal_angles(U: np.ndarray, V: np.ndarray) -> np.ndarray:
    """
    Углы между подпространствами span(U) и span(V) в градусах, по возрастанию

    Raises:
        DomainError: Вырожденный базис
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if U.shape[0] != V.shape[0]:
        raise ShapeError(f"Подпространства разной размерности объемлющего пространства: {U.shape}, {V.shape}")
    for basis in (U, V):
        if np.linalg.matrix_rank(basis) < basis.shape[1]:
            raise DomainError("principal_angles: базис вырожден")
    return np.sort(np.degrees(subspace_angles(U, V)))


# --- данные для рисунков ---

def histogram_frame(params: FEParams, x: np.ndarray) -> pd.DataFrame:
    """
    Гистограммы значений p1, p2 и m по уровням на [-4, 4], 64 бина

    Returns:
        pd.DataFrame: level, code_kind, bin_left, count
    """
    outputs = forward_full(params, x, training=False)
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    codes = [(level, "m", m) for level, m in zip(outputs.levels, outputs.m)]
    for i, (p1, p2) in enumerate(zip(outputs.p1, outputs.p2), start=1):
        codes += [(i, "p1", p1), (i, "p2", p2)]
    rows = []
    for level, kind, values in sorted(codes, key=lambda c: (c[0], c[1])):
        counts, _ = np.histogram(np.clip(values.values, *HIST_RANGE), bins=edges)
        rows += [{'level': level, 'code_kind': kind, 'bin_left': float(left), 'count': int(c)}
                 for left, c in zip(edges[:-1], counts)]
    return pd.DataFrame(rows, columns=['level', 'code_kind', 'bin_left', 'count'])


def latent_traversal(params: FEParams, spec: SystemSpec,
                     grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """
    Отклик латентов на изменение одного фактора (остальные 0), без шума

    Returns:
        pd.DataFrame: latent, factor, grid_value, latent_response
    """
    if grid is None:
        grid = np.linspace(-TRUNCATION, TRUNCATION, 41)
    frames = []
    for j in range(spec.n_inputs):
        points = np.zeros((len(grid), spec.n_inputs))
        points[:, j] = grid
        responses, labels = encode_latents(params, evaluate(spec, points))
        for i, label in enumerate(labels):
            frames.append(pd.DataFrame({
                'latent': label, 'factor': f"S{j + 1}",
                'grid_value': grid, 'latent_response': responses[:, i],
            }))
    return pd.concat(frames, ignore_index=True)


def traversal_ranges(traversal: pd.DataFrame) -> pd.Series:
    """Максимальный по факторам размах отклика каждого латента"""
    spans = traversal.groupby(['latent', 'factor'], sort=False)['latent_response'].agg(lambda s: s.max() - s.min())
    return spans.groupby(level='latent', sort=False).max()


def run_report(params: FEParams, holdout: Dataset, spec: Optional[SystemSpec] = None,
               seed: int = 0) -> RunReport:
    """
    Полная оценка одного запуска на отложенной выборке

    Args:
        params: Обученные параметры
        holdout: Отложенная выборка (не использовалась при обучении)
        spec: Система для траекторий латентов (None - без траекторий)
        seed: Сид запуска

    Returns:
        RunReport: Все величины для CSV и рисунков
    """
    config = params.config
    responses, labels = encode_latents(params, holdout.X)
    if holdout.has_factors:
        mi, mi_raw = mi_matrix(responses, holdout.S)
    else:
        mi = mi_raw = np.zeros((responses.shape[1], 0))
    traversal = latent_traversal(params, spec) if spec is not None else pd.DataFrame(
        columns=['latent', 'factor', 'grid_value', 'latent_response'])
    return RunReport(
        levels=config.levels,
        re=recon_error_per_level(params, holdout.X),
        latent_labels=labels,
        latent_responses=responses,
        mi=mi,
        mi_raw=mi_raw,
        traversal=traversal,
        histograms=histogram_frame(params, holdout.X),
        config_digest=config.digest(),
        seed=seed,
    )
