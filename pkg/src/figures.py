"""
Экспорт данных рисунков: CSV таблицы и SVG графики.
SVG пишутся с фиксированной hashsalt и без даты, поэтому повторный запуск
дает байт-в-байт одинаковые файлы.
"""

from pathlib import Path
from typing import Dict, Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from .data_structures import Dataset, RunReport, SystemSpec  # noqa: E402
from .full_encoder import FEParams  # noqa: E402
from .metrics import run_report  # noqa: E402
from .nonlinear_system import traversal_curves  # noqa: E402

PathLike = Union[str, Path]

plt.rcParams['svg.hashsalt'] = 'fe-lab'
plt.rcParams['svg.fonttype'] = 'none'
plt.rcParams['figure.figsize'] = [7.2, 4.8]


def _save_svg(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={'Date': None})
    plt.close(fig)
    return path


# --- CSV ---

def re_curve_frame(report: RunReport) -> pd.DataFrame:
    return pd.DataFrame({'level': report.levels, 're': report.re})


def mi_frame(report: RunReport) -> pd.DataFrame:
    rows = []
    for i, latent in enumerate(report.latent_labels):
        for j in range(report.mi.shape[1]):
            rows.append({'latent': latent, 'factor': f"S{j + 1}",
                         'mi_nats': float(report.mi[i, j]), 'mi_raw': float(report.mi_raw[i, j])})
    return pd.DataFrame(rows, columns=['latent', 'factor', 'mi_nats', 'mi_raw'])


def save_report(report: RunReport, out_dir: PathLike) -> Dict[str, Path]:
    """
    Записывает CSV отчета запуска

    Args:
        report: Отчет
        out_dir: Директория

    Returns:
        Dict[str, Path]: Имя таблицы -> путь
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        're_curve': re_curve_frame(report),
        'mi_matrix': mi_frame(report),
        'traversal': report.traversal,
        'histogram': report.histograms,
        'latents': pd.DataFrame(report.latent_responses, columns=report.latent_labels),
    }
    paths = {}
    for name, frame in tables.items():
        paths[name] = out_dir / f"{name}.csv"
        frame.to_csv(paths[name], index=False)
    return paths


# --- SVG ---

def plot_re_curve(re_curve: pd.DataFrame, path: PathLike, title: str = "") -> Path:
    """Ошибка реконструкции по уровням"""
    fig, ax = plt.subplots()
    ax.plot(re_curve['level'], re_curve['re'], marker='o')
    ax.set_xlabel('Level i (latents z0..zi)')
    ax.set_ylabel('Reconstruction error')
    ax.set_title(title or 'Reconstruction error per level')
    ax.grid(True, alpha=0.3)
    return _save_svg(fig, path)


def plot_mi_heatmap(mi: pd.DataFrame, path: PathLike) -> Path:
    """Тепловая карта MI латент x фактор"""
    table = mi.pivot(index='latent', columns='factor', values='mi_nats')
    table = table.loc[list(dict.fromkeys(mi['latent']))]
    fig, ax = plt.subplots()
    sns.heatmap(table, annot=True, fmt='.2f', cmap='viridis', ax=ax, cbar_kws={'label': 'MI (nats)'})
    ax.set_title('Mutual information between latents and factors')
    return _save_svg(fig, path)


def plot_traversal(traversal: pd.DataFrame, path: PathLike) -> Path:
    """Сетка малых графиков: строки - латенты, столбцы - факторы"""
    latents = list(dict.fromkeys(traversal['latent']))
    factors = list(dict.fromkeys(traversal['factor']))
    fig, axes = plt.subplots(len(latents), len(factors), sharex=True, sharey='row',
                             figsize=(1.8 * len(factors), 1.2 * len(latents)), squeeze=False)
    for (latent, factor), group in traversal.groupby(['latent', 'factor'], sort=False):
        ax = axes[latents.index(latent)][factors.index(factor)]
        ax.plot(group['grid_value'], group['latent_response'], linewidth=1.0)
    for i, latent in enumerate(latents):
        axes[i][0].set_ylabel(latent)
    for j, factor in enumerate(factors):
        axes[0][j].set_title(factor)
    return _save_svg(fig, path)


def plot_histograms(histogram: pd.DataFrame, path: PathLike) -> Path:
    """Гистограммы патчеров и медианных кодов по уровням"""
    kinds = [k for k in ('p1', 'p2', 'm') if k in set(histogram['code_kind'])]
    fig, axes = plt.subplots(1, len(kinds), figsize=(4.0 * len(kinds), 3.6), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        subset = histogram[histogram['code_kind'] == kind]
        for level, group in subset.groupby('level'):
            ax.step(group['bin_left'], group['count'], where='post', label=f"level {level}")
        ax.set_title(kind)
        ax.legend(fontsize=7)
    return _save_svg(fig, path)


def plot_system_curves(spec: SystemSpec, path: PathLike, n_outputs: int = 8) -> Path:
    """Выходы системы при изменении одного фактора (остальные 0)"""
    fig, axes = plt.subplots(1, spec.n_inputs, figsize=(3.0 * spec.n_inputs, 3.0),
                             sharey=True, squeeze=False)
    for k, ax in enumerate(axes[0]):
        grid, curves = traversal_curves(spec, k)
        ax.plot(grid, curves[:, :n_outputs], linewidth=1.0)
        ax.set_title(f"S{k + 1}")
        ax.set_xlabel('factor value')
    return _save_svg(fig, path)


def plot_table(table: pd.DataFrame, path: PathLike) -> Path:
    """Ошибка реконструкции по количеству латентов для каждого эксперимента"""
    columns = [c for c in table.columns if c.startswith('re_L')]
    fig, ax = plt.subplots()
    x = np.arange(1, len(columns) + 1)
    for _, row in table.iterrows():
        values = row[columns].to_numpy(dtype=np.float64)
        ax.plot(x, values, marker='o', label=row['name'])
    ax.set_xlabel('Latents used')
    ax.set_ylabel('Reconstruction error')
    ax.legend(fontsize=7)
    ax.grid(True, alpha=0.3)
    return _save_svg(fig, path)


def render_run_figures(out_dir: PathLike) -> Dict[str, Path]:
    """Перерисовывает SVG запуска из его CSV"""
    out_dir = Path(out_dir)
    paths = {}
    re_curve = out_dir / "re_curve.csv"
    if re_curve.exists():
        paths['re_curve'] = plot_re_curve(pd.read_csv(re_curve), out_dir / "re_curve.svg")
    mi = out_dir / "mi_matrix.csv"
    if mi.exists():
        frame = pd.read_csv(mi)
        if not frame.empty:
            paths['mi_matrix'] = plot_mi_heatmap(frame, out_dir / "mi_matrix.svg")
    traversal = out_dir / "traversal.csv"
    if traversal.exists():
        frame = pd.read_csv(traversal)
        if not frame.empty:
            paths['traversal'] = plot_traversal(frame, out_dir / "traversal.svg")
    histogram = out_dir / "histogram.csv"
    if histogram.exists():
        paths['histogram'] = plot_histograms(pd.read_csv(histogram), out_dir / "histogram.svg")
    return paths


def export_figures_data(params: FEParams, holdout: Dataset, spec: Optional[SystemSpec],
                        out_dir: PathLike, seed: int = 0, svg: bool = True) -> RunReport:
    """
    Оценка запуска и экспорт всех таблиц (и SVG) рисунков

    Args:
        params: Обученные параметры
        holdout: Отложенная выборка
        spec: Система для траекторий латентов
        out_dir: Директория отчета
        seed: Сид запуска
        svg: Рисовать SVG

    Returns:
        RunReport: Отчет
    """
    report = run_report(params, holdout, spec, seed=seed)
    save_report(report, out_dir)
    if svg:
        render_run_figures(out_dir)
    return report
