"""
Сетка экспериментов: генерация набора данных, параллельное обучение запусков,
сводные таблицы (ошибка реконструкции по числу латентов, стабильность),
проверка линейного FE против PCA.
"""

import concurrent.futures
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .data_structures import Dataset, ExperimentPlan, ModelConfig, RunReport, RunSpec, TrainConfig
from .errors import ConfigError, FELabError, NumericalError
from .figures import (export_figures_data, plot_histograms, plot_mi_heatmap, plot_re_curve,
                      plot_system_curves, plot_table, plot_traversal)
from .full_encoder import encode_latents, reconstruct
from .metrics import pca_oracle, principal_angles, reconstruction_subspace, stability_score
from .nonlinear_system import build_system, default_importance, sample_dataset, split_holdout
from .storage import load_checkpoint, load_dataset, load_system, save_dataset, save_system
from .trainer import params_from_checkpoint, prepare_splits, save_history_csv, train_run

PathLike = Union[str, Path]

DATA_FILE = "data.fed"
SYSTEM_FILE = "system.json"
CHECKPOINT_FILE = "ckpt.fec"


@dataclass(frozen=True)
class ScaleSettings:
    """Масштаб воспроизведения"""
    iterations: int
    n_train: int
    eval_size: int = 1000


SCALES = {
    'desk': ScaleSettings(iterations=5000, n_train=4000),
    'paper': ScaleSettings(iterations=20000, n_train=10000),
}

# имя, тип модели, количество латентов Encoder
PAPER_GRID = (
    [(f"fe-{k}", "fe", k) for k in range(1, 7)]
    + [("vae-6", "vae", 6), ("beta-vae-6", "beta-vae", 6), ("beta-fe-6", "beta-fe", 6),
       ("supervised-fe", "supervised-fe", 5)]
)


def run_seeds(master_seed: int, run_idx: int, repeats: int = 2) -> Tuple[int, ...]:
    """Независимые сиды повторов одного запуска"""
    return tuple(int(np.random.SeedSequence([master_seed, run_idx, rep]).generate_state(1)[0])
                 for rep in range(repeats))


def paper_plan(dataset_path: PathLike, output_dir: PathLike, master_seed: int = 0) -> ExperimentPlan:
    """Сетка: FE n=1..6, VAE, beta-VAE, beta-FE с 6 латентами и supervised FE, по 2 сида"""
    runs = [RunSpec(name=name, kind=kind, n_latents=n, seeds=run_seeds(master_seed, idx))
            for idx, (name, kind, n) in enumerate(PAPER_GRID)]
    return ExperimentPlan(runs=runs, dataset_path=str(dataset_path), output_dir=str(output_dir))


def run_dir_name(name: str, seed: int) -> str:
    return f"{name}-s{seed}"


def level_columns(config: ModelConfig) -> Dict[int, str]:
    """
    Уровень реконструкции -> столбец таблицы re_L<k>, k - общее число латентов

    Supervised FE не имеет столбца L1: z0 - блок меток.
    """
    if config.baseline_vae:
        return {config.n_latents: f"re_L{config.n_latents}"}
    start = 1 if config.supervised else 0
    return {i: f"re_L{i + 1}" for i in range(start, config.n_latents + 1)}


def _write_json(payload: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
    return path


def execute_run(task: Dict[str, Any]) -> Dict[str, Any]:
    """
    Один запуск сетки (вызывается в отдельном процессе)

    Args:
        task: name, kind, n_latents, beta, seed, data_dir, run_dir, train_config, svg

    Returns:
        Dict[str, Any]: name, seed, status, levels, re, run_dir
    """
    run_dir = Path(task['run_dir'])
    result = {'name': task['name'], 'seed': task['seed'], 'run_dir': str(run_dir),
              'status': 'ok', 'levels': [], 're': []}
    try:
        data_dir = Path(task['data_dir'])
        dataset = load_dataset(data_dir / DATA_FILE)
        spec = load_system(data_dir / SYSTEM_FILE)
        model_config = ModelConfig.for_kind(task['kind'], task['n_latents'], beta=task.get('beta'),
                                            n_outputs=dataset.n_outputs)
        train_config = TrainConfig.from_dict(dict(task['train_config'], seed=task['seed'],
                                                  checkpoint_path=str(run_dir / CHECKPOINT_FILE)))
        _write_json({'model': model_config.to_dict(), 'train': train_config.to_dict()},
                    run_dir / "effective_config.json")

        params, history = train_run(dataset, model_config, train_config, verbose=False)
        save_history_csv(history, run_dir / "history.csv")
        _, holdout = prepare_splits(dataset, train_config)
        report = export_figures_data(params, holdout, spec, run_dir, seed=task['seed'],
                                     svg=task.get('svg', True))
        result.update(levels=report.levels, re=report.re)
    except NumericalError as e:
        _write_json(e.diagnostics(), run_dir / "failure.json")
        result['status'] = 'failed: numerical'
    except FELabError as e:
        result['status'] = f"failed: {e}"
    return result


def run_plan(plan: ExperimentPlan, train_config: TrainConfig, jobs: int = 1,
             svg: bool = True, verbose: bool = True) -> List[Dict[str, Any]]:
    """
    Выполняет все запуски плана

    Args:
        plan: План экспериментов
        train_config: Общий протокол (сид подменяется сидом запуска)
        jobs: Количество параллельных процессов
        svg: Рисовать SVG каждого запуска
        verbose: Печатать прогресс

    Returns:
        List[Dict[str, Any]]: Результаты в порядке плана
    """
    data_dir = Path(plan.dataset_path)
    tasks = []
    for run in plan.runs:
        for seed in run.seeds:
            tasks.append({
                'name': run.name, 'kind': run.kind, 'n_latents': run.n_latents, 'beta': run.beta,
                'seed': seed, 'data_dir': str(data_dir), 'svg': svg,
                'run_dir': str(Path(plan.output_dir) / "runs" / run_dir_name(run.name, seed)),
                'train_config': train_config.to_dict(),
            })

    results: Dict[int, Dict[str, Any]] = {}
    if jobs <= 1:
        for idx, task in enumerate(tqdm(tasks, desc="🧪 Эксперименты", disable=not verbose)):
            results[idx] = execute_run(task)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as executor:
            futures = {executor.submit(execute_run, task): idx for idx, task in enumerate(tasks)}
            for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures),
                               desc="🧪 Эксперименты", disable=not verbose):
                idx = futures[future]
                try:
                    results[idx] = future.result()
                except Exception as e:
                    results[idx] = {'name': tasks[idx]['name'], 'seed': tasks[idx]['seed'],
                                    'run_dir': tasks[idx]['run_dir'], 'status': f"failed: {e}",
                                    'levels': [], 're': []}

    ordered = [results[idx] for idx in range(len(tasks))]
    if verbose:
        for result in ordered:
            mark = "✅" if result['status'] == 'ok' else "❌"
            print(f"   {mark} {run_dir_name(result['name'], result['seed'])}: {result['status']}")
    return ordered


def build_table(plan: ExperimentPlan, results: List[Dict[str, Any]], n_outputs: int) -> pd.DataFrame:
    """
    Таблица ошибок реконструкции: строка на запуск, среднее по сидам

    Returns:
        pd.DataFrame: name, kind, n_latents, re_L1..re_Lk, status
    """
    configs = {run.name: ModelConfig.for_kind(run.kind, run.n_latents, beta=run.beta, n_outputs=n_outputs)
               for run in plan.runs}
    width = max(int(column[len("re_L"):]) for c in configs.values() for column in level_columns(c).values())
    columns = [f"re_L{k}" for k in range(1, width + 1)]

    rows = []
    for run in plan.runs:
        config = configs[run.name]
        mapping = level_columns(config)
        done = [r for r in results if r['name'] == run.name and r['status'] == 'ok']
        row: Dict[str, Any] = {'name': run.name, 'kind': run.kind, 'n_latents': run.n_latents}
        row.update({c: np.nan for c in columns})
        for level, column in mapping.items():
            values = [r['re'][r['levels'].index(level)] for r in done]
            if values:
                row[column] = float(np.mean(values))
        if len(done) == len(run.seeds):
            row['status'] = 'ok'
        elif done:
            row['status'] = f"partial ({len(done)}/{len(run.seeds)})"
        else:
            row['status'] = 'failed'
        rows.append(row)
    return pd.DataFrame(rows, columns=['name', 'kind', 'n_latents'] + columns + ['status'])


def stability_rows(name: str, latents_a: pd.DataFrame, latents_b: pd.DataFrame) -> List[Dict[str, Any]]:
    scores, mean = stability_score(latents_a.to_numpy(), latents_b.to_numpy())
    rows = [{'name': name, 'latent': latent, 'score': float(s)} for latent, s in zip(latents_a.columns, scores)]
    rows.append({'name': name, 'latent': 'mean', 'score': mean})
    return rows


def build_stability(plan: ExperimentPlan, results: List[Dict[str, Any]]) -> pd.DataFrame:
    """Стабильность латентов между двумя сидами каждого запуска"""
    rows = []
    for run in plan.runs:
        done = [r for r in results if r['name'] == run.name and r['status'] == 'ok']
        if len(done) < 2:
            continue
        latents = [pd.read_csv(Path(r['run_dir']) / "latents.csv") for r in done[:2]]
        rows += stability_rows(run.name, *latents)
    return pd.DataFrame(rows, columns=['name', 'latent', 'score'])


def render_summary_figures(output_dir: PathLike, figure_run: str = "fe-6") -> Dict[str, Path]:
    """
    Перерисовывает сводные SVG только из сохраненных артефактов

    Args:
        output_dir: Директория воспроизведения
        figure_run: Запуск, чьи CSV используются для рисунков уровней, гистограмм и траекторий

    Returns:
        Dict[str, Path]: Имя рисунка -> путь
    """
    output_dir = Path(output_dir)
    paths = {}
    system_path = output_dir / "data" / SYSTEM_FILE
    if system_path.exists():
        paths['system_curves'] = plot_system_curves(load_system(system_path), output_dir / "system_curves.svg")
    table_path = output_dir / "table2.csv"
    if table_path.exists():
        paths['table2'] = plot_table(pd.read_csv(table_path), output_dir / "table2.svg")

    plan_path = output_dir / "plan.json"
    if not plan_path.exists():
        return paths
    with open(plan_path, 'r', encoding='utf-8') as f:
        plan = json.load(f)
    seeds = [run['seeds'] for run in plan['runs'] if run['name'] == figure_run]
    if not seeds:
        return paths
    run_dir = output_dir / "runs" / run_dir_name(figure_run, seeds[0][0])
    sources = {
        're_curve': (plot_re_curve, "re_curve.csv"),
        'histogram': (plot_histograms, "histogram.csv"),
        'traversal': (plot_traversal, "traversal.csv"),
        'mi_matrix': (plot_mi_heatmap, "mi_matrix.csv"),
    }
    for name, (plot, csv_name) in sources.items():
        csv_path = run_dir / csv_name
        if csv_path.exists():
            frame = pd.read_csv(csv_path)
            if not frame.empty:
                paths[name] = plot(frame, output_dir / f"{figure_run}_{name}.svg")
    return paths


class ReproductionPipeline:
    """Полное воспроизведение сетки экспериментов"""

    def __init__(self, output_dir: PathLike, scale: str = "desk", master_seed: int = 0,
                 jobs: int = 1, svg: bool = True, verbose: bool = True):
        """
        Инициализация

        Args:
            output_dir: Директория результатов
            scale: desk | paper
            master_seed: Главный сид (система, выборка, сиды запусков)
            jobs: Количество параллельных процессов
            svg: Рисовать SVG
            verbose: Печатать прогресс
        """
        if scale not in SCALES:
            raise ConfigError(f"Неизвестный масштаб: {scale}")
        if jobs < 1:
            raise ConfigError("jobs должен быть >= 1")
        self.output_dir = Path(output_dir)
        self.scale = SCALES[scale]
        self.scale_name = scale
        self.master_seed = master_seed
        self.jobs = jobs
        self.svg = svg
        self.verbose = verbose

    def _log(self, message: str) -> None:
        if self.verbose:
            print(message)

    def prepare_data(self) -> Dataset:
        """Строит систему и выборку, сохраняет их в data/"""
        data_dir = self.output_dir / "data"
        spec = build_system(self.master_seed, kind="nonlinear")
        dataset = sample_dataset(spec, self.scale.n_train + self.scale.eval_size, seed=self.master_seed)
        save_system(spec, data_dir / SYSTEM_FILE)
        save_dataset(dataset, data_dir / DATA_FILE)
        self._log(f"📊 Набор данных: {dataset.n} строк, {dataset.n_inputs} факторов, "
                  f"{dataset.n_outputs} выходов, дайджест {dataset.digest()[:12]}")
        return dataset

    def run(self) -> Dict[str, Any]:
        """
        Выполняет весь план и пишет сводные таблицы

        Returns:
            Dict[str, Any]: Сводка (записывается в summary.json)
        """
        self._log(f"🚀 Воспроизведение: масштаб {self.scale_name}, сид {self.master_seed}")
        self._log("=" * 50)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        dataset = self.prepare_data()

        plan = paper_plan(self.output_dir / "data", self.output_dir, self.master_seed)
        _write_json(plan.to_dict(), self.output_dir / "plan.json")
        train_config = TrainConfig(iterations=self.scale.iterations, eval_size=self.scale.eval_size,
                                   dataset_size=self.scale.n_train)
        _write_json({'scale': self.scale_name, 'master_seed': self.master_seed,
                     'train': train_config.to_dict()}, self.output_dir / "effective_config.json")
        self._log(f"🔧 Запусков: {sum(len(r.seeds) for r in plan.runs)}, процессов: {self.jobs}")

        results = run_plan(plan, train_config, jobs=self.jobs, svg=self.svg, verbose=self.verbose)

        table = build_table(plan, results, dataset.n_outputs)
        table.to_csv(self.output_dir / "table2.csv", index=False, float_format="%.6f")
        stability = build_stability(plan, results)
        stability.to_csv(self.output_dir / "stability.csv", index=False, float_format="%.6f")
        self._log(f"💾 Таблицы сохранены: {self.output_dir / 'table2.csv'}, {self.output_dir / 'stability.csv'}")
        if self.svg:
            render_summary_figures(self.output_dir)

        summary = self.get_statistics(table, stability, dataset)
        _write_json(summary, self.output_dir / "summary.json")
        self._log(f"✅ Готово: {summary['runs_ok']}/{summary['runs_total']} запусков успешно")
        return summary

    def get_statistics(self, table: pd.DataFrame, stability: pd.DataFrame,
                       dataset: Dataset) -> Dict[str, Any]:
        """Сводка воспроизведения"""
        means = stability[stability['latent'] == 'mean'].set_index('name')['score'].to_dict()
        return {
            'scale': self.scale_name,
            'master_seed': self.master_seed,
            'dataset_digest': dataset.digest(),
            'runs_total': int(len(table)),
            'runs_ok': int((table['status'] == 'ok').sum()),
            'status': dict(zip(table['name'], table['status'])),
            'stability_mean': {k: round(float(v), 6) for k, v in means.items()},
        }


# --- отдельные проверки ---

def evaluate_checkpoint(ckpt_path: PathLike, dataset: Dataset, out_dir: PathLike,
                        spec=None, svg: bool = True) -> RunReport:
    """
    Оценка обученной модели на отложенной выборке набора данных

    Raises:
        ConfigError: Набор данных не совпадает с тем, на котором обучалась модель
    """
    checkpoint = load_checkpoint(ckpt_path)
    if checkpoint.dataset_digest and checkpoint.dataset_digest != dataset.digest():
        raise ConfigError("Набор данных не совпадает с набором, на котором обучалась модель")
    if dataset.n_outputs != checkpoint.model_config.n_outputs:
        raise ConfigError(f"Набор данных имеет {dataset.n_outputs} выходов, модель ожидает "
                          f"{checkpoint.model_config.n_outputs}")
    params = params_from_checkpoint(checkpoint)
    _, holdout = split_holdout(dataset, checkpoint.train_config.eval_size)
    return export_figures_data(params, holdout, spec, out_dir, seed=checkpoint.train_config.seed, svg=svg)


def compare_checkpoints(ckpt_a: PathLike, ckpt_b: PathLike, dataset: Dataset) -> pd.DataFrame:
    """
    Стабильность латентов двух обученных моделей на одних и тех же отложенных входах

    Returns:
        pd.DataFrame: latent, score (последняя строка - mean)
    """
    checkpoint_a, checkpoint_b = load_checkpoint(ckpt_a), load_checkpoint(ckpt_b)
    config_a, config_b = checkpoint_a.model_config, checkpoint_b.model_config
    if config_a.n_latents != config_b.n_latents:
        raise ConfigError(f"Разное число латентов: {config_a.n_latents} и {config_b.n_latents}")
    if config_a.to_dict() != config_b.to_dict():
        raise ConfigError("Конфигурации моделей чекпоинтов не совпадают")
    if dataset.n_outputs != config_a.n_outputs:
        raise ConfigError(f"Набор данных имеет {dataset.n_outputs} выходов, модель ожидает {config_a.n_outputs}")
    _, holdout = split_holdout(dataset, checkpoint_a.train_config.eval_size)
    latents_a, labels = encode_latents(params_from_checkpoint(checkpoint_a), holdout.X)
    latents_b, _ = encode_latents(params_from_checkpoint(checkpoint_b), holdout.X)
    rows = stability_rows("", pd.DataFrame(latents_a, columns=labels), pd.DataFrame(latents_b, columns=labels))
    return pd.DataFrame(rows)[['latent', 'score']]


def pca_check(seed: int = 0, n_latents: int = 2, iterations: int = 8000, n_train: int = 4000,
              eval_size: int = 1000, verbose: bool = True) -> pd.DataFrame:
    """
    Линейный FE против PCA на линейной системе (3 фактора, 10 выходов)

    Args:
        seed: Сид системы, выборки и обучения
        n_latents: Латенты Encoder; сравниваются ранги k = 1..n_latents+1
        iterations: Итерации обучения
        n_train: Размер обучающей выборки
        eval_size: Размер отложенной выборки
        verbose: Печатать прогресс

    Returns:
        pd.DataFrame: k, fe_re, pca_re, rel_diff, angle_deg
    """
    spec = build_system(seed, kind="linear", n_inputs=3, n_outputs=10, importance=default_importance(3))
    dataset = sample_dataset(spec, n_train + eval_size, seed=seed)
    model_config = ModelConfig.for_kind("linear-fe", n_latents, n_outputs=spec.n_outputs)
    train_config = TrainConfig(iterations=iterations, eval_size=eval_size, seed=seed,
                               eval_every=max(1, iterations // 10), log_every=max(1, iterations // 5))
    params, _ = train_run(dataset, model_config, train_config, verbose=verbose)

    _, holdout = split_holdout(dataset, eval_size)
    reconstructions = reconstruct(params, holdout.X)
    rows = []
    for level, x_hat in zip(model_config.levels, reconstructions):
        k = level + 1
        fe_re = float(np.mean((holdout.X - x_hat) ** 2))
        pca = pca_oracle(holdout.X, k)
        angles = principal_angles(reconstruction_subspace(x_hat, k), pca.components)
        rows.append({
            'k': k, 'fe_re': fe_re, 'pca_re': pca.truncation_error,
            'rel_diff': (fe_re - pca.truncation_error) / max(pca.truncation_error, 1e-12),
            'angle_deg': float(np.max(angles)),
        })
    return pd.DataFrame(rows, columns=['k', 'fe_re', 'pca_re', 'rel_diff', 'angle_deg'])
