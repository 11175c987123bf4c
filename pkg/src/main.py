"""
Командная строка Full Encoder lab.
Подкоманды: gen-data, train, eval, stability, reproduce, pca-check.

Коды выхода: 0 - успех, 2 - ошибка конфигурации или формата, 3 - ошибка ввода-вывода,
4 - нечисловое значение функции потерь (диагностика в <out>/failure.json).
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .data_structures import Dataset, ModelConfig, SystemSpec, TrainConfig
from .errors import ConfigError, FELabError, NumericalError
from .experiments import (DATA_FILE, SYSTEM_FILE, CHECKPOINT_FILE, ReproductionPipeline,
                          compare_checkpoints, evaluate_checkpoint, pca_check)
from .nonlinear_system import build_system, default_importance, sample_dataset
from .storage import load_dataset, load_system, save_dataset, save_system
from .trainer import save_history_csv, train_run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

THREADS_ENV = "FE_LAB_THREADS"


def default_jobs() -> int:
    """Количество процессов по умолчанию: FE_LAB_THREADS или 1"""
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return 1
    try:
        jobs = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} должен быть целым числом, получено {value!r}")
    if jobs < 1:
        raise ConfigError(f"{THREADS_ENV} должен быть >= 1")
    return jobs


def resolve_data(path: str) -> Tuple[Path, Optional[Path]]:
    """Путь к набору данных и (если есть) к файлу системы; принимает директорию или файл"""
    path = Path(path)
    if path.is_dir():
        data_path, system_path = path / DATA_FILE, path / SYSTEM_FILE
    else:
        data_path, system_path = path, path.parent / SYSTEM_FILE
    return data_path, system_path if system_path.exists() else None


def load_data(path: str) -> Tuple[Dataset, Optional[SystemSpec]]:
    data_path, system_path = resolve_data(path)
    dataset = load_dataset(data_path)
    spec = load_system(system_path) if system_path is not None else None
    return dataset, spec


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """JSON вида {"model": {...}, "train": {...}}"""
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Файл конфигурации не найден: {config_path}")
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Поврежденный файл конфигурации {config_path}: {e}") from e
    unknown = set(data) - {'model', 'train'}
    if unknown:
        raise ConfigError(f"Неизвестные разделы конфигурации: {sorted(unknown)}")
    return data


def _merge(defaults: Dict[str, Any], file_values: Dict[str, Any], flags: Dict[str, Any]) -> Dict[str, Any]:
    """Приоритет: флаги > файл конфигурации > значения по умолчанию"""
    merged = dict(defaults)
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _first_set(*values: Any) -> Any:
    """Первое значение, отличное от None (0 и пустая строка - тоже заданные значения)"""
    return next(v for v in values if v is not None)


def build_configs(args: argparse.Namespace, n_outputs: int) -> Tuple[ModelConfig, TrainConfig]:
    """Эффективные конфигурации модели и обучения для train"""
    config_file = load_config_file(args.config)
    model_values = dict(config_file.get('model', {}))
    kind = _first_set(args.model, model_values.pop('kind', None), "fe")
    n_latents = _first_set(args.latents, model_values.pop('n_latents', None), 6)
    model_flags = {'beta': args.beta, 'xi': args.xi, 'alpha': args.alpha}
    model_overrides = _merge({'n_outputs': n_outputs}, model_values, model_flags)
    beta = model_overrides.pop('beta', None)
    model_config = ModelConfig.for_kind(kind, n_latents, beta=beta, **model_overrides)

    train_flags = {
        'iterations': args.iters, 'batch_size': args.batch, 'lr': args.lr, 'seed': args.seed,
        'eval_size': args.eval_size, 'eval_every': args.eval_every,
    }
    train_values = _merge(TrainConfig().to_dict(), config_file.get('train', {}), train_flags)
    train_values['checkpoint_path'] = str(Path(args.out) / CHECKPOINT_FILE)
    return model_config, TrainConfig.from_dict(train_values)


def write_effective_config(out_dir: Path, payload: Dict[str, Any]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.json"
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, ensure_ascii=False, sort_keys=True)
    return path


# --- подкоманды ---

def cmd_gen_data(args: argparse.Namespace) -> int:
    """Строит систему, сэмплирует набор данных и сохраняет оба файла"""
    importance = default_importance(args.n_inputs)
    spec = build_system(args.seed, kind=args.kind, n_inputs=args.n_inputs, n_outputs=args.n_outputs,
                        importance=importance, noise_std=args.noise_std)
    dataset = sample_dataset(spec, args.n, seed=args.seed)
    out_dir = Path(args.out)
    save_system(spec, out_dir / SYSTEM_FILE)
    save_dataset(dataset, out_dir / DATA_FILE)
    write_effective_config(out_dir, {'gen_data': {
        'seed': args.seed, 'kind': args.kind, 'n': args.n, 'noise_std': args.noise_std,
        'n_inputs': args.n_inputs, 'n_outputs': args.n_outputs}})
    print(f"💾 Система: {out_dir / SYSTEM_FILE}")
    print(f"💾 Набор данных: {out_dir / DATA_FILE} ({dataset.n} строк)")
    print(f"system_digest {spec.digest()}")
    print(f"dataset_digest {dataset.digest()}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Обучение одной модели"""
    dataset, _ = load_data(args.data)
    model_config, train_config = build_configs(args, dataset.n_outputs)
    out_dir = Path(args.out)
    write_effective_config(out_dir, {'model': model_config.to_dict(), 'train': train_config.to_dict()})

    try:
        _, history = train_run(dataset, model_config, train_config, resume_from=args.resume,
                               verbose=not args.quiet)
    except NumericalError as e:
        with open(out_dir / "failure.json", 'w', encoding='utf-8') as f:
            json.dump(e.diagnostics(), f, indent=2, ensure_ascii=False)
        raise
    path = save_history_csv(history, out_dir / "history.csv")
    print(f"💾 История: {path}")
    if history.records:
        last = history.records[-1]
        print(f"📊 RE на итерации {last.iteration}: " + ", ".join(f"{v:.4f}" for v in last.re))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Отчет обученной модели на отложенной выборке"""
    dataset, spec = load_data(args.data)
    report = evaluate_checkpoint(args.ckpt, dataset, args.out, spec=spec, svg=not args.no_svg)
    print(f"📊 RE по уровням {report.levels}: " + ", ".join(f"{v:.4f}" for v in report.re))
    print(f"💾 Отчет сохранен: {args.out}")
    return EXIT_OK


def cmd_stability(args: argparse.Namespace) -> int:
    """Стабильность латентов двух обученных моделей"""
    dataset, _ = load_data(args.data)
    table = compare_checkpoints(args.ckpt_a, args.ckpt_b, dataset)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "stability.csv", index=False, float_format="%.6f")
    mean = table.loc[table['latent'] == 'mean', 'score'].iloc[0]
    print(f"📊 Средняя стабильность: {mean:.4f}")
    print(f"💾 Результаты сохранены: {out_dir / 'stability.csv'}")
    return EXIT_OK


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Полная сетка экспериментов"""
    jobs = args.jobs if args.jobs is not None else default_jobs()
    pipeline = ReproductionPipeline(args.out, scale=args.scale, master_seed=args.seed, jobs=jobs,
                                    svg=not args.no_svg, verbose=not args.quiet)
    pipeline.run()
    return EXIT_OK


def cmd_pca_check(args: argparse.Namespace) -> int:
    """Линейный FE против PCA"""
    report = pca_check(seed=args.seed, n_latents=args.latents, iterations=args.iters,
                       verbose=not args.quiet)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "pca_report.csv", index=False, float_format="%.6f")
    write_effective_config(out_dir, {'pca_check': {'seed': args.seed, 'latents': args.latents,
                                                   'iterations': args.iters}})
    for row in report.itertuples():
        print(f"   k={row.k}: FE {row.fe_re:.5f}, PCA {row.pca_re:.5f}, угол {row.angle_deg:.2f}°")
    print(f"💾 Отчет сохранен: {out_dir / 'pca_report.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fe-lab", description="Full Encoder: обучение и оценка")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Сгенерировать систему и набор данных")
    gen.add_argument("--seed", type=int, default=0, help="Сид системы и выборки")
    gen.add_argument("--kind", choices=["nonlinear", "linear"], default="nonlinear", help="Тип системы")
    gen.add_argument("--n", type=int, default=10000, help="Количество строк")
    gen.add_argument("--noise-std", type=float, default=0.125, help="Стандартное отклонение шума")
    gen.add_argument("--n-inputs", type=int, default=5, help="Количество факторов")
    gen.add_argument("--n-outputs", type=int, default=48, help="Количество выходов")
    gen.add_argument("--out", required=True, help="Директория результатов")
    gen.set_defaults(handler=cmd_gen_data)

    train = sub.add_parser("train", help="Обучить модель")
    train.add_argument("--data", required=True, help="Директория или файл набора данных")
    train.add_argument("--model", choices=["fe", "vae", "beta-vae", "beta-fe", "supervised-fe", "linear-fe"],
                       help="Архитектура (по умолчанию fe)")
    train.add_argument("--latents", type=int, help="Количество латентов Encoder (по умолчанию 6)")
    train.add_argument("--beta", type=float, help="Множитель KL")
    train.add_argument("--xi", type=float, help="Масштаб весов уровней")
    train.add_argument("--alpha", type=float, help="Знаменатель геометрического ряда весов")
    train.add_argument("--iters", type=int, help="Количество итераций (по умолчанию 20000)")
    train.add_argument("--batch", type=int, help="Размер батча (по умолчанию 500)")
    train.add_argument("--lr", type=float, help="Скорость обучения (по умолчанию 0.001)")
    train.add_argument("--seed", type=int, help="Сид обучения")
    train.add_argument("--eval-size", type=int, help="Размер отложенной выборки")
    train.add_argument("--eval-every", type=int, help="Период оценки RE")
    train.add_argument("--config", help="JSON конфигурация {model, train}")
    train.add_argument("--resume", help="Чекпоинт для продолжения обучения")
    train.add_argument("--out", required=True, help="Директория результатов")
    train.add_argument("--quiet", action="store_true", help="Без прогресса")
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="Оценить обученную модель")
    ev.add_argument("--ckpt", required=True, help="Чекпоинт")
    ev.add_argument("--data", required=True, help="Директория или файл набора данных")
    ev.add_argument("--out", required=True, help="Директория отчета")
    ev.add_argument("--no-svg", action="store_true", help="Только CSV")
    ev.set_defaults(handler=cmd_eval)

    st = sub.add_parser("stability", help="Сравнить латенты двух моделей")
    st.add_argument("--ckpt-a", required=True, help="Первый чекпоинт")
    st.add_argument("--ckpt-b", required=True, help="Второй чекпоинт")
    st.add_argument("--data", required=True, help="Директория или файл набора данных")
    st.add_argument("--out", required=True, help="Директория результатов")
    st.set_defaults(handler=cmd_stability)

    rep = sub.add_parser("reproduce", help="Полная сетка экспериментов")
    rep.add_argument("--out", required=True, help="Директория результатов")
    rep.add_argument("--scale", choices=["desk", "paper"], default="desk", help="Масштаб")
    rep.add_argument("--seed", type=int, default=0, help="Главный сид")
    rep.add_argument("--jobs", type=int, help=f"Параллельные процессы (по умолчанию {THREADS_ENV} или 1)")
    rep.add_argument("--no-svg", action="store_true", help="Только CSV")
    rep.add_argument("--quiet", action="store_true", help="Без прогресса")
    rep.set_defaults(handler=cmd_reproduce)

    pca = sub.add_parser("pca-check", help="Линейный FE против PCA")
    pca.add_argument("--seed", type=int, default=0, help="Сид")
    pca.add_argument("--latents", type=int, default=2, help="Латенты Encoder (ранги 1..n+1)")
    pca.add_argument("--iters", type=int, default=8000, help="Количество итераций")
    pca.add_argument("--out", required=True, help="Директория результатов")
    pca.add_argument("--quiet", action="store_true", help="Без прогресса")
    pca.set_defaults(handler=cmd_pca_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Точка входа CLI

    Args:
        argv: Аргументы (None - sys.argv)

    Returns:
        int: Код выхода
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except NumericalError as e:
        print(f"❌ Численная ошибка: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError) as e:
        print(f"❌ Ошибка конфигурации: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"❌ Ошибка ввода-вывода: {e}", file=sys.stderr)
        return EXIT_IO
    except FELabError as e:
        print(f"❌ Ошибка: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
