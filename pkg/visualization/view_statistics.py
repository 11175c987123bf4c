#!/usr/bin/env python3
"""
Просмотр сводных таблиц воспроизведения и деталей отдельного запуска
"""

import json
import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).parent.parent))


def view_statistics(results_dir: str = "results"):
    """
    Показывает таблицу ошибок реконструкции и стабильность всех запусков

    Args:
        results_dir: Директория с результатами reproduce
    """

    print("📊 Ошибка реконструкции и стабильность")
    print("=" * 50)

    results_path = Path(results_dir)
    table_file = results_path / "table2.csv"

    if not table_file.exists():
        print(f"❌ Таблица не найдена: {table_file}")
        return False

    try:
        table = pd.read_csv(table_file)
        columns = [c for c in table.columns if c.startswith('re_L')]

        print(f"\n📁 Экспериментов: {len(table)}")
        for _, row in table.iterrows():
            values = " ".join("  -   " if pd.isna(row[c]) else f"{row[c]:.3f}" for c in columns)
            mark = "✅" if row['status'] == 'ok' else "⚠️ "
            print(f"   {mark} {row['name']:<14} {values}")

        stability_file = results_path / "stability.csv"
        if stability_file.exists():
            stability = pd.read_csv(stability_file)
            means = stability[stability['latent'] == 'mean']
            print(f"\n📊 Стабильность (среднее |Spearman| между сидами):")
            for _, row in means.iterrows():
                print(f"      {row['name']}: {row['score']:.3f}")

        summary_file = results_path / "summary.json"
        if summary_file.exists():
            with open(summary_file, 'r', encoding='utf-8') as f:
                summary = json.load(f)
            print(f"\n📊 Общая статистика:")
            print(f"   Масштаб: {summary['scale']}, сид {summary['master_seed']}")
            print(f"   Успешных запусков: {summary['runs_ok']}/{summary['runs_total']}")

        return True

    except Exception as e:
        print(f"❌ Ошибка загрузки статистики: {e}")
        return False


def view_run_details(run_name: str, results_dir: str = "results"):
    """
    Показывает детали конкретного запуска

    Args:
        run_name: Имя директории запуска (например, fe-6-s123)
        results_dir: Директория с результатами
    """

    run_dir = Path(results_dir) / "runs" / run_name

    if not run_dir.exists():
        print(f"❌ Запуск не найден: {run_dir}")
        return False

    try:
        print(f"🔍 Детали запуска: {run_name}")
        print("=" * 50)

        config_file = run_dir / "effective_config.json"
        if config_file.exists():
            with open(config_file, 'r', encoding='utf-8') as f:
                config = json.load(f)
            model, train = config['model'], config['train']
            print(f"\n🔧 Параметры:")
            print(f"   Модель: {model['kind']}, латентов {model['n_latents']}, beta {model['beta']}")
            print(f"   Итераций: {train['iterations']}, батч {train['batch_size']}, lr {train['lr']}")

        re_file = run_dir / "re_curve.csv"
        if re_file.exists():
            print(f"\n📊 Ошибка реконструкции по уровням:")
            for _, row in pd.read_csv(re_file).iterrows():
                print(f"   уровень {int(row['level'])}: {row['re']:.4f}")

        mi_file = run_dir / "mi_matrix.csv"
        if mi_file.exists():
            mi = pd.read_csv(mi_file)
            if not mi.empty:
                print(f"\n🎯 Взаимная информация (наты):")
                print(mi.pivot(index='latent', columns='factor', values='mi_nats').round(3).to_string())

        failure_file = run_dir / "failure.json"
        if failure_file.exists():
            with open(failure_file, 'r', encoding='utf-8') as f:
                failure = json.load(f)
            print(f"\n❌ Сбой на итерации {failure['iteration']}: {failure['message']}")

        return True

    except Exception as e:
        print(f"❌ Ошибка загрузки деталей запуска: {e}")
        return False


def main():
    """Основная функция"""

    results_dir = sys.argv[1] if len(sys.argv) > 1 else "results"
    if len(sys.argv) > 2:
        # Показать детали конкретного запуска
        success = view_run_details(sys.argv[2], results_dir)
    else:
        # Показать общую статистику
        success = view_statistics(results_dir)

    return success


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
