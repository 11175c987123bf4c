#!/usr/bin/env python3
"""
Запуск полной сетки экспериментов Full Encoder (масштаб desk)
"""

import sys
from pathlib import Path

# Добавляем корень репозитория в путь
sys.path.insert(0, str(Path(__file__).parent))

from src.experiments import ReproductionPipeline  # noqa: E402
from src.main import default_jobs  # noqa: E402


def main():
    """Основная функция для запуска воспроизведения"""

    print("🚀 Запуск воспроизведения Full Encoder")
    print("=" * 50)

    output_dir = sys.argv[1] if len(sys.argv) > 1 else "results"
    scale = sys.argv[2] if len(sys.argv) > 2 else "desk"

    try:
        pipeline = ReproductionPipeline(output_dir, scale=scale, master_seed=0, jobs=default_jobs())
        summary = pipeline.run()

        print(f"\n📊 Финальная статистика:")
        print(f"   Запусков успешно: {summary['runs_ok']}/{summary['runs_total']}")
        for name, score in summary['stability_mean'].items():
            print(f"   Стабильность {name}: {score:.3f}")

        if summary['runs_ok'] == summary['runs_total']:
            print(f"\n✅ Воспроизведение выполнено успешно!")
        else:
            print(f"\n⚠️  Часть запусков завершилась с ошибкой")
        print(f"   Результаты сохранены: {output_dir}")
        return summary['runs_ok'] > 0

    except Exception as e:
        print(f"\n❌ Ошибка: {e}")
        import traceback
        traceback.print_exc()
        return False


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
