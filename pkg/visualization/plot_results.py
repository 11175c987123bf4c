#!/usr/bin/env python3
"""
Перерисовка всех SVG из CSV результатов без повторного обучения
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.experiments import render_summary_figures  # noqa: E402
from src.figures import render_run_figures  # noqa: E402


def plot_results(results_dir: str = "results"):
    """
    Перерисовывает сводные рисунки и рисунки каждого запуска

    Args:
        results_dir: Директория с результатами reproduce
    """

    print("🎨 Перерисовка рисунков")
    print("=" * 50)

    results_path = Path(results_dir)
    if not results_path.exists():
        print(f"❌ Директория не найдена: {results_path}")
        return False

    try:
        summary = render_summary_figures(results_path)
        for name, path in summary.items():
            print(f"✅ {name}: {path}")

        runs_dir = results_path / "runs"
        run_dirs = sorted(p for p in runs_dir.iterdir() if p.is_dir()) if runs_dir.exists() else []
        total = 0
        for run_dir in run_dirs:
            total += len(render_run_figures(run_dir))
        print(f"✅ Рисунков запусков: {total} ({len(run_dirs)} запусков)")
        return True

    except Exception as e:
        print(f"❌ Ошибка перерисовки: {e}")
        return False


if __name__ == "__main__":
    success = plot_results(sys.argv[1] if len(sys.argv) > 1 else "results")
    sys.exit(0 if success else 1)
