"""
Исключения Full Encoder lab.
Все классы наследуют встроенные типы, поэтому вызывающий код может ловить
как ValueError / OSError, так и конкретный класс.
"""

from typing import Dict, Optional


class FELabError(Exception):
    """Базовое исключение проекта"""


class ConfigError(FELabError, ValueError):
    """Некорректная конфигурация, флаги или нарушение инварианта"""


class ShapeError(FELabError, ValueError):
    """Несовпадение размерностей"""


class DomainError(FELabError, ValueError):
    """Аргумент вне области определения (например, sigma <= 0)"""


class ContractError(FELabError, ValueError):
    """Нарушен контракт вызова (backward от не скалярной величины)"""


class GraphError(FELabError, RuntimeError):
    """Структурная ошибка ленты вычислений"""


class FormatError(FELabError, ValueError):
    """Неверный magic, версия или дайджест файла"""


class TruncatedFileError(FELabError, OSError):
    """Файл обрезан"""


class NumericalError(FELabError, ArithmeticError):
    """Нечисловое значение функции потерь"""

    def __init__(self, message: str, iteration: Optional[int] = None,
                 losses: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.iteration = iteration
        self.losses = dict(losses or {})

    def diagnostics(self) -> Dict:
        """Диагностика для дампа в failure.json"""
        return {
            'message': str(self),
            'iteration': self.iteration,
            'losses': {k: repr(v) for k, v in self.losses.items()},
        }
