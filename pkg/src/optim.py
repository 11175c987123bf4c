"""
Adam с поправкой смещения моментов.
Одно состояние AdamState на каждый тензор параметров.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Моменты и счетчик шагов одного тензора параметров"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Tensor, lr: float = 0.001, **kwargs) -> "AdamState":
        return cls(m=np.zeros(param.shape), v=np.zeros(param.shape), lr=lr, **kwargs)


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              states: Sequence[AdamState]) -> Sequence[Tensor]:
    """
    Один шаг Adam на месте

    Args:
        params: Тензоры параметров
        grads: Градиенты (None - нулевой градиент)
        states: Состояния, по одному на параметр

    Returns:
        Sequence[Tensor]: Те же тензоры с обновленными значениями
    """
    if not len(params) == len(grads) == len(states):
        raise ShapeError("adam_step: разное количество параметров, градиентов и состояний")
    for param, g, state in zip(params, grads, states):
        if g is None:
            g = np.zeros(param.shape)
        if g.shape != param.shape or state.m.shape != param.shape:
            raise ShapeError(f"adam_step: форма градиента {g.shape} != {param.shape}")
        state.t += 1
        state.m *= state.beta1
        state.m += (1.0 - state.beta1) * g
        state.v *= state.beta2
        state.v += (1.0 - state.beta2) * (g * g)
        m_hat = state.m / (1.0 - state.beta1 ** state.t)
        v_hat = state.v / (1.0 - state.beta2 ** state.t)
        param.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class Adam:
    """Оптимизатор одной группы параметров"""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Tensor] = list(params)
        self.states: List[AdamState] = [
            AdamState.zeros_like(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps) for p in self.params
        ]

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.states)
