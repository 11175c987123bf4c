"""
Минимальный движок обратного автоматического дифференцирования.
Операции записываются на ленту только внутри `with Tape():`,
вне ленты они работают как обычный numpy (режим оценки).
"""

import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DomainError, GraphError, ShapeError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

ArrayLike = Union["Tensor", np.ndarray, float, int]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Массив float64 с флагом requires_grad и ссылкой на узел ленты"""

    __slots__ = ("values", "requires_grad", "grad", "node_id", "tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def item(self) -> float:
        return float(self.values.item())

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, node={self.node_id})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


@dataclass
class Node:
    """Запись ленты: операция, родители и функция vector-Jacobian product"""
    op: str
    parents: Tuple[Tensor, ...]
    vjp: VJP


class Tape:
    """Упорядоченная лента операций; родитель всегда раньше потомка"""

    _local = threading.local()

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> Optional["Tape"]:
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def record(self, op: str, parents: Tuple[Tensor, ...], values: np.ndarray, vjp: VJP) -> Tensor:
        for parent in parents:
            if parent.node_id is not None and parent.tape is not self:
                raise GraphError(f"Операция {op}: тензор принадлежит другой ленте")
        out = Tensor(values, requires_grad=True)
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(Node(op=op, parents=parents, vjp=vjp))
        return out


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, parents: Tuple[Tensor, ...], values: np.ndarray, vjp: VJP) -> Tensor:
    tape = Tape.current()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(values)
    return tape.record(op, parents, values, vjp)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Сворачивает градиент обратно к форме операнда после broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --- элементарные операции ---

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.values + b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.values - b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.values, lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: несовместимые формы {a.shape} и {b.shape}")
    av, bv = a.values, b.values
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def affine(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """Полносвязный слой x @ W + b"""
    return add(matmul(x, weight), bias)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log: аргумент должен быть положительным")
    av = a.values
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _emit("square", (a,), av * av, lambda g: (2.0 * g * av,))


def sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), np.sum(a.values, axis=axis), vjp)


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def clamp(a: ArrayLike, low: float, high: float) -> Tensor:
    """Ограничение значений; градиент проходит только внутри [low, high]"""
    a = as_tensor(a)
    inside = (a.values >= low) & (a.values <= high)
    return _emit("clamp", (a,), np.clip(a.values, low, high), lambda g: (g * inside,))


def take_columns(a: ArrayLike, start: int, stop: int) -> Tensor:
    """Столбцы [start, stop) матрицы"""
    a = as_tensor(a)
    if a.values.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"take_columns: диапазон [{start}, {stop}) вне формы {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("take_columns", (a,), a.values[:, start:stop].copy(), vjp)


def identity(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit("identity", (a,), a.values.copy(), lambda g: (g,))


def selu(a: ArrayLike) -> Tensor:
    """SeLU с константами λ=1.0507009873554805, α=1.6732632423543772"""
    a = as_tensor(a)
    av = a.values
    positive = av > 0
    negative_part = SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(av, 0.0))
    out = np.where(positive, SELU_LAMBDA * av, negative_part)
    slope = np.where(positive, SELU_LAMBDA, negative_part + SELU_LAMBDA * SELU_ALPHA)
    return _emit("selu", (a,), out, lambda g: (g * slope,))


def dropout_forward(x: ArrayLike, drop_ratio: float, training: bool,
                    rng: Optional[np.random.Generator]) -> Tuple[Tensor, np.ndarray]:
    """
    Inverted dropout

    Args:
        x: Входной тензор
        drop_ratio: Доля обнуляемых элементов, [0, 1)
        training: Режим обучения (в режиме оценки - тождество)
        rng: Генератор случайных чисел

    Returns:
        Tuple[Tensor, np.ndarray]: (результат, маска с учетом масштаба 1/(1-p))
    """
    if not 0 <= drop_ratio < 1:
        raise ConfigError("drop_ratio должен лежать в [0, 1)")
    x = as_tensor(x)
    if not training or drop_ratio == 0:
        return x, np.ones(x.shape)
    keep = rng.random(x.shape) >= drop_ratio
    mask = keep / (1.0 - drop_ratio)
    return mul(x, Tensor(mask)), mask


# --- функции потерь ---

def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Среднее (a - b)^2 по всем элементам"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: формы не совпадают {a.shape} и {b.shape}")
    return mean(square(sub(a, b)))


def gaussian_kl(mu: ArrayLike, sigma: ArrayLike) -> Tensor:
    """
    KL(N(mu, sigma^2) || N(0, I)): сумма по латентным измерениям, среднее по батчу

    Args:
        mu: B x d
        sigma: B x d, строго положительные

    Returns:
        Tensor: Скаляр
    """
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    if mu.shape != sigma.shape:
        raise ShapeError(f"gaussian_kl: формы не совпадают {mu.shape} и {sigma.shape}")
    if np.any(sigma.values <= 0):
        raise DomainError("gaussian_kl: sigma должна быть строго положительной")
    batch = mu.shape[0] if mu.values.ndim > 1 else 1
    terms = square(mu) + square(sigma) - 1.0 - mul(log(sigma), 2.0)
    return mul(sum(terms), 0.5 / batch)


# --- обратный проход ---

def _relevant_nodes(tape: Tape, last: int, leaf_ids: set, node_ids: set) -> set:
    """Узлы, через которые градиент может дойти до целей"""
    relevant = set()
    for idx in range(last + 1):
        if idx in node_ids:
            relevant.add(idx)
            continue
        for parent in tape.nodes[idx].parents:
            if (parent.node_id is None and id(parent) in leaf_ids) or parent.node_id in relevant:
                relevant.add(idx)
                break
    return relevant


def _propagate(tape: Tape, loss: Tensor, leaf_ids: Optional[set] = None,
               node_ids: Optional[set] = None) -> Tuple[Dict[int, Tuple[Tensor, np.ndarray]], Dict[int, np.ndarray]]:
    """Один обратный проход; каждый узел посещается не более одного раза"""
    if loss.values.size != 1:
        raise ContractError(f"backward: функция потерь должна быть скаляром, форма {loss.shape}")
    if loss.node_id is None or loss.tape is not tape:
        raise GraphError("backward: функция потерь не записана на этой ленте")

    pruned = leaf_ids is not None or node_ids is not None
    leaf_ids = leaf_ids or set()
    node_ids = node_ids or set()
    relevant = _relevant_nodes(tape, loss.node_id, leaf_ids, node_ids) if pruned else None

    pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    captured: Dict[int, np.ndarray] = {}
    leaf_grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    for idx in range(loss.node_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        if idx in node_ids:
            captured[idx] = g
        node = tape.nodes[idx]
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id is not None:
                if parent.node_id >= idx:
                    raise GraphError(f"Цикл на ленте: узел {idx} ссылается на {parent.node_id}")
                if relevant is not None and parent.node_id not in relevant:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg
            else:
                if pruned and id(parent) not in leaf_ids:
                    continue
                key = id(parent)
                if key in leaf_grads:
                    leaf_grads[key] = (parent, leaf_grads[key][1] + pg)
                else:
                    leaf_grads[key] = (parent, pg)
    return leaf_grads, captured


def backward(tape: Tape, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """
    Накапливает dloss/dparam в .grad листовых тензоров

    Args:
        tape: Лента, на которой записана loss
        loss: Скалярная функция потерь
        params: Если задано - градиент получают только эти тензоры
    """
    leaf_ids = None if params is None else {id(p) for p in params}
    leaf_grads, _ = _propagate(tape, loss, leaf_ids=leaf_ids)
    for leaf, g in leaf_grads.values():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(tape: Tape, loss: Tensor, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """
    Градиенты loss по произвольным тензорам (в том числе промежуточным), без изменения .grad

    Args:
        tape: Лента
        loss: Скалярная функция потерь
        inputs: Тензоры, по которым нужен градиент

    Returns:
        List[np.ndarray]: Градиенты (нули, если зависимости нет)
    """
    leaf_ids = {id(t) for t in inputs if t.node_id is None}
    node_ids = {t.node_id for t in inputs if t.node_id is not None}
    for t in inputs:
        if t.node_id is not None and t.tape is not tape:
            raise GraphError("grad: тензор принадлежит другой ленте")
    leaf_grads, captured = _propagate(tape, loss, leaf_ids=leaf_ids, node_ids=node_ids)
    result = []
    for t in inputs:
        if t.node_id is not None:
            g = captured.get(t.node_id)
        else:
            g = leaf_grads.get(id(t), (None, None))[1]
        result.append(np.zeros(t.shape) if g is None else g)
    return result
