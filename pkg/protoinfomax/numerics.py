"""
Модуль тензоров с обратным автоматическим дифференцированием

Тензор хранит массив numpy и, если участвует в вычислении градиента,
ссылки на родителей и правило обратного прохода. Ленту (Tape) строит
backward: топологический порядок узлов, ведущих к скалярной функции потерь.
Неявное расширение форм допускается только между тензором и скаляром,
остальное - через явный expand.
"""
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from protoinfomax.exceptions import GradientError, NumericsError, ShapeError

_grad_state = {"enabled": True}


@contextmanager
def no_grad():
    """Контекст, в котором операции не записываются в граф"""
    previous = _grad_state["enabled"]
    _grad_state["enabled"] = False
    try:
        yield
    finally:
        _grad_state["enabled"] = previous


def is_grad_enabled() -> bool:
    return _grad_state["enabled"]


class Tensor:
    """Плотный тензор с накоплением градиента"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: ожидается один элемент, форма {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


TensorLike = Union[Tensor, float, int, np.ndarray]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_state["enabled"] and any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _fit(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    raise GradientError(f"Градиент формы {grad.shape} не приводится к форме {shape}")


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: несовместимые формы {a.shape} и {b.shape}")


# Поэлементные операции

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)), "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)

    def backward(g):
        return (_fit(g / b.data, a.shape),
                _fit(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _result(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def clamp(a: TensorLike, lo: float, hi: float) -> Tensor:
    """Ограничение значений отрезком [lo, hi]; вне интервала градиент нулевой"""
    a = as_tensor(a)
    if lo > hi:
        raise NumericsError(f"clamp: нижняя граница {lo} больше верхней {hi}")
    active = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * active,), "clamp")


# Линейная алгебра и работа с формами

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Матричное произведение

    Допустимы формы (m,k)@(k,n), (...,m,k)@(k,n) и пакетные (B,m,k)@(B,k,n).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or \
            (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: несовместимые формы {a.shape} и {b.shape}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return grad_a, grad_b

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: пустой список тензоров")
    reference = tensors[0]
    axis = axis % reference.ndim
    for t in tensors[1:]:
        if t.ndim != reference.ndim or any(
                t.shape[i] != reference.shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError(f"concat: несовместимые формы {reference.shape} и {t.shape}")

    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: пустой список тензоров")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: разные формы {sorted(shapes)}")

    data = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % data.ndim

    def backward(g):
        return tuple(np.take(g, index, axis=axis) for index in range(len(tensors)))

    return _result(data, tensors, backward, "stack")


def getitem(a: TensorLike, key) -> Tensor:
    """Срез тензора (аналог slice); градиент возвращается на исходные позиции"""
    a = as_tensor(a)
    try:
        data = a.data[key]
    except IndexError as e:
        raise ShapeError(f"slice: индекс {key!r} вне формы {a.shape}: {e}")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(data), (a,), backward, "slice")


def take_rows(table: TensorLike, indices) -> Tensor:
    """Выборка строк матрицы по целочисленным индексам (поиск эмбеддингов)"""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: ожидается матрица, форма {table.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: индексы вне диапазона [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return _result(table.data[indices], (table,), backward, "take_rows")


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: форма {a.shape} не приводится к {shape}")
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: оси {axes} не подходят к форме {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def expand(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    """Явное расширение осей размера 1 (и ведущих осей) до формы shape"""
    a = as_tensor(a)
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or any(dim not in (1, target) for dim, target in zip(a.shape, shape[lead:])):
        raise ShapeError(f"expand: форма {a.shape} не расширяется до {shape}")

    def backward(g):
        grad = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, dim in enumerate(a.shape) if dim == 1 and shape[lead + i] != 1)
        if axes:
            grad = grad.sum(axis=axes, keepdims=True)
        return (grad,)

    return _result(np.array(np.broadcast_to(a.data, shape)), (a,), backward, "expand")


# Редукции

def _normalize_axis(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)

    def backward(g):
        grad = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(grad, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = float(np.prod([a.shape[ax] for ax in axes])) if axes else 1.0

    def backward(g):
        grad = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(grad / count, a.shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), backward, "mean")


def max(a: TensorLike, axis: int = -1) -> Tensor:
    """Максимум по оси; градиент уходит в первый аргмаксимум"""
    a = as_tensor(a)
    axis = axis % a.ndim
    winners = np.expand_dims(a.data.argmax(axis=axis), axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, winners, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(a.data.max(axis=axis), (a,), backward, "max")


def logsumexp(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    peak = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    weights = shifted / total

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _result((np.log(total) + peak).squeeze(axis), (a,), backward, "logsumexp")


def softmax(a: TensorLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax по оси; позиции с mask=False получают нулевой вес

    Raises:
        NumericsError: Если вдоль оси замаскированы все позиции
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"softmax: маска формы {mask.shape} для тензора {a.shape}")
        if not np.all(mask.any(axis=axis)):
            raise NumericsError("softmax: вдоль оси нет ни одной незамаскированной позиции")
        logits = np.where(mask, a.data, -np.inf)
    else:
        logits = a.data

    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    y = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def masked_mean(a: TensorLike, mask: np.ndarray, axis: int) -> Tensor:
    """
    Среднее по оси только по позициям с mask=1

    Маска задаёт ведущие оси тензора: mask.shape == a.shape[:mask.ndim], axis < mask.ndim.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=a.data.dtype)
    axis = axis % a.ndim
    if mask.shape != a.shape[:mask.ndim] or axis >= mask.ndim:
        raise ShapeError(f"masked_mean: маска {mask.shape} не подходит к тензору {a.shape}")

    full_mask = mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
    count = full_mask.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise NumericsError("masked_mean: пустая маска вдоль оси")

    def backward(g):
        return (np.expand_dims(g, axis) / count * full_mask,)

    data = (a.data * full_mask).sum(axis=axis) / count.squeeze(axis)
    return _result(data, (a,), backward, "masked_mean")


# Обратный проход

class Tape:
    """Узлы графа в топологическом порядке (родители раньше потомков)"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order = []
        visited = set()
        stack_ = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack_.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Обратный проход от скалярной функции потерь

    Градиенты накапливаются в поле grad листовых тензоров с requires_grad.

    Args:
        loss: Скалярный тензор

    Returns:
        Словарь {листовой тензор: градиент}

    Raises:
        GradientError: Для нескалярного loss или повторного вызова по тому же графу
    """
    if loss.size != 1:
        raise GradientError(f"backward: ожидается скаляр, получена форма {loss.shape}")
    if loss._consumed:
        raise GradientError("backward уже вызывался для этого графа; выполните прямой проход заново")
    if not loss.requires_grad:
        warnings.warn("backward: граф не содержит параметров, градиенты нулевые", RuntimeWarning)
        return {}

    tape = Tape.record(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves = []

    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if node._backward is None:
            leaves.append(node)
            if grad is not None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        if grad is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + parent_grad
            else:
                pending[id(parent)] = parent_grad

    loss._consumed = True
    return {leaf: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves}


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    tolerance: float
    worst_input: int
    worst_index: Tuple[int, ...]


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-2) -> GradCheckReport:
    """
    Сравнение аналитического градиента с центральной конечной разностью

    Относительная ошибка координаты: |a - n| / max(|a|, |n|, floor).

    Args:
        f: Функция входных тензоров, возвращающая скаляр
        inputs: Тензоры float64; их значения временно меняются на месте
        h: Шаг конечной разности
        tol: Допуск

    Returns:
        GradCheckReport
    """
    for tensor in inputs:
        if tensor.data.dtype != np.float64:
            raise NumericsError("grad_check требует тензоры float64")
        tensor.requires_grad = True
        tensor.grad = None

    backward(f(*inputs))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    worst_input, worst_index = 0, ()
    with no_grad():
        for position, tensor in enumerate(inputs):
            for index in np.ndindex(tensor.shape):
                original = tensor.data[index]
                tensor.data[index] = original + h
                plus = f(*inputs).item()
                tensor.data[index] = original - h
                minus = f(*inputs).item()
                tensor.data[index] = original

                numeric = (plus - minus) / (2.0 * h)
                exact = float(analytic[position][index])
                error = abs(exact - numeric) / np.max([abs(exact), abs(numeric), floor])
                if error > worst:
                    worst, worst_input, worst_index = float(error), position, index

    for tensor in inputs:
        tensor.grad = None
    return GradCheckReport(worst, worst < tol, tol, worst_input, worst_index)
