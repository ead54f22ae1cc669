"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

Every node of a computation record is a ``DiffValue``. Primitives compute
their value eagerly and keep references to their parents; ``backward`` walks
the record in reverse topological order and looks up each node's rule in
``BACKWARD_RULES`` (one partial-derivative rule per primitive).

The record is rebuilt on every forward pass, so graphs of any node count can
flow through the same parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from vgib.exceptions import DomainError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Operand = Union["DiffValue", np.ndarray, float, int]


class DiffValue:
    """A value in a computation record, with its accumulated gradient."""

    # Lets ``ndarray <op> DiffValue`` dispatch to our reflected operators.
    __array_priority__ = 1000

    def __init__(
        self,
        value,
        parents: Tuple["DiffValue", ...] = (),
        op: str = "leaf",
        requires_grad: bool = False,
        name: Optional[str] = None,
        cache: Optional[dict] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self.name = name
        self.cache = cache or {}

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"DiffValue({label}, shape={self.value.shape})"

    def __add__(self, other: Operand) -> "DiffValue":
        return add(self, other)

    def __radd__(self, other: Operand) -> "DiffValue":
        return add(other, self)

    def __sub__(self, other: Operand) -> "DiffValue":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "DiffValue":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "DiffValue":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "DiffValue":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "DiffValue":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "DiffValue":
        return div(other, self)

    def __matmul__(self, other: Operand) -> "DiffValue":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "DiffValue":
        return matmul(other, self)

    def __neg__(self) -> "DiffValue":
        return mul(self, -1.0)


# ==================== Leaves ====================


def constant(value) -> DiffValue:
    """Wrap a value that never receives a gradient."""
    return DiffValue(np.array(value, dtype=np.float64))


def parameter(value, name: Optional[str] = None) -> DiffValue:
    """Wrap a trainable leaf; the array is copied so the caller's data stays untouched."""
    return DiffValue(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _lift(x: Operand) -> DiffValue:
    return x if isinstance(x, DiffValue) else constant(x)


def _result(value: np.ndarray, parents: Sequence[DiffValue], op: str, **cache) -> DiffValue:
    requires_grad = any(p.requires_grad for p in parents)
    return DiffValue(value, tuple(parents), op=op, requires_grad=requires_grad, cache=cache)


def _broadcast_shape(op: str, a: DiffValue, b: DiffValue) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} cannot be combined") from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ==================== Primitives ====================


def add(a: Operand, b: Operand) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    return _result(a.value + b.value, (a, b), "add")


def sub(a: Operand, b: Operand) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)
    return _result(a.value - b.value, (a, b), "sub")


def mul(a: Operand, b: Operand) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)
    return _result(a.value * b.value, (a, b), "mul")


def div(a: Operand, b: Operand) -> DiffValue:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)
    return _result(a.value / b.value, (a, b), "div")


def matmul(a: Operand, b: Operand) -> DiffValue:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _result(a.value @ b.value, (a, b), "matmul")


def sigmoid(a: Operand) -> DiffValue:
    a = _lift(a)
    return _result(special.expit(a.value), (a,), "sigmoid")


def relu(a: Operand) -> DiffValue:
    a = _lift(a)
    return _result(np.maximum(a.value, 0.0), (a,), "relu")


def exp(a: Operand) -> DiffValue:
    a = _lift(a)
    return _result(np.exp(a.value), (a,), "exp")


def log(a: Operand) -> DiffValue:
    a = _lift(a)
    if np.any(a.value <= 0.0):
        raise DomainError(
            f"log: input of shape {a.shape} has non-positive entries (min {a.value.min()!r}); clamp first"
        )
    return _result(np.log(a.value), (a,), "log")


def square(a: Operand) -> DiffValue:
    a = _lift(a)
    return _result(a.value * a.value, (a,), "square")


def sum(a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> DiffValue:  # noqa: A001
    a = _lift(a)
    return _result(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", axis=axis, keepdims=keepdims)


def mean(a: Operand, axis: Optional[int] = None, keepdims: bool = False) -> DiffValue:
    a = _lift(a)
    return _result(a.value.mean(axis=axis, keepdims=keepdims), (a,), "mean", axis=axis, keepdims=keepdims)


def concat(values: Sequence[Operand], axis: int = 0) -> DiffValue:
    parts = [_lift(v) for v in values]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    try:
        joined = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ShapeError(f"concat: shapes {shapes} cannot be joined on axis {axis}") from None
    sizes = [p.shape[axis] for p in parts]
    return _result(joined, parts, "concat", axis=axis, sizes=sizes)


def take_rows(a: Operand, indices: Sequence[int]) -> DiffValue:
    a = _lift(a)
    index = np.asarray(indices, dtype=np.int64)
    if a.value.ndim == 0:
        raise ShapeError(f"take_rows: cannot select rows of shape {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: indices out of range for shape {a.shape}")
    return _result(a.value[index], (a,), "take_rows", indices=index)


def log_softmax(a: Operand, axis: int = -1) -> DiffValue:
    a = _lift(a)
    return _result(special.log_softmax(a.value, axis=axis), (a,), "log_softmax", axis=axis)


# ==================== Composite helpers ====================


def clamp_min(a: Operand, floor: float) -> DiffValue:
    """Floor ``a`` at ``floor``; floored entries become constants (zero gradient)."""
    a = _lift(a)
    keep = (a.value >= floor).astype(np.float64)
    return a * keep + (1.0 - keep) * floor


def clamp_max(a: Operand, ceiling: float) -> DiffValue:
    a = _lift(a)
    keep = (a.value <= ceiling).astype(np.float64)
    return a * keep + (1.0 - keep) * ceiling


def clamp(a: Operand, low: float, high: float) -> DiffValue:
    return clamp_max(clamp_min(a, low), high)


# ==================== Backward rules ====================


def _add_backward(node: DiffValue, g: np.ndarray):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_backward(node: DiffValue, g: np.ndarray):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_backward(node: DiffValue, g: np.ndarray):
    a, b = node.parents
    return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)


def _div_backward(node: DiffValue, g: np.ndarray):
    a, b = node.parents
    grad_a = _unbroadcast(g / b.value, a.shape)
    grad_b = _unbroadcast(-g * a.value / (b.value * b.value), b.shape)
    return grad_a, grad_b


def _matmul_backward(node: DiffValue, g: np.ndarray):
    a, b = node.parents
    return g @ b.value.T, a.value.T @ g


def _sigmoid_backward(node: DiffValue, g: np.ndarray):
    s = node.value
    return (g * s * (1.0 - s),)


def _relu_backward(node: DiffValue, g: np.ndarray):
    (a,) = node.parents
    return (g * (a.value > 0.0),)


def _exp_backward(node: DiffValue, g: np.ndarray):
    return (g * node.value,)


def _log_backward(node: DiffValue, g: np.ndarray):
    (a,) = node.parents
    return (g / a.value,)


def _square_backward(node: DiffValue, g: np.ndarray):
    (a,) = node.parents
    return (2.0 * g * a.value,)


def _expand_reduced(node: DiffValue, g: np.ndarray) -> np.ndarray:
    (a,) = node.parents
    axis = node.cache["axis"]
    if axis is not None and not node.cache["keepdims"]:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape).copy()


def _sum_backward(node: DiffValue, g: np.ndarray):
    return (_expand_reduced(node, g),)


def _mean_backward(node: DiffValue, g: np.ndarray):
    (a,) = node.parents
    axis = node.cache["axis"]
    count = a.value.size if axis is None else a.shape[axis]
    return (_expand_reduced(node, g) / count,)


def _concat_backward(node: DiffValue, g: np.ndarray):
    boundaries = np.cumsum(node.cache["sizes"])[:-1]
    return tuple(np.split(g, boundaries, axis=node.cache["axis"]))


def _take_rows_backward(node: DiffValue, g: np.ndarray):
    (a,) = node.parents
    grad = np.zeros_like(a.value)
    np.add.at(grad, node.cache["indices"], g)
    return (grad,)


def _log_softmax_backward(node: DiffValue, g: np.ndarray):
    axis = node.cache["axis"]
    return (g - np.exp(node.value) * g.sum(axis=axis, keepdims=True),)


BACKWARD_RULES: Dict[str, Callable[[DiffValue, np.ndarray], Tuple[Optional[np.ndarray], ...]]] = {
    "add": _add_backward,
    "sub": _sub_backward,
    "mul": _mul_backward,
    "div": _div_backward,
    "matmul": _matmul_backward,
    "sigmoid": _sigmoid_backward,
    "relu": _relu_backward,
    "exp": _exp_backward,
    "log": _log_backward,
    "square": _square_backward,
    "sum": _sum_backward,
    "mean": _mean_backward,
    "concat": _concat_backward,
    "take_rows": _take_rows_backward,
    "log_softmax": _log_softmax_backward,
}


# ==================== Reverse pass ====================


def _topological_order(root: DiffValue) -> List[DiffValue]:
    order: List[DiffValue] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: DiffValue) -> Dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable trainable leaf.

    Returns a table of the accumulated gradients keyed by leaf name
    (``leaf_<k>`` for unnamed leaves, in discovery order).
    """
    if root.value.size != 1:
        raise DomainError(f"backward: root must be a scalar, got shape {root.shape}")

    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    table: Dict[str, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if not node.parents:
            key = node.name or f"leaf_{len(table)}"
            table[key] = node.grad.copy()
            continue
        for parent, parent_grad in zip(node.parents, BACKWARD_RULES[node.op](node, g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return table


# ==================== Gradient checking ====================

# Denominator floor for relative errors of near-zero gradients.
_ERROR_FLOOR = 1e-6
# Finite-difference steps tried, as fractions of the requested step, for entries that fail.
REFINE_FACTORS = (1e-1, 1e-2)


@dataclass
class GradCheckReport:
    """Max relative error per parameter between backward() and finite differences."""

    errors: Dict[str, float]
    step: float
    tolerance: float
    refined: int = 0
    details: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_parameter(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _ERROR_FLOOR)


def _central_difference(fn: Callable[[], DiffValue], flat: np.ndarray, index: int, step: float) -> float:
    original = flat[index]
    flat[index] = original + step
    upper = fn().item()
    flat[index] = original - step
    lower = fn().item()
    flat[index] = original
    return (upper - lower) / (2.0 * step)


def gradient_check(
    fn: Callable[[], DiffValue],
    params: Mapping[str, DiffValue],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    refine: bool = True,
) -> GradCheckReport:
    """Compare backward() gradients of ``fn`` against central differences.

    ``fn`` must be deterministic: every random draw it uses is frozen by the
    caller. Entries failing at ``step`` are retried at ``step / 10`` and
    ``step / 100`` when ``refine`` is set, keeping the best agreement. The
    finer steps shrink truncation error and ReLU kink crossings; a wrong rule
    fails at every step.
    """
    for param in params.values():
        param.zero_grad()
    backward(fn())
    analytic = {name: param.grad.copy().reshape(-1) for name, param in params.items()}

    report = GradCheckReport(errors={}, step=step, tolerance=tolerance)
    for name, param in params.items():
        flat = param.value.reshape(-1)
        if not np.shares_memory(flat, param.value):
            raise DomainError(f"gradient_check: parameter {name} is not contiguous")
        worst = 0.0
        for index in range(flat.size):
            expected = float(analytic[name][index])
            numeric = _central_difference(fn, flat, index, step)
            error = relative_error(expected, numeric)
            if error > tolerance and refine:
                report.refined += 1
                for factor in REFINE_FACTORS:
                    finer = _central_difference(fn, flat, index, step * factor)
                    error = min(error, relative_error(expected, finer))
                    if error <= tolerance:
                        break
            if error >= worst:
                worst = error
                report.details[name] = (expected, numeric)
        report.errors[name] = worst
    logger.debug(f"gradient_check: max relative error {report.max_error:.3e} ({report.refined} refined)")
    return report


# ==================== Random numbers ====================

_SEED_MASK = (1 << 64) - 1


class Rng:
    """Seeded PCG64 stream; Gaussians use numpy's documented ziggurat transform."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _SEED_MASK
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None) -> np.ndarray:
        """Draws in the open interval (0, 1)."""
        draws = self._generator.random(size)
        return np.clip(draws, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)

    def normal(self, size=None) -> np.ndarray:
        return self._generator.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in the closed interval [low, high]."""
        return self._generator.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def dirichlet(self, alpha: Sequence[float], size=None) -> np.ndarray:
        return self._generator.dirichlet(alpha, size=size)

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream derived from this stream's seed."""
        sequence = np.random.SeedSequence([self.seed, int(offset)])
        return Rng(int(sequence.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> List[int]:
        state = self._generator.bit_generator.state
        return [
            int(state["state"]["state"]),
            int(state["state"]["inc"]),
            int(state["has_uint32"]),
            int(state["uinteger"]),
        ]

    def set_state(self, values: Sequence[int]) -> None:
        if len(values) != 4:
            raise DomainError(f"Rng.set_state: expected 4 integers, got {len(values)}")
        self._generator.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(values[0]), "inc": int(values[1])},
            "has_uint32": int(values[2]),
            "uinteger": int(values[3]),
        }
