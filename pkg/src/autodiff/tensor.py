"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation executed on a tensor that requires gradients records its
parents and a vector-Jacobian product on the output tensor (a dynamic tape).
``backward`` replays the tape in reverse topological order, accumulating
gradients additively where a tensor fans out.

Only the operations the PVLR head needs are provided; broadcasting follows
numpy but is only exercised for bias rows and scalar blends.
"""

import contextlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.utils.errors import ContractError, DegenerateInputError, DimensionError, EmptyInputError

logger = logging.getLogger(__name__)

# Rows whose norm falls below this are rejected by cosine_rows
NORM_FLOOR = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on the current thread (evaluation, finite differences)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


VectorJacobian = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    A dense n-dimensional float64 array that can take part in a differentiation graph.

    ``grad`` stays ``None`` until ``backward`` reaches the tensor; it is only
    populated on leaves (tensors not produced by an operation).
    """

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Tuple["Tensor", ...] = (), _vjp: Optional[VectorJacobian] = None,
                 _op: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named trainable tensor. Names are unique within one model."""

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


@dataclass
class Graph:
    """Executed operations reachable from a root, in topological order (inputs first)."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        # iterative post-order DFS; recursion depth would limit long tapes
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` of every leaf reachable from ``loss`` that requires grad.

    Gradients accumulate into existing ``grad`` buffers: calling backward twice
    without ``zero_grad`` sums both passes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_root(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        upstream = pending.pop(id(node), None)
        if upstream is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
            continue
        for parent, parent_grad in zip(node._parents, node._vjp(upstream)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: VectorJacobian, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- Elementwise arithmetic ---

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), vjp, "mul")


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**exponent for a constant exponent; exponent 0 yields ones with zero grad."""
    x = as_tensor(x)
    exponent = float(exponent)
    if exponent == 0.0:
        return _result(np.ones_like(x.data), (x,), lambda g: (np.zeros_like(g),), "pow")

    def vjp(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)
    return _result(np.power(x.data, exponent), (x,), vjp, "pow")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; the gradient is zero where the floor is active."""
    x = as_tensor(x)
    keep = x.data >= floor
    return _result(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,), "clamp_min")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,), "relu")


# --- Linear algebra ---

def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors are promoted the numpy way)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    a2 = a.data.reshape(1, -1) if a.data.ndim == 1 else a.data
    b2 = b.data.reshape(-1, 1) if b.data.ndim == 1 else b.data
    out = a.data @ b.data

    def vjp(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb
    return _result(out, (a, b), vjp, "matmul")


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return _result(out.copy(), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ W (+ b). Shapes: x [n×a], W [a×b], b [b]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    out = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = add(out, b)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if x.shape[1] < 1:
        raise EmptyInputError("softmax_rows needs at least one column")
    shifted = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = shifted / shifted.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)
    return _result(out, (x,), vjp, "softmax_rows")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    split = a.shape[1]

    def vjp(g):
        return g[:, :split], g[:, split:]
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), vjp, "concat_cols")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    rows = [as_tensor(r) for r in rows]
    if not rows:
        raise EmptyInputError("stack_rows needs at least one row")
    width = rows[0].shape
    for r in rows:
        if r.data.ndim != 1 or r.shape != width:
            raise DimensionError(f"stack_rows: row shape {r.shape} differs from {width}")

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))
    return _result(np.stack([r.data for r in rows]), tuple(rows), vjp, "stack_rows")


def row_mean(x: Tensor) -> Tensor:
    """Mean over rows: [n×d] -> [d]."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"row_mean expects a matrix, got shape {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise EmptyInputError("row_mean of a matrix with no rows")

    def vjp(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)
    return _result(x.data.mean(axis=0), (x,), vjp, "row_mean")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.size == 0:
        raise EmptyInputError("mean of an empty tensor")
    n = x.size
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two [n×d] matrices -> [n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"cosine_rows: shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    if (na < NORM_FLOOR).any() or (nb < NORM_FLOOR).any():
        bad = int(np.argmax((na < NORM_FLOOR) | (nb < NORM_FLOOR)))
        raise DegenerateInputError(f"cosine_rows: row {bad} has near-zero norm")
    dots = (a.data * b.data).sum(axis=1)
    out = dots / (na * nb)

    def vjp(g):
        g = g[:, None]
        c = out[:, None]
        ga = g * (b.data / (na * nb)[:, None] - c * a.data / (na ** 2)[:, None])
        gb = g * (a.data / (na * nb)[:, None] - c * b.data / (nb ** 2)[:, None])
        return ga, gb
    return _result(out, (a, b), vjp, "cosine_rows")


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()
