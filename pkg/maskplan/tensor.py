"""
Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op builds a new Tensor that remembers its parents and a backward rule
mapping the output gradient to one gradient per parent. ``backward(loss)``
walks the graph in reverse topological order and accumulates into the
``grad`` of leaf tensors that require gradients. ``stop_gradient`` returns a
detached copy, so nothing upstream of it is reached.
"""

import contextlib
import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .models import EngineError

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (inference, rollouts). Per-thread."""
    previous = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise EngineError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    if shape not in (a.shape, b.shape):
        raise EngineError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return shape


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- forward ops -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise EngineError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise EngineError(f"transpose: expected a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise EngineError("log: non-positive input")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _node(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise EngineError(f"layer_norm: input {x.shape} with gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


def softmax_array(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    s = softmax_array(x.data)
    return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    out = log_softmax_array(x.data)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if table.data.ndim != 2:
        raise EngineError(f"embedding_lookup: table must be a matrix, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise EngineError(f"embedding_lookup: ids outside [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), backward)


def index_select(x: Tensor, rows) -> Tensor:
    """Select rows (first axis)."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise EngineError(f"index_select: rows outside [0, {x.shape[0]})")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return _node(x.data[rows], (x,), backward)


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather x[rows[i], cols[i]] into a vector."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    if x.data.ndim != 2 or rows.shape != cols.shape:
        raise EngineError(f"pick: matrix expected with matching index vectors, got {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _node(x.data[rows, cols], (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _node(x.data[:, start:stop].copy(), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise EngineError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise EngineError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tensors, backward)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors."""
    terms = list(terms)
    if not terms:
        raise EngineError("add_n: nothing to add")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


def reduce_sum(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),))


def reduce_mean(x: Tensor) -> Tensor:
    n = max(x.data.size, 1)
    return _node(np.array(x.data.mean() if x.data.size else 0.0), (x,),
                 lambda g: (np.full_like(x.data, float(g) / n),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise EngineError(f"minimum: incompatible shapes {a.shape} and {b.shape}")
    take_a = a.data <= b.data
    return _node(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a))


def cross_entropy_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Sum over rows of weights[i] * (logsumexp(logits[i]) - logits[i, targets[i]])."""
    if logits.data.ndim == 1:
        logits = _node(logits.data.reshape(1, -1), (logits,), lambda g: (g.reshape(-1),))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise EngineError(f"cross_entropy: {n} rows of logits but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise EngineError(f"cross_entropy: target ids outside [0, {v})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise EngineError(f"cross_entropy: {n} rows of logits but {w.shape[0]} weights")
    logp = log_softmax_array(logits.data)
    rows = np.arange(n)
    loss = -(w * logp[rows, targets]).sum()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * w[:, None] * float(g),)

    return _node(np.array(loss), (logits,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical tensor that contributes nothing to ancestors of x."""
    return Tensor(x.data.copy())


# --- backward --------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires a gradient."""
    if loss.data.size != 1:
        raise EngineError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- optimizer -------------------------------------------------------------

class ParameterLabel(str, Enum):
    SHARED = "shared"
    GENERATION_EXPERT = "generation_expert"
    REFINEMENT_EXPERT = "refinement_expert"


@dataclass
class ParameterPartition:
    """Total, disjoint labeling of parameter names."""
    labels: Dict[str, ParameterLabel]

    def names(self, label: ParameterLabel) -> List[str]:
        return [name for name, lab in self.labels.items() if lab == label]

    def counts(self) -> Dict[ParameterLabel, int]:
        return {label: len(self.names(label)) for label in ParameterLabel}


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    sgd: bool = False


class AdamW:
    """Decoupled-weight-decay Adam with per-parameter step counters."""

    def __init__(self, hyper: AdamWConfig = None):
        self.hyper = hyper or AdamWConfig()
        self.state: Dict[str, Dict[str, object]] = {}

    def optimizer_step(self, params: Dict[str, Tensor], partition: ParameterPartition,
                       active_labels: Iterable[ParameterLabel], lr: float) -> int:
        """Update parameters whose label is active, then clear every gradient. Returns the update count."""
        active = set(active_labels)
        selected = [name for name in params if partition.labels.get(name) in active]
        for name in selected:
            if params[name].grad is None:
                raise EngineError(f"optimizer_step: missing gradient for active parameter {name}")
        h = self.hyper
        for name in selected:
            p = params[name]
            g = p.grad
            if h.sgd:
                p.data -= lr * g
                continue
            st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "step": 0})
            st["step"] += 1
            st["m"] = h.beta1 * st["m"] + (1.0 - h.beta1) * g
            st["v"] = h.beta2 * st["v"] + (1.0 - h.beta2) * g * g
            m_hat = st["m"] / (1.0 - h.beta1 ** st["step"])
            v_hat = st["v"] / (1.0 - h.beta2 ** st["step"])
            if h.weight_decay:
                p.data *= 1.0 - lr * h.weight_decay
            p.data -= lr * m_hat / (np.sqrt(v_hat) + h.eps)
        for p in params.values():
            p.grad = None
        return len(selected)


def zero_grads(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
