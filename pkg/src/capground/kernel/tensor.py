"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every op returns a new node holding its value,
its parents, and a closure that routes the output gradient to the parents.
`backward` runs the closures in reverse topological order.  Every op
checks its result for NaN/Inf and raises NumericalError, so a diverging
computation fails at the op that produced it.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, NumericalError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction; ops return constant tensors."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(arr: np.ndarray) -> None:
    # sum() propagates NaN and saturates on Inf, so one reduction suffices
    if arr.size and not np.isfinite(arr.sum()):
        raise NumericalError("tensor contains NaN or Inf")


class Tensor:
    """A float64 array plus its place in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if type(data) is np.ndarray and data.dtype == np.float64:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data, parents, backward_fn) -> Tensor:
    """Build an op result; constant subgraphs collapse to plain tensors."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _acc_own(t: "Tensor", g: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient the target may take over."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_shared(t: "Tensor", g: np.ndarray) -> None:
    """Accumulate a gradient view/alias that must not be adopted in place."""
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradient accumulators of every reachable node are reset first, so each
    sweep starts fresh; nodes left at None received zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _acc_shared(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc_shared(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc_own(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    """(m,k)@(k,n) or batched (B,m,k)@(k,n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim not in (2, 3):
        raise ShapeError(f"matmul supports 2D/3D @ 2D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, g @ b.data.T)
        if b.requires_grad:
            k = a.shape[-1]
            n = g.shape[-1]
            _acc_own(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _node(out_data, (a, b), backward_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t.requires_grad:
                _acc_shared(t, piece)

    return _node(out_data, tuple(tensors), backward_fn)


def narrow(a, start: int, size: int) -> Tensor:
    """Contiguous slice along the last axis."""
    a = as_tensor(a)
    if start < 0 or start + size > a.shape[-1]:
        raise ShapeError(f"narrow [{start}:{start + size}] outside last dim {a.shape[-1]}")
    out_data = np.ascontiguousarray(a.data[..., start : start + size])

    def backward_fn(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[..., start : start + size] += g

    return _node(out_data, (a,), backward_fn)


def row_block(a, start: int, size: int) -> Tensor:
    """Slice along axis 0 (a view; row ranges stay C-contiguous)."""
    a = as_tensor(a)
    if start < 0 or start + size > a.shape[0]:
        raise ShapeError(f"row_block [{start}:{start + size}] outside axis 0 of {a.shape}")
    if start == 0 and size == a.shape[0]:
        return a

    def backward_fn(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[start : start + size] += g

    return _node(a.data[start : start + size], (a,), backward_fn)


def first_rows(a, count: int) -> Tensor:
    """Leading slice along axis 0."""
    return row_block(a, 0, count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            _acc_shared(a, g.reshape(a.shape))

    return _node(out_data, (a,), backward_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, g * (out_data * (1.0 - out_data)))

    return _node(out_data, (a,), backward_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, g * (a.data > 0.0))

    return _node(out_data, (a,), backward_fn)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out positions get probability 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            inner = (g * probs).sum(axis=-1, keepdims=True)
            _acc_own(a, probs * (g - inner))

    return _node(probs, (a,), backward_fn)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V,e), integer ids of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {table.shape[0]} rows")
    out_data = table.data[ids]

    def backward_fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _node(out_data, (table,), backward_fn)


def dropout(a, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted-scaling dropout; identity when eval or rate == 0."""
    if not (0.0 <= rate < 1.0):
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if not train or rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out_data = a.data * mask

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, g * mask)

    return _node(out_data, (a,), backward_fn)


def cross_entropy_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Per-example negative log-likelihood; logits (B,V), targets (B,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy expects (B,V) logits and (B,) targets, got {logits.shape}, {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError("target id out of range")
    rows = np.arange(logits.shape[0])
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    out_data = -log_probs[rows, targets]

    def backward_fn(g):
        if logits.requires_grad:
            d = np.exp(log_probs)
            d[rows, targets] -= 1.0
            _acc_own(logits, d * g[:, None])

    return _node(out_data, (logits,), backward_fn)


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def backward_fn(g):
        if a.requires_grad:
            _acc_shared(a, np.broadcast_to(g, a.shape))

    return _node(out_data, (a,), backward_fn)


def mean(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.asarray(a.data.mean())
    scale = 1.0 / a.size

    def backward_fn(g):
        if a.requires_grad:
            _acc_shared(a, np.broadcast_to(g * scale, a.shape))

    return _node(out_data, (a,), backward_fn)


def inner_last(a, v) -> Tensor:
    """Contract the last axis with a vector: (...,A) . (A,) -> (...)."""
    a, v = as_tensor(a), as_tensor(v)
    if v.data.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ShapeError(f"inner_last dims differ: {a.shape} . {v.shape}")
    out_data = a.data @ v.data

    def backward_fn(g):
        if a.requires_grad:
            _acc_own(a, g[..., None] * v.data)
        if v.requires_grad:
            _acc_own(v, (g[..., None] * a.data).reshape(-1, v.shape[0]).sum(axis=0))

    return _node(out_data, (a, v), backward_fn)


def weighted_sum(weights, values) -> Tensor:
    """Convex combination of key vectors: (B,n) x (B,n,d) -> (B,d)."""
    weights, values = as_tensor(weights), as_tensor(values)
    if weights.data.ndim != 2 or values.data.ndim != 3 or weights.shape != values.shape[:2]:
        raise ShapeError(f"weighted_sum shapes differ: {weights.shape} x {values.shape}")
    out_data = np.einsum("bn,bnd->bd", weights.data, values.data)

    def backward_fn(g):
        if weights.requires_grad:
            _acc_own(weights, np.einsum("bd,bnd->bn", g, values.data))
        if values.requires_grad:
            _acc_own(values, weights.data[:, :, None] * g[:, None, :])

    return _node(out_data, (weights, values), backward_fn)
