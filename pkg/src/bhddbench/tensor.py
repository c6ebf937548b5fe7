"""Dense NumPy tensors with define-by-run reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` whose ``_parents`` and
``_backward`` closure describe how to push an upstream gradient back to its
inputs.  :func:`backward` orders the reachable graph topologically (the
:class:`Tape`) and visits each node once.

Broadcasting is restricted to scalars and trailing-dimension expansion, e.g.
``(B, n) + (n,)``.  Anything richer raises :class:`ShapeError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradientError",
    "tensor",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "grad",
    "build_tape",
    "matmul",
    "concat",
    "stack",
    "where",
    "finite_diff_gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GradientError(RuntimeError):
    """Backward was asked for something it cannot differentiate."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0 or int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if len(b) == 0 or int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shape mismatch: {a} vs {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing broadcast)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """n-dimensional real array with an optional gradient.

    ``data`` is a NumPy array (row-major).  ``grad`` is populated on leaf
    tensors with ``requires_grad=True`` by :func:`backward` and accumulates
    across calls until reset with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        out = Tensor(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
            out.op = op
        else:
            out.op = op
        return out

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, like=self)
        _broadcast_shape(self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, like=self)
        _broadcast_shape(self.shape, other.shape)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), bw, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, like=self) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, like=self)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        need_a, need_b = self.requires_grad, other.requires_grad

        def bw(g):
            return (
                _unbroadcast(g * b, a.shape) if need_a else None,
                _unbroadcast(g * a, b.shape) if need_b else None,
            )

        return Tensor._make(a * b, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, like=self)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data

        need_b = other.requires_grad

        def bw(g):
            gb = _unbroadcast(-g * a / (b * b), b.shape) if need_b else None
            return _unbroadcast(g / b, a.shape), gb

        return Tensor._make(a / b, (self, other), bw, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, like=self) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data

        def bw(g):
            return (g * p * a ** (p - 1),)

        return Tensor._make(a**p, (self,), bw, "pow")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- elementwise functions -------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),), "relu")

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.logaddexp(0, a)
        return Tensor._make(out, (self,), lambda g: (g * _sigmoid(a),), "softplus")

    def silu(self) -> "Tensor":
        a = self.data
        s = _sigmoid(a)

        def bw(g):
            return (g * (s * (1.0 + a * (1.0 - s))),)

        return Tensor._make(a * s, (self,), bw, "silu")

    def gelu(self) -> "Tensor":
        # tanh approximation
        a = self.data
        c = np.sqrt(2.0 / np.pi)
        ac = np.clip(a, -20.0, 20.0)  # tanh is saturated beyond this; avoids cube overflow
        inner = c * (ac + 0.044715 * ac**3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * ac * ac)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

        return Tensor._make(out.astype(a.dtype, copy=False), (self,), bw, "gelu")

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis: int = -1) -> "Tensor":
        a = self.data
        m = a.max(axis=axis, keepdims=True)
        e = np.exp(a - m)
        s = e.sum(axis=axis, keepdims=True)
        out = (np.log(s) + m).squeeze(axis)

        def bw(g):
            return (np.expand_dims(g, axis) * (e / s),)

        return Tensor._make(out, (self,), bw, "logsumexp")

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self.data
        e = np.exp(a - a.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), bw, "softmax")

    # -- shape manipulation ----------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def flatten(self, start: int = 1) -> "Tensor":
        return self.reshape(self.shape[:start] + (-1,))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, idx) -> "Tensor":
        src_shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(src_shape, dtype=dtype)
            if _needs_add_at(idx):
                np.add.at(full, idx, g)
            else:
                full[idx] = g
            return (full,)

        return Tensor._make(self.data[idx], (self,), bw, "getitem")


def _needs_add_at(idx) -> bool:
    """Fancy indexing may repeat positions; basic slicing never does."""
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split branches keep exp from overflowing
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` either matches them or is a
    plain 2-D matrix shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError(f"matmul cannot broadcast left operand {a.shape} against {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ np.swapaxes(B, -1, -2) if need_a else None
        gb = None
        if need_b:
            if B.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return Tensor._make(A @ B, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; the mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)

    return Tensor._make(np.where(mask, a.data, b.data), (a, b), bw, "where")


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    Parents always precede children in ``nodes``; the backward sweep walks
    the list in reverse and touches each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def build_tape(root: Tensor) -> Tape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return Tape(order)


def _run_backward(root: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    tape = build_tape(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return leaves, tape


def _check_root(loss: Tensor) -> None:
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from every tensor that requires grad")


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every reachable leaf.

    Returns the leaf-gradient map keyed by ``id(leaf)``.
    """
    _check_root(loss)
    seed = np.ones(loss.shape, dtype=loss.dtype)
    leaves, tape = _run_backward(loss, seed)
    for node in tape.nodes:
        if node._backward is None and id(node) in leaves:
            g = leaves[id(node)].reshape(node.shape)
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
    return leaves


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs unreachable from the loss get zero gradients.
    """
    _check_root(loss)
    seed = np.ones(loss.shape, dtype=loss.dtype)
    leaves, _ = _run_backward(loss, seed)
    out = []
    for t in inputs:
        g = leaves.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape))
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_gradcheck(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
    max_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative gap between autodiff and central differences.

    ``f`` is re-evaluated after perturbing each probed coordinate in place;
    it must be deterministic.  The discrepancy per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.  When
    ``max_probes`` is set only that many coordinates per parameter are
    probed, chosen by ``rng``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    loss = f()
    analytic = grad(loss, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite objective while probing coordinate {i}")
                num = (fp - fm) / (2 * eps)
                gap = abs(ga[i] - num) / max(1.0, abs(ga[i]), abs(num))
                worst = max(worst, gap)
    return worst
