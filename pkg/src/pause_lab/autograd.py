"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the graph in reverse topological order,
visiting each node once. Only leaves accumulate into ``.grad``; calling
``backward`` twice on the same graph doubles the leaf gradients.

Precision and gradient recording are thread-local switches, so a graph is
confined to the thread that built it.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class DegenerateMaskError(ValueError):
    """A softmax row has no allowed entry."""


class RankError(ValueError):
    """backward() was called on a non-scalar root."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf appeared in a forward value or a gradient."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


_DTYPES = {"float32": np.float32, "float64": np.float64, 32: np.float32, 64: np.float64}


class _State(threading.local):
    def __init__(self) -> None:
        self.dtype = np.float32
        self.grad_enabled = True
        self.check_finite = True


_state = _State()


def get_dtype() -> type:
    return _state.dtype


def set_precision(precision: str | int) -> None:
    """Switch the default float type for new tensors ("float32"/"float64" or 32/64)."""
    try:
        _state.dtype = _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


@contextlib.contextmanager
def precision(value: str | int) -> Iterator[None]:
    old = _state.dtype
    set_precision(value)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    old = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = old


def _diagnose(arr: np.ndarray) -> dict:
    bad = ~np.isfinite(arr)
    first = np.argwhere(bad)[0].tolist() if bad.any() else None
    return {
        "shape": arr.shape,
        "n_nan": int(np.isnan(arr).sum()),
        "n_inf": int(np.isinf(arr).sum()),
        "first_bad_index": first,
    }


def _check(arr: np.ndarray, what: str) -> None:
    if _state.check_finite and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}", _diagnose(arr))


class Tensor:
    """A dense array that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _state.dtype
        self.data = np.array(data, dtype=dtype)
        _check(self.data, "tensor construction")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
        _check(data, f"forward of {op}")
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        out.grad = None
        if _state.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out.parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _state.dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b), b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray


@dataclass
class ComputeGraph:
    """Topologically ordered view of the graph feeding a root tensor."""

    tensors: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> ComputeGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        index = {id(t): i for i, t in enumerate(self.tensors)}
        return [
            Node(t.op, tuple(index[id(p)] for p in t.parents if id(p) in index), t.data)
            for t in self.tensors
        ]

    def __len__(self) -> int:
        return len(self.tensors)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf with requires_grad."""
    if root.data.size != 1 or root.ndim > 1:
        raise RankError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    graph = ComputeGraph.trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            _check(g, "gradient")
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        for p, pg in zip(t.parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            _check(pg, f"backward of {t.op}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), "add", back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), "mul", back)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), "neg", lambda g: (-g,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor._from_op(np.swapaxes(a.data, i, j), (a,), "swapaxes", lambda g: (np.swapaxes(g, i, j),))


def take(a: Tensor, index) -> Tensor:
    """Gather along axis 0: ``a.data[index]``. Backward scatters with accumulation."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"take index out of range for axis of length {a.shape[0]}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(a.data[index], (a,), "take", back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._from_op(ad @ bd, (a, b), "matmul", back)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (a,), "gelu", back)


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return Tensor._from_op(np.where(on, a.data, 0).astype(a.data.dtype), (a,), "relu", lambda g: (g * on,))


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, True = allowed) zeroes entries exactly."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise DimensionError(f"mask shape {mask.shape} does not fit scores {z.shape}") from None
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("softmax row has no allowed entry")
        z = np.where(full, z, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), "softmax", back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / population variance 1, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), "layer_norm", back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Sum over rows of -log softmax(logits[i])[targets[i]]; logits is (N, V)."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects (N, V) logits")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    loss = (lse[:, 0] - z[rows, targets]).sum()

    def back(g):
        p = np.exp(z - lse)
        p[rows, targets] -= 1.0
        return (p * g,)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), "cross_entropy", back)


def cross_entropy_logits(logits: Tensor, target: int) -> Tensor:
    """Single-distribution cross entropy, logits of shape (V,)."""
    if logits.ndim != 1:
        raise DimensionError("cross_entropy_logits expects a vector of logits")
    return cross_entropy(reshape(logits, (1, logits.shape[0])), [target])


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: tuple[str, tuple[int, ...]] | None
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    grads: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``grads`` overrides the analytic side (used to confirm that a corrupted
    gradient is caught). Relative error uses max(|a|, |n|, 1e-8) as denominator.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.data.dtype}")
    if grads is None:
        zero_grad(params.values())
        backward(f())
        grads = {name: p.grad.copy() for name, p in params.items()}

    worst, worst_at, count = 0.0, None, 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            analytic = np.asarray(grads[name]).reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(analytic[i])
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                count += 1
                if rel > worst:
                    worst, worst_at = rel, (name, np.unravel_index(i, p.shape))
    if worst_at is not None:
        worst_at = (worst_at[0], tuple(int(i) for i in worst_at[1]))
    return GradCheckReport(worst, worst_at, tol, count)
