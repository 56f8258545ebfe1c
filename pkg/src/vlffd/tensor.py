"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a local gradient rule on the output tensor;
:func:`backward` topologically sorts the recorded graph and walks it once in
reverse. Broadcasting is deliberately limited to adding a row-vector bias to
the last axis; matmul additionally accepts a shared 2-D right operand against
a batched left operand (a weight applied to every row of every sample).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, NumericDomainError, ShapeError

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (inference, frozen feature extraction)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def assign(self, values) -> None:
        """Replace the values in place; the shape may not change."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"cannot assign {arr.shape} into tensor of shape {self.shape}")
        self.data = arr

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, (int, float)) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], rule) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _result(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _result(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return add(b, a)
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        b = float(b)
        return _result(a.data * b, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _result(a.data * m, (a,), lambda g: (g * m,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, which keeps gradient checks clean."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), rule)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across every leading batch index of ``a``) or has
    exactly the same leading batch dimensions as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def rule(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

    elif b.shape[:-2] == a.shape[:-2]:

        def rule(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    return _result(ad @ bd, (a, b), rule)


def swap_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(src),))


# -- reductions and structure ------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out, dtype=np.float64), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max over ``axis``; ties split the gradient evenly."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    top = a.data.max(axis=axes, keepdims=True)
    hit = (a.data == top).astype(np.float64)
    hit /= hit.sum(axis=axes, keepdims=True)
    out = top if keepdims else top.squeeze(axis=axes)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * hit,)

    return _result(np.asarray(out, dtype=np.float64), (a,), rule)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis and repeat ``n`` times along it (explicit, not implicit broadcast)."""
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _result(data, (a,), lambda g: (g.sum(axis=axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, rule)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with accumulation."""
    src = a.shape
    data = np.array(a.data[index], dtype=np.float64)
    if data.ndim == 0:
        data = data.reshape(())

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in idx)

    def rule(g):
        out = np.zeros(src)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(data, (a,), rule)


def pad_hw(a: Tensor, p: int) -> Tensor:
    """Zero-pad axes 1 and 2 of a (B, H, W, C) tensor by ``p`` on each side."""
    if a.ndim != 4:
        raise ShapeError(f"pad_hw expects (B, H, W, C), got {a.shape}")
    if p == 0:
        return a
    data = np.pad(a.data, ((0, 0), (p, p), (p, p), (0, 0)))
    return _result(data, (a,), lambda g: (g[:, p:-p, p:-p, :],))


def patches(a: Tensor, k: int, stride: int) -> Tensor:
    """Sliding k x k windows of a (B, H, W, C) tensor -> (B, Ho, Wo, k*k*C).

    Window contents are flattened in (row, column, channel) order.
    """
    if a.ndim != 4:
        raise ShapeError(f"patches expects (B, H, W, C), got {a.shape}")
    B, H, W, C = a.shape
    if H < k or W < k or (H - k) % stride or (W - k) % stride:
        raise ShapeError(f"window {k} / stride {stride} does not tile a {H}x{W} input")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    x = a.data
    cols = np.empty((B, Ho, Wo, k, k, C))
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = x[:, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride, :]

    def rule(g):
        g = g.reshape(B, Ho, Wo, k, k, C)
        out = np.zeros((B, H, W, C))
        for ky in range(k):
            for kx in range(k):
                out[:, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride, :] += g[:, :, :, ky, kx, :]
        return (out,)

    return _result(cols.reshape(B, Ho, Wo, k * k * C), (a,), rule)


# -- normalisation and losses -----------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what} received NaN or Inf input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite(x, "softmax")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor with per-row max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    _check_finite(x, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _result(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over masked rows.

    ``logits`` may carry any leading shape; the class axis is last.
    """
    C = logits.shape[-1]
    x = logits.data.reshape(-1, C)
    _check_finite(x, "cross_entropy")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {x.shape[0]} logit rows")
    m = np.ones(t.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    count = int(m.sum())
    if count == 0:
        raise ContractError("cross_entropy mask selects no positions")
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.nonzero(m)[0]
    loss = -logp[rows, t[rows]].sum() / count
    src = logits.shape

    def rule(g):
        grad = np.exp(logp)
        grad[np.arange(len(t)), t] -= 1.0
        grad *= m[:, None] / count
        return ((grad * g).reshape(src),)

    return _result(np.asarray(loss), (logits,), rule)


# -- backward --------------------------------------------------------------------------


class Graph:
    """Operation records reachable from an output, in topological order.

    ``nodes`` lists every tensor that requires grad such that each tensor appears
    after all of its parents.
    """

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate additively, both across fan-out inside one graph and
    into leaves that already hold a gradient from a previous call.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = Graph(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=np.float64)
    return graph


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    Per coordinate the error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not (0 < eps <= 1e-2):
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    base = x.data.copy()

    def evaluate(values: np.ndarray) -> float:
        return f(Tensor(values)).item()

    first, second = evaluate(base), evaluate(base)
    if first != second:
        raise DeterminismError(f"f returned {first!r} then {second!r} for identical input")

    probe = Tensor(base, requires_grad=True)
    backward(f(probe))
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.reshape(-1)

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        num = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * eps)
        a = analytic[i]
        err = abs(a - num) / max(1e-8, abs(a) + abs(num))
        worst = max(worst, err)
    return worst
