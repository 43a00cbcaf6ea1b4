"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array. Every differentiable op returns a new
tensor that remembers its parents and a closure mapping the upstream gradient
to one gradient per parent. :meth:`Tensor.backward` walks the recorded graph
in reverse topological order, visiting each node once.

Ops accept arbitrary leading axes (``[..., T, d]``) so a batch of equal-length
sequences can share one graph; broadcasting is limited to what bias vectors
and per-row statistics need.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``grad`` defaults to ones, which for a scalar output is the usual seed.
        """
        if grad is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.array(grad, dtype=DTYPE)
            if seed.shape != self.shape:
                raise DimensionError(f"seed gradient shape {seed.shape} != output shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self):
        return sum_(self)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    x = a.data

    def backward(g):
        return (g * p * x ** (p - 1.0),)

    return _make(x**p, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


# activations --------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    # subgradient at exactly 0 is 0
    return _make(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def backward(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _make(x * s, (a,), backward, "swish")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


# reductions ---------------------------------------------------------------

def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    x = a.data
    y = x.mean(axis=axis, keepdims=keepdims)
    n = x.size // max(np.asarray(y).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(np.asarray(y, dtype=DTYPE), (a,), backward, "mean")


def var(a: Tensor, axis=-1, keepdims=True) -> Tensor:
    """Population (biased) variance along ``axis``."""
    x = a.data
    centered = x - x.mean(axis=axis, keepdims=True)
    y = (centered**2).mean(axis=axis, keepdims=keepdims)
    n = x.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (2.0 / n) * centered,)

    return _make(y, (a,), backward, "var")


# linear algebra and shape ops --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (or a batched ``b[..., k, n]``)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} disagree") from None
    A, B = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return _unbroadcast(ga, A.shape), gb

    return _make(A @ B, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(y, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _make(y, tensors, backward, "concat")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def slice_(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx], dtype=DTYPE), (a,), backward, "slice")


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel convolution along the time axis with symmetric zero padding.

    ``x`` is ``[..., T, d]``, ``kernel`` is ``[k, d]`` with ``k`` odd. Output
    frame ``t`` is ``sum_j kernel[j] * x[t + j - (k - 1) / 2]``.
    """
    k, d = kernel.shape
    if k % 2 == 0:
        raise DimensionError(f"depthwise_conv1d: kernel length {k} must be odd")
    if x.shape[-1] != d:
        raise DimensionError(f"depthwise_conv1d: input {x.shape} vs kernel {kernel.shape}")
    T = x.shape[-2]
    half = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    W = kernel.data
    y = np.zeros(x.shape, dtype=DTYPE)
    for j in range(k):
        y += xp[..., j : j + T, :] * W[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(W)
        for j in range(k):
            gxp[..., j : j + T, :] += g * W[j]
            gw[j] = (xp[..., j : j + T, :] * g).reshape(-1, d).sum(axis=0)
        return gxp[..., half : half + T, :], gw

    return _make(y, (x, kernel), backward, "depthwise_conv1d")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    flat = logp.reshape(-1, logp.shape[-1])
    lab = labels.reshape(-1)
    n = lab.size
    loss = -flat[np.arange(n), lab].sum() / n

    def backward(g):
        p = np.exp(flat)
        p[np.arange(n), lab] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


# finite-difference oracle -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: tuple[str, tuple[int, ...]] | None
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates with a (near-)zero true gradient from dividing
    round-off noise by zero.
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise NumericError(f"grad_check: parameter {name!r} holds non-finite values")
        p.requires_grad = True
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError(f"grad_check: non-finite function value at the base point "
                           f"(parameters: {', '.join(params)})")
    out.backward()

    report = GradCheckReport(max_rel_error=0.0, tol=tol, worst=None)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if not np.isfinite(analytic).all():
            raise NumericError(f"grad_check: non-finite analytic gradient for {name!r}")
        worst_here = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                hi = float(f().data)
                flat[i] = orig - step
                lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"grad_check: non-finite value perturbing {name!r}[{i}]")
            numeric = (hi - lo) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst_here:
                worst_here = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (name, tuple(int(v) for v in np.unravel_index(i, p.shape)))
        report.per_param[name] = worst_here
    return report
