"""Reverse-mode automatic differentiation over dense float64 arrays.

A thin tape: each operation produces a `Tensor` that remembers its input
tensors and a closure mapping the output gradient to input gradients.
`Tensor.backward()` walks the tape in reverse topological order
(iteratively — graphs from 120-step recurrences would blow Python's
recursion limit).  The op set is fixed: exactly what the two sequence
models need.  Every op eagerly validates its output for NaN/Inf so a
numerical blow-up surfaces at the op that produced it.

All data is float64.  Tensors are immutable by convention: nothing in
this module writes to `Tensor.data` after construction.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GradkitError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "no_grad",
    "matmul",
    "sigmoid",
    "tanh",
    "softmax",
    "power",
    "concat",
    "finite_diff_check",
]


class GradkitError(Exception):
    """Base class for autodiff failures."""


class NonFiniteError(GradkitError):
    """An op produced NaN or Inf (numeric failure, e.g. divergence)."""


class ShapeError(GradkitError):
    """Operands have incompatible shapes."""


_grad_enabled: bool = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (pure forward evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus its place on the backward tape."""

    __slots__ = ("data", "grad", "op", "_inputs", "_backward", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        _ensure_finite(self.data, "leaf")
        self.grad: np.ndarray | None = None
        self.op: str = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.requires_grad = bool(requires_grad)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    @property
    def _on_tape(self) -> bool:
        return self.requires_grad or self._backward is not None

    # -- backward pass ---------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into `.grad` of every tape node.

        The root must be scalar-valued.  Grads of all nodes reachable from
        the root are reset first, so repeated calls do not accumulate across
        invocations (within one call, fan-out accumulates as it must).
        """
        if self.size != 1:
            raise GradkitError(f"backward root must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __abs__(self):
        return absolute(self)

    # -- reductions / views as methods ------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_asarray(x))


def _result(
    data: np.ndarray,
    op: str,
    inputs: tuple[Tensor, ...],
    make_backward: Callable[[Tensor], Callable[[np.ndarray], None]] | None,
) -> Tensor:
    _ensure_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = False
    if _grad_enabled and make_backward is not None and any(t._on_tape for t in inputs):
        out._inputs = inputs
        out._backward = make_backward(out)
    else:
        out._inputs = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        c = float(b)

        def make(out):
            def bw(g):
                _accumulate(a, _unbroadcast(g, a.shape))

            return bw

        return _result(a.data + c, "add", (a,), make)
    a, b = _wrap(a), _wrap(b)

    def make(out):
        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))

        return bw

    return _result(a.data + b.data, "add", (a, b), make)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -float(b))
    a, b = _wrap(a), _wrap(b)

    def make(out):
        def bw(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))

        return bw

    return _result(a.data - b.data, "sub", (a, b), make)


def neg(a) -> Tensor:
    a = _wrap(a)

    def make(out):
        def bw(g):
            _accumulate(a, -g)

        return bw

    return _result(-a.data, "neg", (a,), make)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        c = float(b)

        def make(out):
            def bw(g):
                _accumulate(a, _unbroadcast(g * c, a.shape))

            return bw

        return _result(a.data * c, "mul", (a,), make)
    a, b = _wrap(a), _wrap(b)

    def make(out):
        ad, bd = a.data, b.data

        def bw(g):
            _accumulate(a, _unbroadcast(g * bd, a.shape))
            _accumulate(b, _unbroadcast(g * ad, b.shape))

        return bw

    return _result(a.data * b.data, "mul", (a, b), make)


def power(a, exponent) -> Tensor:
    """Elementwise a**p for a constant real exponent p."""
    a = _wrap(a)
    p = float(exponent)

    def make(out):
        ad = a.data

        def bw(g):
            _accumulate(a, g * p * ad ** (p - 1.0))

        return bw

    with np.errstate(all="ignore"):  # NaN/Inf surface via the eager check
        data = a.data**p
    return _result(data, "power", (a,), make)


def absolute(a) -> Tensor:
    a = _wrap(a)

    def make(out):
        sign = np.sign(a.data)  # subgradient 0 at ties

        def bw(g):
            _accumulate(a, g * sign)

        return bw

    return _result(np.abs(a.data), "abs", (a,), make)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def make(out):
        ad, bd = a.data, b.data

        def bw(g):
            _accumulate(a, _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape))
            _accumulate(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape))

        return bw

    return _result(a.data @ b.data, "matmul", (a, b), make)


# -- nonlinearities -----------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def make(out):
        def bw(g):
            _accumulate(a, g * s * (1.0 - s))

        return bw

    return _result(s, "sigmoid", (a,), make)


def tanh(a) -> Tensor:
    a = _wrap(a)
    t = np.tanh(a.data)

    def make(out):
        def bw(g):
            _accumulate(a, g * (1.0 - t * t))

        return bw

    return _result(t, "tanh", (a,), make)


def softmax(a, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    With ``causal=True`` the last two axes are treated as (query, key)
    positions of equal length and entries with key > query receive exactly
    zero weight: the mask is applied as -inf *before* the exp, inside this
    op, so masked weights are bit-exact zeros and gradients never leak
    through them.
    """
    a = _wrap(a)
    x = a.data
    if causal:
        tq, tk = x.shape[-2], x.shape[-1]
        if tq != tk:
            raise ShapeError(f"causal softmax needs square last axes, got {x.shape}")
        keep = np.tril(np.ones((tq, tk), dtype=bool))
        x = np.where(keep, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def make(out):
        def bw(g):
            inner = (w * g).sum(axis=-1, keepdims=True)
            _accumulate(a, w * (g - inner))

        return bw

    return _result(w, "softmax", (a,), make)


# -- shape ops ----------------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = tuple(_wrap(t) for t in tensors)
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)

    def make(out):
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(idx)])

        return bw

    return _result(data, "concat", parts, make)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; gradient scatters back.

    Advanced integer-array indexing is not supported (the models never
    need it, and `out[idx] += g` would silently drop duplicate hits).
    """
    a = _wrap(a)
    if isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, (np.ndarray, list)) for i in idx)
    ):
        raise ShapeError("getitem supports basic indexing only")
    data = a.data[idx]

    def make(out):
        def bw(g):
            full = np.zeros_like(a.data)
            full[idx] += g
            _accumulate(a, full)

        return bw

    return _result(np.ascontiguousarray(data), "slice", (a,), make)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def make(out):
        def bw(g):
            _accumulate(a, g.reshape(a.shape))

        return bw

    return _result(a.data.reshape(shape), "reshape", (a,), make)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)

    def make(out):
        inverse = tuple(np.argsort(axes))

        def bw(g):
            _accumulate(a, g.transpose(inverse))

        return bw

    return _result(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), make)


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def make(out):
        def bw(g):
            _accumulate(a, _expand_reduced(g, a.shape, axis, keepdims).copy())

        return bw

    return _result(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), make)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def make(out):
        def bw(g):
            _accumulate(a, _expand_reduced(g, a.shape, axis, keepdims) / count)

        return bw

    return _result(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), make)


# -- gradient checking --------------------------------------------------------

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  Returns
    ``max_i |analytic_i - fd_i| / max(|analytic_i|, 1e-12)``.
    """
    x = _asarray(x).copy()
    leaf = Tensor(x, requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.size != 1:
        raise GradkitError("finite_diff_check needs a scalar-valued function")
    out.backward()
    analytic = (
        np.zeros_like(x) if leaf.grad is None else np.asarray(leaf.grad, dtype=np.float64)
    ).reshape(-1)

    flat = x.reshape(-1)
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(x)).item()
            flat[i] = orig - step
            lo = f(Tensor(x)).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.abs(analytic), 1e-12)
    return float(np.max(np.abs(analytic - fd) / denom)) if flat.size else 0.0


def grad_of(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Analytic gradient of a scalar function at x (convenience for tests)."""
    leaf = Tensor(_asarray(x).copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise GradkitError("grad_of needs a scalar-valued function")
    out.backward()
    return np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad


def numeric_grad(f: Callable[[Tensor], Tensor], x, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function at x."""
    x = _asarray(x).copy()
    flat = x.reshape(-1)
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(x)).item()
            flat[i] = orig - step
            lo = f(Tensor(x)).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * step)
    return fd.reshape(x.shape)
