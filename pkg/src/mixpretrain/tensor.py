"""Dense float tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 for training, float64 for verification).
Operations record themselves on the active :class:`Tape` in execution order,
which is a valid topological order, so the backward pass is a single reverse
sweep. Gradients accumulate additively across fan-out.

Broadcasting is deliberately restricted: a binary operand may be a scalar or
may match the trailing axes of the other operand exactly. Anything else must
be aligned with explicit ``reshape``/``broadcast_to``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "softmax",
    "layernorm",
    "reshape",
    "transpose",
    "gather",
    "where",
    "broadcast_to",
    "concat",
    "tsum",
    "tmean",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: nested recording or repeated backward."""


class Tensor:
    """A dense n-dimensional float value, optionally tracked for gradients.

    ``data`` is row-major float32 or float64. ``grad`` is populated (same
    shape and dtype as ``data``) only after a backward pass that reaches this
    tensor, and only when ``requires_grad`` is set.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar for readable model code; scalars go through scale/add.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

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


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


_ACTIVE: "Tape | None" = None


class Tape:
    """Recording of primitive operations for one forward pass.

    Nodes are appended in execution order, so parents always precede their
    consumers. A tape supports exactly one backward pass, after which its
    recording is freed.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise TapeError("a tape is already recording")
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Propagate gradients from ``root`` back to all tracked leaves.

        Seeds with ones, so a scalar ``root`` yields plain derivatives.
        Leaf tensors with ``requires_grad`` receive ``.grad``; everything
        else is transient. The recording is freed afterwards.
        """
        if self._used:
            raise TapeError("tape already consumed by a backward pass")
        self._used = True
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        if root.requires_grad and id(root) not in self._tracked:
            root.grad = grads[id(root)]
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                elif parent.requires_grad and id(parent) not in self._tracked:
                    # Leaf parameter: accumulate straight into .grad.
                    if parent.grad is None:
                        parent.grad = np.array(pg, copy=True)
                    else:
                        parent.grad += pg
                else:
                    grads[key] = pg
        # Tracked intermediates that were also marked requires_grad get their
        # accumulated gradient; mostly used by grad_check on expressions.
        for node in self._nodes:
            for parent in node.parents:
                if parent.requires_grad and id(parent) in grads:
                    pg = grads.pop(id(parent))
                    if parent.grad is None:
                        parent.grad = pg
                    else:
                        parent.grad += pg
        self._nodes.clear()
        self._tracked.clear()


def _record(out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _ACTIVE
    if tape is not None and not tape._used:
        if any(p.requires_grad or id(p) in tape._tracked for p in parents):
            tape._nodes.append(_Node(out, parents, backward))
            tape._tracked.add(id(out))
    return out


# ---------------------------------------------------------------------------
# Broadcast bookkeeping (scalar or exact trailing-axis alignment only).


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if small == big[len(big) - len(small):]:
        return True
    return int(np.prod(small, dtype=np.int64)) == 1


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return g.sum().reshape(shape)
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))).reshape(shape)


def _binary(a: Tensor, b: Tensor, fwd, da, db, name: str) -> Tensor:
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not scalar- or trailing-broadcastable")
    out = Tensor(fwd(a.data, b.data))

    def backward(g):
        return _reduce_to(da(g), a.shape), _reduce_to(db(g), b.shape)

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Elementwise suite.


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary(a, b, np.multiply, lambda g: g * bd, lambda g: g * ad, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * s,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    out = Tensor(np.log(x))
    return _record(out, (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (0.5 / y),))


# ---------------------------------------------------------------------------
# Linear algebra.


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Supports plain 2-d operands, a stacked left operand against a 2-d weight,
    and stacked operands with identical leading axes.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree between {a.shape} and {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading extents disagree between {a.shape} and {b.shape}")
    out = Tensor(np.matmul(ad, bd))

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        if bd.ndim == 2:
            gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            gb = np.matmul(ad.swapaxes(-1, -2), g)
        return ga, gb

    return _record(out, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layernorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match normalized width {width}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = Tensor(xh * gamma.data + beta.data)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xh).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxh = g * gamma.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Data movement.


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Take rows of ``a`` along axis 0; backward scatters with accumulation."""
    idx = np.asarray(index)
    if idx.ndim != 1:
        raise ShapeError(f"gather: index map must be 1-d, got shape {idx.shape}")
    n = a.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise IndexError(f"gather: index {int(idx[bad][0])} out of bounds for extent {n}")
    out = Tensor(a.data[idx])
    src_shape = a.shape

    def backward(g):
        z = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), backward)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; cond is a constant bool array."""
    if a.shape != b.shape:
        raise ShapeError(f"where: branch shapes {a.shape} and {b.shape} differ")
    c = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(c, a.data, b.data))

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return np.where(c, g, zero), np.where(c, zero, g)

    return _record(out, (a, b), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if a.shape != shape[len(shape) - a.ndim:]:
        raise ShapeError(f"broadcast_to: {a.shape} does not trail-align with {shape}")
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    src = a.shape
    return _record(out, (a,), lambda g: (_reduce_to(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis))
    sizes = [t.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# Reductions.


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    src_shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src_shape).copy(),)

    return _record(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# Verification oracle.


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Promotes ``x`` to float64, evaluates ``f`` once under a fresh tape for the
    analytic gradient, then probes every element with central differences.
    ``f`` must be scalar-valued and must not depend on the active tape.
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x64)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    tape.backward(y)
    analytic = x64.grad
    if analytic is None:
        analytic = np.zeros_like(x64.data)

    flat = x64.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x64.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(x64.data)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)

    diff = np.abs(analytic.reshape(-1) - numeric)
    denom = np.maximum(1e-8, np.abs(numeric))
    return float((diff / denom).max())
