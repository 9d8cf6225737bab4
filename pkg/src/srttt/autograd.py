"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every primitive builds its output ``Tensor`` together with a closure that
pushes the output gradient back to its inputs. The tape is implicit in the
parent links and is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
DEBUG = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name: str, arr: np.ndarray):
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {name}")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, bwd) -> Tensor:
    _check_finite(op, data)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), op=op)
    if track:
        out._backward = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    try:
        np.broadcast_shapes(a, b)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    """Elementwise product (row/column broadcasting allowed)."""
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), "scale", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims must match exactly (or be absent on ``b``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
            b._accum(gb)

    return _make(a.data @ b.data, (a, b), "matmul", bwd)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    orig = a.shape

    def bwd(g):
        a._accum(g.reshape(orig))

    return _make(out, (a,), "reshape", bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bwd)


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing (slice primitive)."""

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(np.array(a.data[idx]), (a,), "index", bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = [t.shape for t in tensors]
    ax = axis % tensors[0].ndim
    for s in shapes[1:]:
        if len(s) != len(shapes[0]) or any(x != y for i, (x, y) in enumerate(zip(s, shapes[0])) if i != ax):
            raise ShapeError(f"concat: shapes {shapes[0]} and {s} do not conform on axis {axis}")
    bounds = np.cumsum([0] + [s[ax] for s in shapes])

    def bwd(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), "sum", bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        a._accum(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean()), (a,), "mean", bwd)


def sq_l2(a: Tensor) -> Tensor:
    """Squared L2 norm of all entries."""

    def bwd(g):
        a._accum(2.0 * g * a.data)

    return _make(np.asarray(np.sum(a.data * a.data)), (a,), "sq_l2", bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a._accum(g * out)

    return _make(out, (a,), "exp", bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, (a,), "tanh", bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(0.5 * x * (1.0 + t), (a,), "gelu", bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with unit gradient strictly inside (lo, hi) and zero outside."""
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        a._accum(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), "clamp", bwd)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean) excludes entries; a row with no allowed
    entry yields all zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bwd(g):
        a._accum(out * (g - np.sum(g * out, axis=-1, keepdims=True)))

    return _make(out, (a,), "softmax", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: x {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bwd(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            x._accum(
                rstd
                * (gh - gh.mean(axis=-1, keepdims=True) - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
            )

    return _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", bwd)


def l2_normalize(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each last-axis vector to unit length."""
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True) + eps)
    out = a.data / n

    def bwd(g):
        a._accum((g - out * np.sum(g * out, axis=-1, keepdims=True)) / n)

    return _make(out, (a,), "l2_normalize", bwd)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)

    return _make(table.data[ids], (table,), "embedding", bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy of ``logits`` (n, vocab) against int targets (n,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    logp = x - lse
    n = len(targets)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accum(g * p / n)

    return _make(np.asarray(loss), (logits,), "cross_entropy", bwd)


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is not attached to any graph that requires grad")
    order = _toposort(loss)
    interior = [n for n in order if n._backward is not None]
    for n in interior:
        n.grad = None
    loss._accum(np.ones_like(loss.data))
    for n in reversed(interior):
        if n.grad is not None:
            n._backward(n.grad)
    for n in interior:
        n.grad = None


# ---------------------------------------------------------------- grad check


def grad_check(fn: Callable[[Tensor], Tensor], point, tol: float = 1e-4, h: float = 1e-6) -> dict:
    """Compare analytic gradients of scalar ``fn`` at ``point`` with central differences.

    Relative error per entry is ``|a - n| / max(1, |a|, |n|)`` so that near-zero
    gradients are judged absolutely. Non-smooth points (``|x|`` at 0, clamp
    boundaries) are outside the contract.
    """
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: fn must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += h
            xm = x0.copy().reshape(-1)
            xm[i] -= h
            fp = fn(Tensor(xp.reshape(x0.shape))).item()
            fm = fn(Tensor(xm.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return {"max_rel_error": err, "passed": err < tol, "analytic": analytic, "numeric": numeric}


# ---------------------------------------------------------------- serialization

# record: u32 ndim | u64 dims[ndim] | f64 payload (all little-endian)


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(as_tensor(t).data, dtype="<f8", order="C")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one record starting at ``offset``; returns (tensor, next offset)."""
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if offset + 8 * n > len(buf):
        raise ValueError("truncated tensor record")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
    return Tensor(arr), offset + 8 * n


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
