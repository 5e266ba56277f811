"""Small reverse-mode autodiff engine over numpy arrays.

Each op computes its forward value eagerly and records a closure that maps the
output gradient to input gradients. ``backward`` walks the recorded graph in
reverse topological order. Storage defaults to float32; gradient checks run the
same graph in float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result(a.data * a.data.dtype.type(c), (a,), bw, "scale")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)

    return _result(y, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    x = a.data

    def bw(g):
        return (g / x,)

    return _result(np.log(x), (a,), bw, "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    f = x.dtype.type
    c, k = f(_GELU_C), f(0.044715)
    x2 = x * x
    t = x2 * (c * k)
    t += c
    t *= x
    np.tanh(t, out=t)
    y = t + f(1)
    y *= x
    y *= f(0.5)

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        d = x2 * (3 * k)
        d += f(1)
        d *= c
        d *= x
        s = t * t
        np.subtract(f(1), s, out=s)
        d *= s
        d += t
        d += f(1)
        d *= f(0.5)
        d *= g
        return (d,)

    return _result(y, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(src),)

    return _result(y, (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), bw, "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {a.shape[ax]}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(_slice(a, tuple(idx)))
        start += n
    return out


def _slice(a: Tensor, index: tuple) -> Tensor:
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), bw, "slice")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather distinct ``indices`` along ``axis``; gradient scatters back."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.ndim
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        sl = [slice(None)] * len(src_shape)
        sl[ax] = idx
        full[tuple(sl)] = g
        return (full,)

    return _result(np.take(a.data, idx, axis=ax), (a,), bw, "take")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(y), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match,
    or ``b`` may be a plain 2-d matrix shared across the batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one large GEMM instead of a stack of small ones
        a2 = ad.reshape(-1, ad.shape[-1])
        y = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        y = ad @ bd

    def bw(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(y, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("log_softmax: empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply gain and bias."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _result(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"loss_ce: logits must be (batch, classes), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"loss_ce: expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"loss_ce: label out of range [0, {c})")
    lp = log_softmax(logits, axis=-1)
    picked = lp.data[np.arange(n), labels]

    def bw(g):
        full = np.zeros_like(lp.data)
        full[np.arange(n), labels] = -g / n
        return (full,)

    return _result(np.asarray(-picked.mean()), (lp,), bw, "ce")


def loss_soft_ce(logits: Tensor, target_probs) -> Tensor:
    """Mean cross entropy of softmax(logits) against a fixed target distribution."""
    p = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs)
    if p.shape != logits.shape or logits.ndim != 2:
        raise ShapeError(f"loss_soft_ce: shapes {p.shape} vs {logits.shape}")
    n = logits.shape[0]
    lp = log_softmax(logits, axis=-1)
    p = p.astype(lp.dtype, copy=False)

    def bw(g):
        return (-g * p / n,)

    return _result(np.asarray(-(p * lp.data).sum() / n), (lp,), bw, "soft_ce")


def loss_mse(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"loss_mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = g * 2.0 * diff / n if a.requires_grad else None
        gb = -g * 2.0 * diff / n if b.requires_grad else None
        return ga, gb

    return _result(np.asarray((diff * diff).mean()), (a, b), bw, "mse")


KL_EPS = 1e-9


def loss_kl(p_dist, q_dist: Tensor, row_weight=None, tol: float = 1e-5) -> Tensor:
    """Mean over rows of sum p * (log p - log q), with q clamped at 1e-9.

    ``p_dist`` is the target side and never receives gradient. ``row_weight``
    optionally weights rows (e.g. to drop padded query positions) and the mean
    becomes a weighted mean.
    """
    p = np.asarray(p_dist.data if isinstance(p_dist, Tensor) else p_dist)
    q = q_dist.data
    if p.shape != q.shape:
        raise ShapeError(f"loss_kl: shapes differ, {p.shape} vs {q.shape}")
    for side, arr in (("p", p), ("q", q)):
        rows = arr.sum(axis=-1)
        if not np.all(np.abs(rows - 1.0) <= tol):
            raise ValueError(f"loss_kl: rows of {side} are not normalized within {tol}")
    p = p.astype(q.dtype, copy=False)
    rows_shape = p.shape[:-1]
    w = np.ones(rows_shape, dtype=q.dtype) if row_weight is None else np.broadcast_to(
        np.asarray(row_weight, dtype=q.dtype), rows_shape)
    total_w = w.sum()
    qc = np.maximum(q, q.dtype.type(KL_EPS))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0)
    per_row = (plogp - p * np.log(qc)).sum(axis=-1)
    value = (per_row * w).sum() / total_w

    def bw(g):
        gq = -p / qc * (q > KL_EPS)
        return (g * gq * (w / total_w)[..., None],)

    return _result(np.asarray(value), (q_dist,), bw, "kl")


# ---------------------------------------------------------------------------
# backward and gradient checking
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def check_gradients(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare autodiff gradients of ``fn()`` against central differences.

    Parameters are cast to float64 for the duration of the check. Relative
    error per entry is ``|a - f| / max(|a|, |f|, 1e-8)``. With ``max_entries``
    only a random subset of each parameter's entries is probed.
    """
    params = list(params)
    saved = [(p.data, p.grad) for p in params]
    rng = np.random.default_rng(seed)
    per_param = []
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = fn()
        backward(loss)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        with no_grad():
            for p, ga in zip(params, analytic):
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                err = 0.0
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + step
                    up = float(fn().data)
                    flat[i] = orig - step
                    down = float(fn().data)
                    flat[i] = orig
                    fd = (up - down) / (2 * step)
                    a = float(ga.reshape(-1)[i])
                    denom = max(abs(a), abs(fd), 1e-8)
                    rel = abs(a - fd) / denom
                    if not math.isfinite(rel):
                        rel = math.inf
                    err = max(err, rel)
                per_param.append({"name": p.name, "shape": p.shape, "max_rel_err": err,
                                  "checked": int(len(idx))})
                worst = max(worst, err)
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad
    return {"max_rel_err": worst, "params": per_param}
