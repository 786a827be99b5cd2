"""
Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 unless the caller builds float64
tensors, which the gradient checker does).  Every primitive below records
itself on the active :class:`Tape` when at least one input requires a
gradient; outside a ``with Tape():`` block nothing is recorded, which is the
evaluation path.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptySelectionError, NonFiniteError

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> list:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so the list is already a topological
    order of the graph; :meth:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn: Callable):
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None):
        backward(loss, self, grad)


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording inside the block (evaluation snapshots)."""

    def __enter__(self):
        self._saved = _TAPES[:]
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def _record(inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape, grad: Optional[np.ndarray] = None):
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaves are tensors that require a gradient but were not produced by a
    recorded op.  Their gradients are added to any existing ``.grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")

    grads = {id(loss): grad}
    produced = set()
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    leaves = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.dtype)
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str):
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what}: non-finite values in input")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record((a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record((a, b), out, bw)


def neg(a: Tensor) -> Tensor:
    return _record((a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _record((a,), a.data * s, lambda g: (g * s,))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record((a,), out, bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _record((a,), out, bw)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; backward scatters additively."""
    out = np.array(a.data[index])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record((a,), out, bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(tuple(tensors), out, bw)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, ad.shape)
        if gb is not None:
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record((a, b), out, bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` with ``x`` of any rank >= 1."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


# ---------------------------------------------------------------- nonlinear


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with the biased variance, then scale and shift."""
    H = x.shape[-1]
    if gamma.shape != (H,) or beta.shape != (H,):
        raise DimensionError(f"layer_norm: last extent {H} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record((x, gamma, beta), out, bw)


def softmax_last(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = keep) treats excluded entries as
    minus infinity: they get exactly zero probability.
    """
    xd = x.data
    _check_finite(xd, "softmax_last")
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record((x,), y, bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    t = np.tanh(c * (xd + k * xd * xd * xd))
    out = 0.5 * xd * (1 + t)

    def bw(g):
        d = 0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * c * (1 + 3 * k * xd * xd)
        return (g * d,)

    return _record((x,), out, bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _record((x,), x.data * keep, lambda g: (g * keep,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; ``ids`` may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size:
        bad = np.flatnonzero((ids.reshape(-1) < 0) | (ids.reshape(-1) >= V))
        if bad.size:
            pos = np.unravel_index(bad[0], ids.shape)
            raise IndexError(f"token id {ids[pos]} at position {tuple(int(p) for p in pos)} "
                             f"outside vocabulary of size {V}")
    out = table.data[ids]
    if ids.size == 0:
        out = out.reshape(ids.shape + (table.shape[1],))

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record((table,), out, bw)


# ------------------------------------------------------------------- losses


def cross_entropy_masked(logits: Tensor, targets, select) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over rows where ``select``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_masked expects [N, V] logits, got {logits.shape}")
    N, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    select = np.asarray(select, dtype=bool).reshape(-1)
    if targets.shape != (N,) or select.shape != (N,):
        raise DimensionError(f"targets/select must have length {N}")
    rows = np.flatnonzero(select)
    if rows.size == 0:
        raise EmptySelectionError("cross_entropy_masked: no selected positions")
    t = targets[rows]
    if (t < 0).any() or (t >= V).any():
        raise IndexError(f"target id outside [0, {V})")
    xd = logits.data[rows]
    _check_finite(xd, "cross_entropy_masked")
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z[np.arange(rows.size), t] - np.log(s[:, 0])
    n = rows.size
    out = np.asarray(-logp.sum() / n, dtype=logits.dtype)

    def bw(g):
        p = e / s
        p[np.arange(n), t] -= 1
        full = np.zeros((N, V), dtype=logits.dtype)
        full[rows] = p * (g / n)
        return (full,)

    return _record((logits,), out, bw)


def bce_with_logits_masked(logits: Tensor, targets, select) -> Tensor:
    """Mean binary cross-entropy over entries where ``select`` is true."""
    targets = np.broadcast_to(np.asarray(targets, dtype=logits.dtype), logits.shape)
    select = np.broadcast_to(np.asarray(select, dtype=bool), logits.shape)
    n = int(select.sum())
    if n == 0:
        raise EmptySelectionError("bce_with_logits_masked: no selected entries")
    xd = logits.data
    # log(1 + exp(-|x|)) + max(x, 0) - x*y
    per = np.logaddexp(0, -np.abs(xd)) + np.maximum(xd, 0) - xd * targets
    out = np.asarray(np.where(select, per, 0).sum() / n, dtype=logits.dtype)

    def bw(g):
        sig = 0.5 * (1 + np.tanh(0.5 * xd))
        return (np.where(select, sig - targets, 0).astype(logits.dtype) * (g / n),)

    return _record((logits,), out, bw)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _record((pred,), out, lambda g: (diff * (2 * g / n),))


# ------------------------------------------------------------ grad checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Largest per-coordinate relative error between tape and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic.  The
    relative error of a coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            x_hi = float(flat[i])
            hi = float(f(x).data)
            flat[i] = orig - eps
            x_lo = float(flat[i])
            lo = float(f(x).data)
            flat[i] = orig
            # the representable step, not the nominal one
            numeric[i] = (hi - lo) / (x_hi - x_lo)
    a = analytic.reshape(-1).astype(np.float64)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
