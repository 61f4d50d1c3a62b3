"""Dense tensors with reverse-mode differentiation over numpy.

Every array an op keeps for its backward rule goes through a
:class:`SavedBufferStore`, which counts bytes.  Saved buffers are released
as soon as the node that owns them has run its backward rule, so
``store.peak_bytes`` is the activation high-water mark of a training step.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StaleGraphError(RuntimeError):
    """A graph was traversed again after its saved buffers were released."""


@dataclass
class SavedEntry:
    tag: str
    array: Optional[np.ndarray]
    byte_count: int
    refs: int = 1
    tags: list = field(default_factory=list)


class ParamRef:
    """Reference to a parameter kept for backward; parameters are not activations."""

    __slots__ = ("array",)

    def __init__(self, array):
        self.array = array

    def release(self):
        self.array = None


class SavedHandle:
    """Reference held by a graph node to one saved buffer."""

    __slots__ = ("store", "key")

    def __init__(self, store, key):
        self.store = store
        self.key = key

    @property
    def array(self):
        entry = self.store._entries.get(self.key)
        if entry is None or entry.array is None:
            raise StaleGraphError("saved buffer already released")
        return entry.array

    def release(self):
        self.store._release(self.key)


def _buffer_key(arr):
    ptr = arr.__array_interface__["data"][0]
    return (ptr, arr.shape, arr.strides, arr.dtype.str)


class SavedBufferStore:
    """Byte-accounted store of tensors saved for backward.

    The same buffer saved by several ops (same data pointer, shape and
    strides) is stored once and reference counted, the way a framework
    keeps one copy of an input shared by the q, k and v projections.
    """

    def __init__(self):
        self._entries = {}
        self.current_bytes = 0
        self.peak_bytes = 0

    def save(self, tag, arr):
        key = _buffer_key(arr)
        entry = self._entries.get(key)
        if entry is not None:
            entry.refs += 1
            entry.tags.append(tag)
            return SavedHandle(self, key)
        nbytes = int(arr.size) * arr.dtype.itemsize
        self._entries[key] = SavedEntry(tag, arr, nbytes, 1, [tag])
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        return SavedHandle(self, key)

    def _release(self, key):
        entry = self._entries.get(key)
        if entry is None:
            return
        entry.refs -= 1
        if entry.refs == 0:
            entry.array = None
            self.current_bytes -= entry.byte_count
            del self._entries[key]

    def entries(self):
        return list(self._entries.values())

    def bytes_by_tag(self):
        """Live bytes keyed by the tag of the first saver."""
        out = {}
        for e in self._entries.values():
            out[e.tag] = out.get(e.tag, 0) + e.byte_count
        return out

    def reset_peak(self):
        self.peak_bytes = self.current_bytes

    def clear(self):
        for e in self._entries.values():
            e.array = None
        self._entries.clear()
        self.current_bytes = 0
        self.peak_bytes = 0


_store = SavedBufferStore()
_grad_enabled = True


def get_store():
    return _store


@contextlib.contextmanager
def use_store(store):
    global _store
    prev, _store = _store, store
    try:
        yield store
    finally:
        _store = prev


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Node:
    """One recorded op: parent tensors, saved handles and the backward rule."""

    __slots__ = ("op", "parents", "saved", "backward_fn", "consumed")

    def __init__(self, op, parents, saved, backward_fn):
        self.op = op
        self.parents = parents
        self.saved = saved
        self.backward_fn = backward_fn
        self.consumed = False

    def release(self):
        for h in self.saved:
            h.release()
        self.saved = ()
        self.backward_fn = None
        self.consumed = True


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            # python scalars and integer arrays are promoted; other float widths are refused
            if arr.dtype.kind not in "biu":
                raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtype(*ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"dtype mismatch: {dt} vs {t.dtype}")


def _needs_grad(*ts):
    return _grad_enabled and any(t.requires_grad for t in ts)


def _make(op, out, parents, saved, backward_fn):
    """Wrap ``out`` and record a node if any parent needs a gradient."""
    t = Tensor(out, dtype=out.dtype)
    if _needs_grad(*parents):
        t.requires_grad = True
        t.node = Node(op, tuple(parents), tuple(saved), backward_fn)
    return t


def _save(tag, arr):
    return _store.save(tag, arr)


def _save_t(tag, t):
    if t.requires_grad and t.node is None:
        return ParamRef(t.data)
    return _store.save(tag, t.data)


def _broadcast_check(a_shape, b_shape):
    if a_shape == b_shape:
        return
    for small, big in ((b_shape, a_shape), (a_shape, b_shape)):
        if len(small) == 0 or int(np.prod(small)) == 1:
            return
        if len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small):
            return
    raise DimensionError(f"cannot broadcast shapes {a_shape} and {b_shape}")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def matmul(a, b, tag="matmul"):
    """Matrix product over the last two axes; leading (batch) axes must match."""
    _check_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    need = _needs_grad(a, b)
    ha = _save_t(tag + ".a", a) if need and b.requires_grad else None
    hb = _save_t(tag + ".b", b) if need and a.requires_grad else None
    saved = [h for h in (ha, hb) if h is not None]

    def backward(g):
        ga = g @ np.swapaxes(hb.array, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ha.array, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), saved, backward)


def add(a, b):
    b = _wrap(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", out, (a, b), (), backward)


def sub(a, b):
    b = _wrap(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make("sub", out, (a, b), (), backward)


def mul(a, b, tag="mul"):
    b = _wrap(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data * b.data
    need = _needs_grad(a, b)
    ha = _save_t(tag + ".a", a) if need and b.requires_grad else None
    hb = _save_t(tag + ".b", b) if need and a.requires_grad else None
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(g * hb.array, sa) if a.requires_grad else None
        gb = _unbroadcast(g * ha.array, sb) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), [h for h in (ha, hb) if h is not None], backward)


def div(a, b, tag="div"):
    b = _wrap(b, a)
    _check_dtype(a, b)
    _broadcast_check(a.shape, b.shape)
    out = a.data / b.data
    need = _needs_grad(a, b)
    ha = _save_t(tag + ".a", a) if need and b.requires_grad else None
    hb = _save_t(tag + ".b", b) if need else None
    sa, sb = a.shape, b.shape

    def backward(g):
        bd = hb.array
        ga = _unbroadcast(g / bd, sa) if a.requires_grad else None
        gb = _unbroadcast(-g * ha.array / (bd * bd), sb) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), [h for h in (ha, hb) if h is not None], backward)


def scale(x, c):
    c = float(c)
    out = x.data * x.dtype.type(c)

    def backward(g):
        return (g * g.dtype.type(c),)

    return _make("scale", out, (x,), (), backward)


def square(x, tag="square"):
    out = x.data * x.data
    h = _save_t(tag, x) if _needs_grad(x) else None

    def backward(g):
        return (2 * g * h.array,)

    return _make("square", out, (x,), [h] if h else [], backward)


def sqrt(x, tag="sqrt"):
    out = np.sqrt(x.data)
    h = _save(tag, out) if _needs_grad(x) else None

    def backward(g):
        return (g / (2 * h.array),)

    return _make("sqrt", out, (x,), [h] if h else [], backward)


def _sigmoid(x):
    # tanh form: no overflow for large |x|
    half = x.dtype.type(0.5)
    return half * (1 + np.tanh(half * x))


def silu(x, tag="silu"):
    s = _sigmoid(x.data)
    out = x.data * s
    h = _save_t(tag, x) if _needs_grad(x) else None

    def backward(g):
        xd = h.array
        sd = _sigmoid(xd)
        return (g * (sd * (1 + xd * (1 - sd))),)

    return _make("silu", out, (x,), [h] if h else [], backward)


def softmax_lastdim(x, tag="softmax"):
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a nonempty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    h = _save(tag, out) if _needs_grad(x) else None

    def backward(g):
        y = h.array
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), [h] if h else [], backward)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is True by a constant (no gradient flows there)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.dtype.type(value), x.data)

    def backward(g):
        return (np.where(mask, 0, g).astype(g.dtype, copy=False),)

    return _make("masked_fill", out, (x,), (), backward)


def sum_all(x):
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (x,), (), backward)


def mean_all(x):
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    shape, n = x.shape, x.data.size

    def backward(g):
        return (np.full(shape, g / n, dtype=g.dtype),)

    return _make("mean", out, (x,), (), backward)


def reshape(x, shape):
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return _make("reshape", out, (x,), (), backward)


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make("transpose", out, (x,), (), backward)


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def rmsnorm(x, gain, eps, tag="rmsnorm"):
    """x / sqrt(mean(x^2) + eps) * gain; saves x and the per-token inverse rms."""
    _check_dtype(x, gain)
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm gain {gain.shape} does not match {x.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1) + xd.dtype.type(eps))
    inv = inv.astype(xd.dtype, copy=False)
    out = (xd * inv[..., None]) * gain.data
    need = _needs_grad(x, gain)
    saved = [_save_t(tag + ".x", x), _save(tag + ".inv_rms", inv)] if need else []

    def backward(g):
        xs, inv_s = saved[0].array, saved[1].array
        xhat = xs * inv_s[..., None]
        g_gain = (g * xhat).reshape(-1, xs.shape[-1]).sum(axis=0) if gain.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_s[..., None] * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain

    return _make("rmsnorm", out, (x, gain), saved, backward)


def embedding(weight, ids, tag="embedding"):
    """Row lookup ``weight[ids]``; ``ids`` is an integer array, not a Tensor."""
    ids = np.asarray(ids)
    out = weight.data[ids]
    h = _save(tag + ".ids", ids) if _needs_grad(weight) else None
    vshape = weight.shape

    def backward(g):
        gw = np.zeros(vshape, dtype=g.dtype)
        np.add.at(gw, h.array.reshape(-1), g.reshape(-1, vshape[1]))
        return (gw,)

    return _make("embedding", out, (weight,), [h] if h else [], backward)


def cross_entropy(logits, targets, tag="cross_entropy"):
    """Mean token cross-entropy of (N, V) logits against (N,) integer targets."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {logits.shape[0]} rows")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = np.asarray((lse - z[rows, targets]).mean(), dtype=logits.dtype)
    need = _needs_grad(logits)
    saved = []
    if need:
        probs = np.exp(z - lse[:, None]).astype(logits.dtype, copy=False)
        saved = [_save(tag + ".probs", probs), _save(tag + ".targets", targets)]

    def backward(g):
        p = saved[0].array.copy()
        t = saved[1].array
        p[np.arange(p.shape[0]), t] -= 1
        return (p * (g / p.shape[0]),)

    return _make("cross_entropy", loss, (logits,), saved, backward)


def custom(op, out, parents, saved, backward_fn):
    """Record a node built outside this module (e.g. the compressed linear layer)."""
    return _make(op, out, parents, saved, backward_fn)


def save_for_backward(tag, arr):
    return _save(tag, arr)


def save_tensor_for_backward(tag, t):
    return _save_t(tag, t)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if grad is None else grad
            return
        raise StaleGraphError("loss has no graph (already consumed or built under no_grad)")
    if loss.node.consumed:
        raise StaleGraphError("graph already consumed by a previous backward()")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)}
    for t in reversed(order):
        node = t.node
        g = grads.pop(id(t), None)
        if node.consumed:
            raise StaleGraphError(f"node {node.op} already consumed")
        if g is None:
            node.release()
            if t is not loss:
                t.node = None
            continue
        parent_grads = node.backward_fn(g)
        node.release()
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                p.grad = pg.astype(p.dtype, copy=False) if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        node.parents = ()
        if t is not loss:
            t.node = None
    # the loss keeps its released node so a second backward() is detected


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every element of ``x``."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base.copy(), dtype=x.dtype)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base.copy(), dtype=x.dtype)).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def parameters_grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h=1e-5):
    """Worst relative error of autodiff vs central differences over ``params``."""
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad
        base = p.data.copy()
        numeric = np.zeros_like(base, dtype=np.float64)
        flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
        p.data[...] = base
        worst = max(worst, relative_error(analytic, numeric))
    return worst
