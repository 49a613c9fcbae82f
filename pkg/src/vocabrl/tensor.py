"""Dense arrays with reverse-mode gradients.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation that
touches a tensor with ``requires_grad`` appends a node to the active
:class:`ComputeGraph`; :meth:`Tensor.backward` walks that tape in exact
reverse order, accumulates gradients into the leaves and then frees the tape.

Live array memory is accounted by :data:`tracker` so that training loops can
report high-water marks for activations and for all tensor storage.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ComputeGraph", "NumericalError", "MemoryTracker", "SparseRows",
    "tracker", "no_grad", "is_grad_enabled", "get_graph", "use_graph",
    "set_default_dtype", "get_default_dtype", "default_dtype", "custom_op",
    "matmul", "linear", "softmax", "log_softmax", "sigmoid", "tanh", "log",
    "exp", "sqrt", "concat", "stack", "take_rows", "pick", "clip",
    "gradient_check",
]


class NumericalError(FloatingPointError):
    """A NaN or Inf showed up in a forward value or a gradient."""


_state = threading.local()
_DEFAULT_DTYPE = [np.float32]


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = old


# ---------------------------------------------------------------------------
# memory accounting


class MemoryTracker:
    """Counts bytes of live numpy buffers owned by tensors.

    Buffers are attributed once, to their owning base array, and released by a
    weakref finalizer.  ``kind`` is one of ``param``, ``data``, ``grad`` or
    ``activation``; the activation counter covers op outputs and the
    transient gradients of intermediate values.
    """

    def __init__(self):
        self._ids: dict[int, tuple[int, bool]] = {}
        self.live = 0
        self.peak = 0
        self.live_activation = 0
        self.peak_activation = 0
        self._scopes: list[list[int]] = []
        self.enabled = True

    def track(self, arr: np.ndarray, kind: str) -> None:
        if not self.enabled:
            return
        base = arr
        while isinstance(base.base, np.ndarray):
            base = base.base
        key = id(base)
        if key in self._ids:
            return
        nbytes = base.nbytes
        act = kind == "activation"
        self._ids[key] = (nbytes, act)
        try:
            weakref.finalize(base, self._release, key)
        except TypeError:
            del self._ids[key]
            return
        self.live += nbytes
        if act:
            self.live_activation += nbytes
        if self.live > self.peak:
            self.peak = self.live
        if self.live_activation > self.peak_activation:
            self.peak_activation = self.live_activation
        for scope in self._scopes:
            if self.live > scope[0]:
                scope[0] = self.live
            if self.live_activation > scope[1]:
                scope[1] = self.live_activation

    def _release(self, key: int) -> None:
        entry = self._ids.pop(key, None)
        if entry is None:
            return
        nbytes, act = entry
        self.live -= nbytes
        if act:
            self.live_activation -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live
        self.peak_activation = self.live_activation

    @contextlib.contextmanager
    def scope(self):
        """Yield a dict that receives the high-water marks seen inside the block."""
        rec = [self.live, self.live_activation]
        self._scopes.append(rec)
        out = {"peak_bytes": 0, "peak_activation_bytes": 0,
               "start_bytes": self.live, "start_activation_bytes": self.live_activation}
        try:
            yield out
        finally:
            self._scopes.remove(rec)
            out["peak_bytes"] = rec[0]
            out["peak_activation_bytes"] = rec[1]


tracker = MemoryTracker()


# ---------------------------------------------------------------------------
# graph


class ComputeGraph:
    """Ordered tape of differentiable operations."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        self.nodes.append((out, inputs, backward))

    def __len__(self):
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []

    def backward(self, root: "Tensor", grad=None, free: bool = True) -> None:
        if grad is None:
            if root.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(root.data)
        root_was_leaf = root.is_leaf
        if getattr(_state, "check_finite", True) and not np.isfinite(root.data).all():
            self.reset()
            raise NumericalError("non-finite value at the start of backward")
        _accumulate(root, np.asarray(grad, dtype=root.data.dtype))
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                _accumulate(inp, gi)
                if inp.is_leaf:
                    leaves[id(inp)] = inp
            if not out.is_leaf:
                out.grad = None
        if getattr(_state, "check_finite", True):
            for leaf in leaves.values():
                if not np.isfinite(leaf.grad).all():
                    self.reset()
                    raise NumericalError(
                        f"non-finite gradient for leaf {leaf.name or leaf.shape}")
        if not root_was_leaf:
            root.grad = None
        if free:
            self.reset()


def get_graph() -> ComputeGraph:
    g = getattr(_state, "graph", None)
    if g is None:
        g = _state.graph = ComputeGraph()
    return g


@contextlib.contextmanager
def use_graph(graph: ComputeGraph):
    old = getattr(_state, "graph", None)
    _state.graph = graph
    try:
        yield graph
    finally:
        _state.graph = old


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class SparseRows:
    """Row-sparse gradient: ``values[i]`` is added to row ``rows[i]``."""

    __slots__ = ("rows", "values", "shape")

    def __init__(self, rows: np.ndarray, values: np.ndarray, shape):
        self.rows = rows
        self.values = values
        self.shape = shape

    def add_into(self, dense: np.ndarray) -> None:
        rows = self.rows
        vals = self.values
        if rows.size == 0:
            return
        order = np.argsort(rows, kind="stable")
        srows = rows[order]
        starts = np.flatnonzero(np.r_[True, srows[1:] != srows[:-1]])
        summed = np.add.reduceat(vals[order], starts, axis=0)
        dense[srows[starts]] += summed

    def to_dense(self, dtype) -> np.ndarray:
        out = np.zeros(self.shape, dtype=dtype)
        self.add_into(out)
        return out


def _accumulate(t: "Tensor", g) -> None:
    if isinstance(g, SparseRows):
        if t.grad is None:
            t.grad = g.to_dense(t.data.dtype)
            tracker.track(t.grad, "grad" if t.is_leaf else "activation")
        else:
            if not t._grad_owned:
                t.grad = np.array(t.grad, copy=True)
                tracker.track(t.grad, "grad" if t.is_leaf else "activation")
            g.add_into(t.grad)
        t._grad_owned = True
        return
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        if t.is_leaf:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            t._grad_owned = True
            tracker.track(t.grad, "grad")
        else:
            t.grad = g
            t._grad_owned = False
            tracker.track(g, "activation")
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True
        tracker.track(t.grad, "grad" if t.is_leaf else "activation")


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name", "_grad_owned",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _kind: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                arr = data
            else:
                arr = np.asarray(data, dtype=get_default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name
        self._grad_owned = False
        tracker.track(arr, _kind or ("param" if requires_grad else "data"))

    # -- basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, _kind="activation")

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self, grad=None, free: bool = True) -> None:
        get_graph().backward(self, grad, free=free)

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- methods mirroring the free functions
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else get_default_dtype()))


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if getattr(_state, "check_finite", True) and not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {opname}")


@contextlib.contextmanager
def finite_checks(enabled: bool):
    old = getattr(_state, "check_finite", True)
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = old


def custom_op(out_data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of an op over ``inputs``.

    ``backward(g)`` must return one gradient (or ``None``) per input; a
    :class:`SparseRows` is accepted for row-gathered inputs.
    """
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._grad_owned = False
    needs = is_grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.is_leaf = not needs
    tracker.track(out_data, "activation")
    if needs:
        get_graph().record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    _check_finite(out, "div")

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p
    _check_finite(out, "power")
    return custom_op(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return custom_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _check_finite(out, "exp")
    return custom_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise ValueError("log of a nonpositive value")
    return custom_op(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if (xd < 0).any():
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(xd)
    return custom_op(out, (x,), lambda g: (g * 0.5 / out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the value was inside [lo, hi]."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return custom_op(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return custom_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return custom_op(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return custom_op(x.data[key], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return custom_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``idx.shape + (d,)``.

    The gradient is returned row-sparse, so a large table only pays for the
    rows that were read.
    """
    idx = np.asarray(idx, dtype=np.int64)
    tshape = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= tshape[0]):
        raise IndexError("row index out of range")
    out = table.data[idx]

    def backward(g):
        return (SparseRows(idx.reshape(-1), g.reshape(-1, tshape[1]), tshape),)

    return custom_op(out, (table,), backward)


def pick(x: Tensor, idx) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis (one entry per leading index)."""
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data
    expanded = idx[..., None]
    out = np.take_along_axis(xd, expanded, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return custom_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or equal-batch stacks of matrices."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return custom_op(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` as one node; ``x`` may carry leading batch axes."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"linear shape mismatch: {xd.shape} vs weight {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd) if x.requires_grad else None
        gw = (g2.T @ xd.reshape(-1, xd.shape[-1])) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return custom_op(out, inputs, backward)


def _softmax_np(xd: np.ndarray, axis: int = -1) -> np.ndarray:
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _log_softmax_np(xd: np.ndarray, axis: int = -1) -> np.ndarray:
    z = xd - xd.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(x.data, axis)
    _check_finite(out, "softmax")

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(x.data, axis)
    _check_finite(out, "log_softmax")

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# finite differences


def gradient_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float | None = None,
                   max_entries: int | None = None, rng=None, points: int = 2,
                   numeric_f: Callable[[], Tensor] | None = None) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is re-evaluated for every perturbed entry and must be deterministic.
    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``max_entries`` limits the check to a random subset per parameter.

    ``points=2`` is the usual ``(f(x+h) - f(x-h)) / 2h`` (default ``h=1e-5``);
    ``points=4`` uses the fourth-order stencil
    ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`` (default ``h=1e-3``),
    whose larger step keeps round-off far below the truncation error, so
    small gradient entries are resolved to many more digits.

    ``numeric_f`` (default ``f``) is the function differenced numerically.
    Losses with stop-gradient terms pass a surrogate here in which the
    stopped quantities are frozen at their unperturbed values.
    """
    if points not in (2, 4):
        raise ValueError("points must be 2 or 4")
    if eps is None:
        eps = 1e-5 if points == 2 else 1e-3
    numeric_f = f if numeric_f is None else numeric_f
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradient_check needs float64 parameters")
        p.zero_grad()
    get_graph().reset()
    out = f()
    if out.data.size != 1:
        raise ValueError("gradient_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = rng.choice(flat.size, max_entries, replace=False)
            for i in entries:
                old = flat[i]

                def at(delta):
                    flat[i] = old + delta
                    return float(numeric_f().data)

                if points == 2:
                    num = (at(eps) - at(-eps)) / (2 * eps)
                else:
                    num = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                flat[i] = old
                ana = a.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
