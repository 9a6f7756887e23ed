"""Reverse-mode autodiff on numpy arrays.

Tensors are float32 by default (float64 is allowed for gradient-check
instrumentation).  Every primitive validates its output for finiteness:
NaN/Inf anywhere is an error state, not a value.  The tape is implicit:
each op output holds a node pointing at its inputs; `backprop` walks the
graph once and then frees it.
"""

import contextlib

import numpy as np


class NonFiniteError(ArithmeticError):
    """A primitive produced, or backprop encountered, NaN/Inf."""


class GraphError(RuntimeError):
    """Backprop requested on a freed or non-scalar graph."""


_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True

# Sentinel marking tensors whose graph was consumed by a backprop call.
_FREED = object()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, finite diffs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("inputs", "vjp", "op_kind")

    def __init__(self, inputs, vjp, op_kind):
        self.inputs = inputs
        self.vjp = vjp
        self.op_kind = op_kind


class Tensor:
    """Dense float array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        elif np.dtype(dtype) not in (np.dtype(d) for d in _FLOAT_DTYPES):
            raise ValueError(f"tensors are float32/float64 only, got {dtype}")
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- operator sugar (all routed through primitive_forward) ---------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return primitive_forward("add", (self, other))
        return primitive_forward("shift", (self,), c=float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return primitive_forward("mul", (self, other))
        return primitive_forward("scale", (self,), c=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return primitive_forward("scale", (self,), c=-1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return primitive_forward("add", (self, -other))
        return primitive_forward("shift", (self,), c=-float(other))

    def __matmul__(self, other):
        return primitive_forward("matmul", (self, other))

    def reshape(self, shape) -> "Tensor":
        return primitive_forward("reshape", (self,), shape=tuple(shape))

    def transpose(self, axes) -> "Tensor":
        return primitive_forward("transpose", (self,), axes=tuple(axes))

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return primitive_forward("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return primitive_forward("mean", (self,), axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------
# dispatch plumbing


def _check_finite(data: np.ndarray, op_kind: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from primitive '{op_kind}'")


def _wrap(op_kind, inputs, data, vjp):
    _check_finite(data, op_kind)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out.node = _Node(tuple(inputs), vjp, op_kind) if out.requires_grad else None
    return out


def _common_dtype(inputs) -> np.dtype:
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ValueError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")
    return dtypes.pop()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def primitive_forward(op_kind: str, inputs, **attrs) -> Tensor:
    """Run one primitive; records a tape node when any input requires grad."""
    try:
        op = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{op_kind}' (known: {sorted(_OPS)})") from None
    inputs = tuple(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op_kind}: inputs must be Tensors, got {type(t).__name__}")
    return op(inputs, attrs)


# ---------------------------------------------------------------------
# primitives


def _op_unary(inputs, n, op_kind):
    if len(inputs) != n:
        raise ValueError(f"{op_kind} takes {n} input(s), got {len(inputs)}")


def _matmul(inputs, attrs):
    _op_unary(inputs, 2, "matmul")
    a, b = inputs
    _common_dtype(inputs)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.ndim == bd.ndim:
        if ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
            raise ValueError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    elif not (bd.ndim == 2 and ad.ndim > 2):
        raise ValueError(f"unsupported matmul arity: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def vjp(g):
        if ad.ndim == bd.ndim:
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            gb = np.matmul(ad.swapaxes(-1, -2), g)
        else:  # (..., m, k) @ (k, n)
            ga = np.matmul(g, bd.T)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _wrap("matmul", inputs, out, vjp)


def _add(inputs, attrs):
    _op_unary(inputs, 2, "add")
    a, b = inputs
    _common_dtype(inputs)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _wrap("add", inputs, out, vjp)


def _mul(inputs, attrs):
    _op_unary(inputs, 2, "mul")
    a, b = inputs
    _common_dtype(inputs)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _wrap("mul", inputs, out, vjp)


def _scale(inputs, attrs):
    _op_unary(inputs, 1, "scale")
    (x,) = inputs
    c = float(attrs["c"])
    out = x.data * x.data.dtype.type(c)

    def vjp(g):
        return (g * x.data.dtype.type(c),)

    return _wrap("scale", inputs, out, vjp)


def _shift(inputs, attrs):
    _op_unary(inputs, 1, "shift")
    (x,) = inputs
    c = float(attrs["c"])
    out = x.data + x.data.dtype.type(c)

    def vjp(g):
        return (g,)

    return _wrap("shift", inputs, out, vjp)


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax(inputs, attrs):
    _op_unary(inputs, 1, "softmax")
    (x,) = inputs
    axis = int(attrs.get("axis", -1))
    y = _softmax_data(x.data, axis)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _wrap("softmax", inputs, y, vjp)


def _log_softmax(inputs, attrs):
    _op_unary(inputs, 1, "log_softmax")
    (x,) = inputs
    axis = int(attrs.get("axis", -1))
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def vjp(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _wrap("log_softmax", inputs, y, vjp)


def _layer_norm(inputs, attrs):
    if len(inputs) != 3:
        raise ValueError("layer_norm takes (x, gain, bias)")
    x, gain, bias = inputs
    _common_dtype(inputs)
    axis = int(attrs.get("axis", -1))
    eps = float(attrs.get("eps", 1e-5))
    n = x.data.shape[axis]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ValueError(f"gain/bias must be ({n},), got {gain.shape}/{bias.shape}")
    bshape = [1] * x.data.ndim
    bshape[axis] = n
    gb = gain.data.reshape(bshape)
    bb = bias.data.reshape(bshape)

    mu = np.mean(x.data, axis=axis, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gb + bb

    def vjp(g):
        reduce_axes = tuple(i for i in range(g.ndim) if i != axis % g.ndim)
        dgain = np.sum(g * xhat, axis=reduce_axes)
        dbias = np.sum(g, axis=reduce_axes)
        dxhat = g * gb
        m1 = np.mean(dxhat, axis=axis, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _wrap("layer_norm", inputs, out, vjp)


def _relu(inputs, attrs):
    _op_unary(inputs, 1, "relu")
    (x,) = inputs
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _wrap("relu", inputs, out, vjp)


def _embedding_lookup(inputs, attrs):
    _op_unary(inputs, 1, "embedding_lookup")
    (table,) = inputs
    ids = np.asarray(attrs["ids"])
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(f"embedding id out of range for table of {table.data.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        # add.at gives a deterministic scatter-add for repeated ids
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _wrap("embedding_lookup", inputs, out, vjp)


def _dropout(inputs, attrs):
    _op_unary(inputs, 1, "dropout")
    (x,) = inputs
    rate = float(attrs["rate"])
    training = bool(attrs.get("training", True))
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        # identity; consumes no rng draws
        out = x.data.copy()

        def vjp(g):
            return (g,)

        return _wrap("dropout", inputs, out, vjp)
    rng = attrs["rng"]
    keep = rng.random(x.data.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    out = np.where(keep, x.data * scale, x.data.dtype.type(0.0))

    def vjp(g):
        return (np.where(keep, g * scale, g.dtype.type(0.0)),)

    return _wrap("dropout", inputs, out, vjp)


def _reshape(inputs, attrs):
    _op_unary(inputs, 1, "reshape")
    (x,) = inputs
    shape = tuple(attrs["shape"])
    out = np.reshape(x.data, shape)

    def vjp(g):
        return (np.reshape(g, x.data.shape),)

    return _wrap("reshape", inputs, out, vjp)


def _transpose(inputs, attrs):
    _op_unary(inputs, 1, "transpose")
    (x,) = inputs
    axes = tuple(attrs["axes"])
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _wrap("transpose", inputs, out, vjp)


def _concat(inputs, attrs):
    if not inputs:
        raise ValueError("concat needs at least one input")
    _common_dtype(inputs)
    axis = int(attrs.get("axis", 0))
    out = np.concatenate([t.data for t in inputs], axis=axis)
    sizes = [t.data.shape[axis] for t in inputs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _wrap("concat", inputs, out, vjp)


def _slice(inputs, attrs):
    _op_unary(inputs, 1, "slice")
    (x,) = inputs
    index = attrs["index"]
    if not isinstance(index, tuple):
        index = (index,)
    if not all(isinstance(s, slice) for s in index):
        raise ValueError("slice index must be a tuple of slice objects")
    out = x.data[index].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _wrap("slice", inputs, out, vjp)


def _mask_fill(inputs, attrs):
    _op_unary(inputs, 1, "mask_fill")
    (x,) = inputs
    mask = np.asarray(attrs["mask"], dtype=bool)
    value = x.data.dtype.type(attrs["value"])
    if np.broadcast_shapes(x.data.shape, mask.shape) != x.data.shape:
        raise ValueError(f"mask {mask.shape} must broadcast within x {x.data.shape}")
    out = np.where(mask, value, x.data)

    def vjp(g):
        return (np.where(mask, g.dtype.type(0.0), g),)

    return _wrap("mask_fill", inputs, out, vjp)


def _sum(inputs, attrs):
    _op_unary(inputs, 1, "sum")
    (x,) = inputs
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    # accumulate in float64 to limit drift, report in the input dtype
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(g.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).astype(g.dtype, copy=True),)

    return _wrap("sum", inputs, np.asarray(out), vjp)


def _mean(inputs, attrs):
    _op_unary(inputs, 1, "mean")
    (x,) = inputs
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    count = x.data.size if axis is None else x.data.shape[axis]
    out = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def vjp(g):
        scale = g.dtype.type(1.0 / count)
        if axis is None:
            return (np.broadcast_to(g * scale, x.data.shape).astype(g.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, x.data.shape).astype(g.dtype, copy=True),)

    return _wrap("mean", inputs, np.asarray(out), vjp)


def _take_rows(inputs, attrs):
    _op_unary(inputs, 1, "take_rows")
    (x,) = inputs
    idx = np.asarray(attrs["idx"])
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("take_rows needs a 1-d integer index")
    out = x.data[idx].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _wrap("take_rows", inputs, out, vjp)


def _gather_last(inputs, attrs):
    _op_unary(inputs, 1, "gather_last")
    (x,) = inputs
    idx = np.asarray(attrs["idx"])
    if x.data.ndim != 2 or idx.shape != (x.data.shape[0],):
        raise ValueError(f"gather_last: x (N, V) with idx (N,), got {x.shape} / {idx.shape}")
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _wrap("gather_last", inputs, out, vjp)


_OPS = {
    "matmul": _matmul,
    "add": _add,
    "mul": _mul,
    "scale": _scale,
    "shift": _shift,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "relu": _relu,
    "embedding_lookup": _embedding_lookup,
    "dropout": _dropout,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "slice": _slice,
    "mask_fill": _mask_fill,
    "sum": _sum,
    "mean": _mean,
    "take_rows": _take_rows,
    "gather_last": _gather_last,
}


# ---------------------------------------------------------------------
# backprop


def backprop(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf with d(loss)/d(leaf).

    The graph is freed afterwards; a second backprop through any part of
    it raises GraphError.  A constant loss (no graph) is a no-op: every
    leaf gradient is trivially zero.
    """
    if loss.data.size != 1:
        raise GraphError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if loss.node is _FREED:
        raise GraphError("graph already freed by a previous backprop")
    if loss.node is None:
        if loss.requires_grad:
            # the loss is itself a leaf parameter
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return

    # iterative post-order: leaves first, loss last
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            if inp.node is _FREED:
                raise GraphError("graph shares a subgraph already freed by backprop")
            if inp.node is not None and id(inp) not in visited:
                stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue  # not on any path to the loss
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient flowing into '{t.node.op_kind}'")
        for inp, gi in zip(t.node.inputs, t.node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                k = id(inp)
                grads[k] = gi if k not in grads else grads[k] + gi

    for t in order:
        t.node = _FREED


# ---------------------------------------------------------------------
# finite-difference oracle


def gradient_check(f, x: Tensor, h: float = 1e-3, indices=None) -> float:
    """Max relative error between backprop and central differences.

    f must be a scalar-valued function of x.  `indices` optionally
    restricts the probed flat components (deep models, sampled checks).
    """
    if not (0.0 < h <= 1e-1):
        raise ValueError(f"h must be in (0, 1e-1], got {h}")
    x.data = np.ascontiguousarray(x.data)  # flat view below must alias x.data
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    if loss.data.size != 1:
        raise ValueError("gradient_check needs a scalar-valued f")
    backprop(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

    flat = x.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            up = float(f(x).data)
            flat[i] = orig - h
            down = float(f(x).data)
        flat[i] = orig
        numeric = (up - down) / (2.0 * h)
        if not np.isfinite(numeric):
            raise NonFiniteError(f"non-finite finite-difference estimate at flat index {i}")
        a = float(analytic.reshape(-1)[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
