"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a
:class:`Tape` is active and any input requires gradients, records a
closure that maps the output gradient to input gradients.  Calling
:meth:`Tape.backward` replays those closures in reverse order.

Layout is row-major with the batch dimension first.
"""
from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEBUG = bool(os.environ.get("RESDEC_DEBUG"))

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; each dispatches to a recorded primitive.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the ``with``
    block whose inputs require gradients are recorded here.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self.consumed = False
        self.visited = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def reset(self) -> None:
        self.nodes.clear()
        self._produced.clear()
        self.consumed = False
        self.visited = 0

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("backward already ran on this tape; call reset() first")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            self.visited += 1
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in self._produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key]
            if g.shape != leaf.shape:
                g = g.reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every requires-grad tensor contributing to ``loss``."""
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward called without an active tape")
    tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(op: str, value, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if type(value) is not np.ndarray:
        value = np.asarray(value)
    if DEBUG and not np.all(np.isfinite(value)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericError(f"{op} produced non-finite values from finite inputs")
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    # bypass __init__: value is already a float ndarray
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.requires_grad = needs
    out.name = None
    if needs and _TAPES:
        _TAPES[-1].record(out, inputs, backward)
    return out


def _binary(op: str, fn, a: Tensor, b: Tensor):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("add", _binary("add", np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("sub", _binary("sub", np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    value = _binary("mul", np.multiply, a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", value, (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if type(a) is Tensor and type(b) is Tensor:
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dimensions."""
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    if a2.shape[-1] != b2.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out2 = np.matmul(a2, b2)
    except ValueError:
        raise DimensionError(f"matmul: batch dimensions do not broadcast, shapes {a.shape} and {b.shape}") from None
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim != 1 else out[..., 0]

    def bw(g):
        g2 = g.reshape(out2.shape)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[u.shape for u in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack: empty input list")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    value = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % value.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) if t.requires_grad else None for i, t in enumerate(tensors))

    return _make("stack", value, tensors, bw)


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, ``None`` and ``Ellipsis``."""
    try:
        value = x.data[index]
    except IndexError as exc:
        raise DimensionError(f"slice: index {index!r} invalid for shape {x.shape}: {exc}") from None

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] += g
        return (gx,)

    return _make("slice", value, (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is 0 get weight exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise DimensionError(f"softmax_lastdim: mask shape {mask.shape} vs input {x.shape}") from None
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax_lastdim: every position of a row is masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax_lastdim", y, (x,), bw)


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax_lastdim", y, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise DimensionError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}) for table {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding_lookup", table.data[ids], (table,), bw)


def mean_lastdim(x: Tensor, axis: int = -1) -> Tensor:
    """Mean over one axis (the last by default)."""
    if x.ndim == 0:
        raise DimensionError("mean_lastdim: scalar input")
    ax = axis % x.ndim
    n = x.shape[ax]
    if n == 0:
        raise DimensionError(f"mean_lastdim: empty axis {axis} in shape {x.shape}")

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _make("mean", x.data.mean(axis=ax), (x,), bw)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make("sum", np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = axis % x.ndim
    return _make("sum", x.data.sum(axis=ax), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),))


def gather_lastdim(x: Tensor, ids) -> Tensor:
    """Pick ``x[..., ids[...]]``; ``ids`` has the shape of ``x`` minus its last axis."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"gather_lastdim: ids shape {ids.shape} vs input {x.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise DimensionError(f"gather_lastdim: ids outside [0, {x.shape[-1]})")
    idx = ids[..., None]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make("gather_lastdim", np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw)


# ---------------------------------------------------------------------------
# fused primitives (each replaces a chain of the ones above with one tape node)


def gru_cell(h: Tensor, xp: Tensor, Uh: Tensor, mask=None) -> Tensor:
    """GRU update with gates ordered (z, r, n); ``xp`` holds the input projection plus bias.

    ``h' = (1 - z) * n + z * h`` with ``n = tanh(xp_n + r * (h Uh)_n)``.
    Rows where ``mask`` (a constant array broadcastable to ``h``) is 0 keep ``h``.
    """
    d = h.shape[-1]
    if xp.shape[:-1] != h.shape[:-1] or xp.shape[-1] != 3 * d or Uh.shape != (d, 3 * d):
        raise DimensionError(f"gru_cell: h {h.shape}, xp {xp.shape}, Uh {Uh.shape}")
    hd, xd, U = h.data, xp.data, Uh.data
    hp = hd @ U
    zr = 0.5 * (np.tanh(0.5 * (xd[..., : 2 * d] + hp[..., : 2 * d])) + 1.0)
    z, r = zr[..., :d], zr[..., d:]
    hn = hp[..., 2 * d:]
    n = np.tanh(xd[..., 2 * d:] + r * hn)
    new = n + z * (hd - n)
    if mask is not None:
        m = np.asarray(mask, dtype=hd.dtype)
        out = hd + m * (new - hd)
    else:
        out = new

    def bw(g):
        if mask is not None:
            g_new = g * m
            dh = g - g_new
        else:
            g_new = g
            dh = 0.0
        dz = g_new * (hd - n)
        dan = g_new * (1.0 - z) * (1.0 - n * n)
        daz = dz * z * (1.0 - z)
        dar = dan * hn * r * (1.0 - r)
        dxp = np.concatenate([daz, dar, dan], axis=-1)
        dhp = np.concatenate([daz, dar, dan * r], axis=-1)
        dh = dh + g_new * z + dhp @ U.T
        dU = hd.reshape(-1, d).T @ dhp.reshape(-1, 3 * d) if Uh.requires_grad else None
        return dh, dxp, dU

    return _make("gru_cell", out, (h, xp, Uh), bw)


def additive_scores(keys: Tensor, query: Tensor, v: Tensor) -> Tensor:
    """``tanh(keys + query[..., None, :]) @ v``: (B, k, a), (B, a), (a,) -> (B, k)."""
    if keys.ndim != query.ndim + 1 or keys.shape[:-2] != query.shape[:-1] \
            or keys.shape[-1] != query.shape[-1] or v.shape != (keys.shape[-1],):
        raise DimensionError(f"additive_scores: keys {keys.shape}, query {query.shape}, v {v.shape}")
    th = np.tanh(keys.data + query.data[..., None, :])
    out = th @ v.data

    def bw(g):
        da = (g[..., None] * v.data) * (1.0 - th * th)
        dv = (g[..., None] * th).reshape(-1, th.shape[-1]).sum(axis=0) if v.requires_grad else None
        return da, da.sum(axis=-2), dv

    return _make("additive_scores", out, (keys, query, v), bw)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``sum_i weights[..., i] * values[..., i, :]``: (B, k), (B, k, c) -> (B, c)."""
    if values.ndim != weights.ndim + 1 or values.shape[:-1] != weights.shape:
        raise DimensionError(f"weighted_sum: weights {weights.shape}, values {values.shape}")
    out = np.einsum("...k,...kc->...c", weights.data, values.data)

    def bw(g):
        dw = np.einsum("...kc,...c->...k", values.data, g) if weights.requires_grad else None
        dv = weights.data[..., None] * g[..., None, :] if values.requires_grad else None
        return dw, dv

    return _make("weighted_sum", out, (weights, values), bw)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": slice_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax_lastdim,
    "embedding_lookup": embedding_lookup,
    "mean_lastdim": mean_lastdim,
    "sub": sub,
    "stack": stack,
    "reshape": reshape,
    "exp": exp,
    "log": log,
    "log_softmax_lastdim": log_softmax_lastdim,
    "sum": sum_,
    "gather_lastdim": gather_lastdim,
    "gru_cell": gru_cell,
    "additive_scores": additive_scores,
    "weighted_sum": weighted_sum,
}


def forward_primitive(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a named primitive; extra arguments (axis, index, ids) go in ``kwargs``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_check(f: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is a Tensor or a sequence/mapping of Tensors; ``f`` takes
    no arguments and reads them (so whole models can be checked).  All
    tensors must be float64.
    """
    if isinstance(point, Tensor):
        tensors = [point]
        call = lambda: f(point)  # noqa: E731
    else:
        tensors = list(point.values()) if isinstance(point, dict) else list(point)
        call = f
    for t in tensors:
        if t.dtype != np.float64:
            raise ContractError("finite_difference_check requires float64 tensors")
        if not np.all(np.isfinite(t.data)):
            raise NumericError("finite_difference_check: non-finite point")
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = call()
        _check_finite(out)
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ContractError("finite_difference_check needs contiguous tensors")
        gflat = ga.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = _check_finite(call())
            flat[k] = orig - step
            fm = _check_finite(call())
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * step)
            denom = max(abs(gflat[k]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[k] - numeric) / denom)
    for t in tensors:
        t.grad = None
    return worst


def _check_finite(out: Tensor) -> float:
    v = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("finite_difference_check: f returned a non-finite value")
    return v


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
