"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a small context on the
output tensor. Gradient rules live in :data:`GRADIENTS`, keyed by op name, and
are looked up when :meth:`Tensor.backward` runs, so a rule can be swapped out
(the gradient checker relies on this for its negative control).

Arrays are row-major numpy arrays. Images travel as ``H x W x C``.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GRADIENTS",
    "abs_",
    "Tensor",
    "add",
    "backward",
    "bmm",
    "broadcast_to",
    "concat",
    "default_dtype",
    "gather_rows",
    "get_default_dtype",
    "is_grad_enabled",
    "l1",
    "load_tensor",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "register_gradient",
    "relu",
    "reshape",
    "save_tensor",
    "scale",
    "shift",
    "sigmoid",
    "slice_",
    "softmax",
    "sub",
    "sum_",
    "transpose",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_KINK_TRACE: list | None = None

GRADIENTS: dict[str, Callable] = {}


def register_gradient(name: str):
    """Register the vector-Jacobian product for the op called ``name``.

    The rule receives ``(ctx, grad_out)`` and returns one gradient array (or
    ``None``) per parent, in parent order.
    """

    def deco(fn):
        GRADIENTS[name] = fn
        return fn

    return deco


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def kink_trace():
    """Collect the branch pattern of every non-smooth op (relu, abs, max-pool).

    Finite-difference checks compare patterns at perturbed points: if a
    perturbation flips a branch the central difference is not meaningful.
    """
    global _KINK_TRACE
    prev = _KINK_TRACE
    _KINK_TRACE = trace = []
    try:
        yield trace
    finally:
        _KINK_TRACE = prev


def record_kink(pattern: np.ndarray) -> None:
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(np.packbits(pattern.ravel()) if pattern.dtype == bool else pattern.ravel().copy())


class Tensor:
    """A dense real array that optionally tracks gradients.

    Parameters
    ----------
    data : array_like
        Values. Float32/float64 arrays keep their dtype; anything else is
        converted to the current default dtype.
    requires_grad : bool
        Whether this tensor is a leaf that should receive a ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx: dict = {}
        self.name = name

    # -- shape helpers -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, **ctx) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(_needs_graph(p) for p in parents):
        out._op = op
        out._parents = tuple(parents)
        out._ctx = ctx
    return out


def _needs_graph(t: Tensor) -> bool:
    return t.requires_grad or t._op is not None


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), "add")


@register_gradient("add")
def _add_grad(ctx, g):
    return g, g


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub")


@register_gradient("sub")
def _sub_grad(ctx, g):
    return g, -g


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul", a=a.data, b=b.data)


@register_gradient("mul")
def _mul_grad(ctx, g):
    return g * ctx["b"], g * ctx["a"]


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), "scale", c=c)


@register_gradient("scale")
def _scale_grad(ctx, g):
    return (g * g.dtype.type(ctx["c"]),)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a scalar constant."""
    return _make(a.data + a.dtype.type(float(c)), (a,), "shift")


@register_gradient("shift")
def _shift_grad(ctx, g):
    return (g,)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    record_kink(mask)
    # np.maximum keeps NaN visible instead of silently mapping it to 0
    return _make(np.maximum(a.data, a.dtype.type(0)), (a,), "relu", mask=mask)


@register_gradient("relu")
def _relu_grad(ctx, g):
    # relu'(0) := 0
    return (np.where(ctx["mask"], g, g.dtype.type(0)),)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return _make(out, (a,), "sigmoid", y=out)


@register_gradient("sigmoid")
def _sigmoid_grad(ctx, g):
    y = ctx["y"]
    return (g * y * (1 - y),)


def abs_(a: Tensor) -> Tensor:
    record_kink(a.data > 0)
    return _make(np.abs(a.data), (a,), "abs", sign=np.sign(a.data))


@register_gradient("abs")
def _abs_grad(ctx, g):
    # sign(0) == 0 gives d|x|/dx := 0 at the kink
    return (g * ctx["sign"],)


def l1(a: Tensor, b: Tensor | None = None, reduction: str = "sum") -> Tensor:
    """Absolute difference ``|a - b|`` with ``reduction`` in {none, sum, mean}."""
    d = a if b is None else sub(a, b)
    out = abs_(d)
    if reduction == "none":
        return out
    if reduction == "sum":
        return sum_(out)
    if reduction == "mean":
        return mean(out)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    return _make(np.sum(a.data, axis=axes), (a,), "sum", axes=axes, shape=a.shape)


@register_gradient("sum")
def _sum_grad(ctx, g):
    shape = ctx["shape"]
    kept = tuple(1 if i in ctx["axes"] else n for i, n in enumerate(shape))
    return (np.broadcast_to(g.reshape(kept), shape).copy(),)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul", a=a.data, b=b.data)


@register_gradient("matmul")
def _matmul_grad(ctx, g):
    return g @ ctx["b"].T, ctx["a"].T @ g


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dimensions: ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"bmm: incompatible batch shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: inner dimensions differ {a.shape} @ {b.shape}")
    return _make(np.matmul(a.data, b.data), (a, b), "bmm", a=a.data, b=b.data)


@register_gradient("bmm")
def _bmm_grad(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=ax, keepdims=True)
    return _make(y, (a,), "softmax", y=y, axis=ax)


@register_gradient("softmax")
def _softmax_grad(ctx, g):
    y = ctx["y"]
    return (y * (g - np.sum(g * y, axis=ctx["axis"], keepdims=True)),)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _make(a.data.reshape(shape), (a,), "reshape", shape=a.shape)


@register_gradient("reshape")
def _reshape_grad(ctx, g):
    return (g.reshape(ctx["shape"]),)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "transpose", axes=axes)


@register_gradient("transpose")
def _transpose_grad(ctx, g):
    return (np.transpose(g, np.argsort(ctx["axes"])),)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ndim = tensors[0].ndim
    (ax,) = _norm_axes(axis, ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", axis=ax, sizes=sizes)


@register_gradient("concat")
def _concat_grad(ctx, g):
    splits = np.cumsum(ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=ctx["axis"]))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view-style) indexing: ints, slices and Ellipsis only."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (isinstance(ix, (int, np.integer, slice)) or ix is Ellipsis):
            raise TypeError("slice_ supports ints, slices and Ellipsis; use gather_rows for fancy indexing")
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ValueError(str(exc)) from None
    return _make(np.array(out, copy=True), (a,), "slice", index=index, shape=a.shape)


@register_gradient("slice")
def _slice_grad(ctx, g):
    full = np.zeros(ctx["shape"], dtype=g.dtype)
    full[ctx["index"]] = g
    return (full,)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0. Gradient scatters (and accumulates) back."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError("gather_rows: indices must be integers")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows: index out of range for {n} rows")
    return _make(a.data[idx], (a,), "gather_rows", idx=idx, shape=a.shape)


@register_gradient("gather_rows")
def _gather_grad(ctx, g):
    shape = ctx["shape"]
    idx = ctx["idx"].reshape(-1)
    flat = g.reshape((idx.size, -1))
    out = np.zeros((shape[0], flat.shape[1]), dtype=g.dtype)
    np.add.at(out, idx, flat)
    return (out.reshape(shape),)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ValueError(f"broadcast_to: {exc}") from None
    return _make(np.ascontiguousarray(out), (a,), "broadcast_to", shape=a.shape)


@register_gradient("broadcast_to")
def _broadcast_grad(ctx, g):
    src = ctx["shape"]
    lead = g.ndim - len(src)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return (g,)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_graph(p):
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not _needs_graph(loss):
        raise ValueError("loss has no recorded graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        rule = GRADIENTS[node._op]
        parent_grads = rule(node._ctx, g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not _needs_graph(parent):
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# binary snapshots
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"LWTS"
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class SnapshotError(ValueError):
    pass


def save_tensor(fh, array) -> None:
    """Write ``magic | dtype tag | rank | extents | raw little-endian data``."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    if arr.dtype not in _DTYPE_TAGS:
        raise SnapshotError(f"unsupported dtype {arr.dtype}")
    fh.write(SNAPSHOT_MAGIC)
    fh.write(struct.pack("<BQ", _DTYPE_TAGS[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise SnapshotError("truncated tensor snapshot")
    return buf


def load_tensor(fh) -> np.ndarray:
    if _read_exact(fh, 4) != SNAPSHOT_MAGIC:
        raise SnapshotError("bad tensor snapshot magic")
    tag, rank = struct.unpack("<BQ", _read_exact(fh, 9))
    if tag not in _TAG_DTYPES:
        raise SnapshotError(f"unknown dtype tag {tag}")
    if rank > 16:
        raise SnapshotError(f"implausible rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
