"""Dense tensors with a recorded gradient tape.

Every operation the model needs is defined here with its own adjoint rule.
Operations run eagerly on numpy arrays; when a :class:`GradTape` is active
and an input requires a gradient, the operation is appended to that tape so
:func:`backward` can replay the adjoints in reverse order.

Shapes must match exactly for pointwise operations. The only implicit
broadcast is scalar times tensor (:func:`scale`); row-wise affine maps go
through :func:`linear`, which states its broadcast in its name.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "GradientError",
    "backward",
    "record_op",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "layer_norm",
    "reshape",
    "transpose",
    "swap_last",
    "concat",
    "slice_axis",
    "index",
    "take",
    "embedding",
    "pick",
    "add_mask_bias",
]

_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand extents are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of the gradient machinery (non-scalar loss, stale grads, ...)."""


class Tensor:
    """Immutable n-dimensional array of reals plus a mutable ``grad`` slot.

    ``dtype`` is fixed at construction (float64 by default). ``values`` is
    read-only; optimizers produce new tensors instead of writing in place.
    """

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, dtype=None, requires_grad: bool = False, name: str | None = None):
        if dtype is None:
            dtype = values.dtype if isinstance(values, np.ndarray) and values.dtype in _DTYPES else np.float64
        dtype = np.dtype(dtype)
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.array(values, dtype=dtype, copy=True)
        _check_shape(arr.shape, "Tensor")
        _check_finite(arr, "Tensor")
        arr.flags.writeable = False
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # trusted fast path for operation outputs: no copy
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.values = arr
        out.grad = None
        out.requires_grad = requires_grad
        out.name = None
        return out

    @classmethod
    def zeros(cls, shape, dtype=np.float64, requires_grad=False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return np.array(self.values)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from any tape, not requiring a gradient."""
        return Tensor._wrap(self.values, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # operator sugar; all of these go through the checked functional ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.ndim > 0:
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _check_shape(shape: tuple[int, ...], op: str) -> None:
    if any(n <= 0 for n in shape):
        raise ShapeError(f"{op}: extents must be positive, got {shape}")


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite elements (inf and nan both propagate); the
    # elementwise test only runs when the sum is not finite, e.g. on overflow
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


# --------------------------------------------------------------------- tape

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar("hctx_tape", default=None)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered log of the operations executed while the tape is active.

    Use as a context manager; operations on tensors that require a gradient
    are recorded while inside the ``with`` block. A tape can be replayed by
    :func:`backward` once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self._token = None
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, rec: _Record) -> None:
        if self.consumed:
            raise GradientError("cannot record onto a tape that was already replayed")
        self.records.append(rec)
        self._produced.add(id(rec.out))


def record_op(op: str, values: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``values`` as the output of ``op`` and log it on the active tape.

    ``vjp(g)`` must return one gradient array (or ``None``) per input, each
    with that input's shape. Used by every primitive here and by modules
    that define fused operations of their own (e.g. rotary rotation).
    """
    values = np.asarray(values)
    _check_finite(values, op)
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, needs)
    if needs:
        tape._record(_Record(op, out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` through ``tape``.

    Leaves whose ``grad`` is already set raise :class:`GradientError`; call
    ``zero_grad`` between steps. The tape is consumed by this call.
    """
    if loss.shape != ():
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise GradientError("tape already replayed; record a fresh forward pass")
    if id(loss) not in tape._produced:
        raise GradientError("loss was not produced on this tape (detached graph)")

    produced = tape._produced
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = adjoints.pop(id(rec.out), None)
        if g is None:
            continue
        grads = rec.vjp(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi
            if key not in produced:
                leaves[key] = inp
    tape.consumed = True

    stale = [t for t in leaves.values() if t.grad is not None]
    if stale:
        names = ", ".join(t.name or repr(t) for t in stale[:3])
        raise GradientError(f"grad already populated on {names}; call zero_grad() first")
    for key, leaf in leaves.items():
        g = adjoints[key]
        _check_finite(g, "backward")
        leaf.grad = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)


# ---------------------------------------------------------------- helpers

def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(x, dtype=dtype)


def _same_dtype(op: str, *ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"{op}: mixed precisions {dt} and {t.dtype}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    _same_dtype(op, a, b)


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be equal."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _same_dtype("matmul", a, b)
    av, bv = a.values, b.values

    def vjp(g):
        return (g @ _swap(bv) if a.requires_grad else None,
                _swap(av) @ g if b.requires_grad else None)

    return record_op("matmul", av @ bv, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` applied over all leading axes of x."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    _same_dtype("linear", x, w, *([b] if b is not None else []))
    xv, wv = x.values, w.values
    out = xv @ wv
    if b is not None:
        out = out + b.values
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.reshape(-1, xv.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return record_op("linear", out, inputs, vjp)


# ---------------------------------------------------------------- pointwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_shape("add", a, b)
    return record_op("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_shape("sub", a, b)
    return record_op("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return record_op("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, s) -> Tensor:
    """Scalar times tensor. ``s`` is a python number or a 0-d tensor."""
    if isinstance(s, Tensor):
        if s.shape != ():
            raise ShapeError(f"scale: factor must be 0-d, got {s.shape}")
        _same_dtype("scale", x, s)
        xv, sv = x.values, s.values

        def vjp(g):
            return g * sv, (np.sum(g * xv) if s.requires_grad else None)

        return record_op("scale", xv * sv, (x, s), vjp)
    c = float(s)
    return record_op("scale", x.values * x.dtype.type(c), (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return record_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return record_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xv = x.values
    inner = _GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)
    y = 0.5 * xv * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv * xv)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return record_op("gelu", y, (x,), vjp)


# ------------------------------------------------------------ normalization

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "softmax") if x.ndim else _raise_empty("softmax")
    z = x.values - x.values.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=ax, keepdims=True)),)

    return record_op("softmax", y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "log_softmax") if x.ndim else _raise_empty("log_softmax")
    z = x.values - x.values.max(axis=ax, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return record_op("log_softmax", y, (x,), vjp)


def _raise_empty(op):
    raise ShapeError(f"{op}: needs at least one axis")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    _same_dtype("layer_norm", x, gain, bias)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.values
    out = xhat * gv + bias.values

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gg = np.sum(g * xhat, axis=lead) if gain.requires_grad else None
        gb = np.sum(g, axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record_op("layer_norm", out, (x, gain, bias), vjp)


# ------------------------------------------------------------- reductions

def _axes(axis, ndim, op):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(_norm_axis(a, ndim, op) for a in axis))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _axes(axis, x.ndim, "sum")
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return record_op("sum", np.sum(x.values, axis=axes), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim, "mean")
    shape = x.shape
    n = 1
    for a in axes:
        n *= shape[a]
    if n == 0:
        raise ShapeError("mean over an empty axis")

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, shape).copy(),)

    return record_op("mean", np.mean(x.values, axis=axes), (x,), vjp)


# ---------------------------------------------------------------- movement

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.values.reshape(tuple(shape))
    _check_shape(out.shape, "reshape")
    return record_op("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op("transpose", np.transpose(x.values, axes), (x,),
                     lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    return record_op("swap_last", _swap(x.values), (x,), lambda g: (_swap(g),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: nothing to join")
    ax = _norm_axis(axis, xs[0].ndim, "concat")
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or t.shape[:ax] != xs[0].shape[:ax] or t.shape[ax + 1:] != xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: {xs[0].shape} and {t.shape} differ off axis {ax}")
    _same_dtype("concat", *xs)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return record_op("concat", np.concatenate([t.values for t in xs], axis=ax), xs, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous sub-range ``[start, stop)`` along one axis."""
    ax = _norm_axis(axis, x.ndim, "slice_axis")
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_axis: [{start}, {stop}) outside extent {n}")
    sl = (slice(None),) * ax + (slice(start, stop),)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sl] = g
        return (out,)

    return record_op("slice", x.values[sl], (x,), vjp)


def index(x: Tensor, i: int) -> Tensor:
    """Element ``i`` of a 1-d tensor as a 0-d tensor."""
    if x.ndim != 1:
        raise ShapeError(f"index: expects a vector, got {x.shape}")
    n = x.shape[0]

    def vjp(g):
        out = np.zeros(n, dtype=x.dtype)
        out[i] = g
        return (out,)

    return record_op("index", x.values[i].copy(), (x,), vjp)


def take(x: Tensor, indices: Sequence[int], axis: int = 0) -> Tensor:
    ax = _norm_axis(axis, x.ndim, "take")
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return record_op("take", np.take(x.values, idx, axis=ax), (x,), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding: ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding: id outside [0, {n})")

    def vjp(g):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return record_op("embedding", table.values[ids], (table,), vjp)


def pick(x: Tensor, ids) -> Tensor:
    """``x[..., ids[...]]``: one entry of the last axis per leading position."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick: ids {ids.shape} vs leading axes {x.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise IndexError(f"pick: id outside [0, {x.shape[-1]})")
    idx = ids[..., None]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return record_op("pick", np.take_along_axis(x.values, idx, axis=-1)[..., 0], (x,), vjp)


def add_mask_bias(scores: Tensor, mask: np.ndarray, bias: float | None = None) -> Tensor:
    """Add a large negative constant where the boolean ``mask`` is False.

    ``mask`` covers the last two axes of ``scores`` and is shared by every
    leading index. The default bias is -1e12 at float64 and -1e9 at float32.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape[-2:]:
        raise ShapeError(f"add_mask_bias: mask {mask.shape} vs scores {scores.shape}")
    if bias is None:
        bias = -1e12 if scores.dtype == np.float64 else -1e9
    offset = np.where(mask, 0.0, bias).astype(scores.dtype)
    return record_op("mask_bias", scores.values + offset, (scores,), lambda g: (g,))
