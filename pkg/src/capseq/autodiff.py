"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every forward op validates its inputs, computes with numpy, and (when a Tape
is active) records a vector-Jacobian callback. ``Tape.backward`` replays the
records in exact reverse execution order, accumulating gradients into the
``grad`` slot of every tensor it touched. Gradient accumulators are reset at
the start of each backward pass, so repeated backward calls from the same tape
state are bit-identical.

The engine is single-threaded: one tape, one execution context. With no tape
active the ops are pure numpy functions and may run concurrently (inference).
"""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes cannot be combined; names both shapes."""


class NonFiniteInputError(ValueError):
    """Raised when an op receives NaN or infinite values."""


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _require_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInputError(f"{op}: input contains non-finite values")


class Tensor:
    """Dense float64 array plus a gradient slot filled in by Tape.backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = _as_f64(data)
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # arithmetic sugar; all routed through the module-level ops

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``grad`` is allocated at creation and always matches the value shape;
    parameters never reached by a backward pass keep their zero gradient.
    Non-trainable parameters receive no gradient and no optimizer updates.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayed backward for gradients."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``.

        Rejects non-scalar losses. Accumulators are zeroed first, then the
        records are replayed newest-to-oldest; frozen parameters are skipped
        so they keep a zero gradient.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        touched: list[Tensor] = []
        seen: set[int] = set()
        on_tape = False
        for out, inputs, _ in self._entries:
            for t in (out, *inputs):
                if id(t) not in seen:
                    seen.add(id(t))
                    touched.append(t)
            if out is loss:
                on_tape = True
        if not on_tape:
            raise ValueError("loss tensor was not produced on this tape")
        for t in touched:
            t.grad = np.zeros_like(t.data)
        loss.grad = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self._entries):
            grads = vjp(out.grad)
            for t, g in zip(inputs, grads):
                if g is None:
                    continue
                if isinstance(t, Parameter) and not t.trainable:
                    continue
                t.grad += g


def is_recording() -> bool:
    return bool(_TAPES)


def _record(out: Tensor, inputs, vjp) -> None:
    if _TAPES:
        _TAPES[-1]._entries.append((out, tuple(inputs), vjp))


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("add", a, b)
    _require_finite("add", a.data, b.data)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("sub", a, b)
    _require_finite("sub", a.data, b.data)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _coerce(a), _coerce(b)
    _broadcast_shapes("mul", a, b)
    _require_finite("mul", a.data, b.data)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    _record(out, (a, b), vjp)
    return out


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    _require_finite("matmul", a.data, b.data)
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    _record(out, (a, b), vjp)
    return out


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    _require_finite("sigmoid", x.data)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def vjp(g):
        return (g * y * (1.0 - y),)

    _record(out, (x,), vjp)
    return out


def tanh(x) -> Tensor:
    x = _coerce(x)
    _require_finite("tanh", x.data)
    y = np.tanh(x.data)
    out = Tensor(y)

    def vjp(g):
        return (g * (1.0 - y * y),)

    _record(out, (x,), vjp)
    return out


def relu(x) -> Tensor:
    x = _coerce(x)
    _require_finite("relu", x.data)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    _record(out, (x,), vjp)
    return out


def log(x) -> Tensor:
    x = _coerce(x)
    _require_finite("log", x.data)
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive (clamp first)")
    out = Tensor(np.log(x.data))

    def vjp(g):
        return (g / x.data,)

    _record(out, (x,), vjp)
    return out


def powc(x, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    x = _coerce(x)
    _require_finite("powc", x.data)
    out = Tensor(x.data ** exponent)

    def vjp(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    _record(out, (x,), vjp)
    return out


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where the input was not clamped."""
    x = _coerce(x)
    _require_finite("clamp_min", x.data)
    out = Tensor(np.maximum(x.data, floor))
    mask = x.data > floor

    def vjp(g):
        return (g * mask,)

    _record(out, (x,), vjp)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax; output is strictly positive and sums to 1 along axis."""
    x = _coerce(x)
    _require_finite("softmax", x.data)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    _record(out, (x,), vjp)
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _coerce(x)
    _require_finite("log_softmax", x.data)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)
    out = Tensor(y)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    _record(out, (x,), vjp)
    return out


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    _require_finite("sum", x.data)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).copy(),)

    _record(out, (x,), vjp)
    return out


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    _require_finite("mean", x.data)
    count = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, x.shape).copy(),)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    out = Tensor(x.data.reshape(shape))

    def vjp(g):
        return (g.reshape(x.shape),)

    _record(out, (x,), vjp)
    return out


def transpose(x, axes=None) -> Tensor:
    x = _coerce(x)
    out = Tensor(x.data.transpose(axes))
    inverse = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    _record(out, (x,), vjp)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ValueError("concat: need at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    _record(out, tuple(parts), vjp)
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _coerce(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeMismatchError(
            f"narrow: [{start}, {start + length}) out of range for extent {x.shape[axis]}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(x.data[index])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    _record(out, (x,), vjp)
    return out


def stack_rows(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = [_coerce(t) for t in tensors]
    expanded = [reshape(p, (1,) + p.shape) for p in parts]
    return concat(expanded, axis=0)


# ---------------------------------------------------------------------------
# lookup ops


def _check_ids(op: str, ids: np.ndarray, extent: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= extent):
        raise ValueError(f"{op}: index out of range [0, {extent})")


def embedding_lookup(table, ids) -> Tensor:
    """Rows of a (V, m) table selected by integer ids; gradient scatter-adds."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeMismatchError(
            f"embedding_lookup: table {table.shape} must be 2-D and ids {ids.shape} 1-D"
        )
    _check_ids("embedding_lookup", ids, table.shape[0])
    _require_finite("embedding_lookup", table.data)
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    _record(out, (table,), vjp)
    return out


def pick(x, ids) -> Tensor:
    """Per-row element selection: out[i] = x[i, ids[i]] for a 2-D input."""
    x = _coerce(x)
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or ids.shape != (x.shape[0],):
        raise ShapeMismatchError(f"pick: input {x.shape} needs ids of shape ({x.shape[0]},)")
    _check_ids("pick", ids, x.shape[1])
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, ids])

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, ids), g)
        return (gx,)

    _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# convolution, pooling, dropout


def conv2d(x, weight, bias, pad_mode: str = "zeros") -> Tensor:
    """Stride-1 cross-correlation with padding that preserves extents.

    x: (C_in, H, W); weight: (C_out, C_in, kh, kw); bias: (C_out,).
    pad_mode "zeros" is the default; "edge" replicates the border, which
    keeps spatially constant inputs exactly constant through the layer.
    """
    x, weight, bias = _coerce(x), _coerce(weight), _coerce(bias)
    if x.ndim != 3 or weight.ndim != 4 or bias.ndim != 1:
        raise ShapeMismatchError(
            f"conv2d: expected (C,H,W), (O,C,kh,kw), (O,), got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if pad_mode not in ("zeros", "edge"):
        raise ValueError(f"conv2d: unknown pad_mode {pad_mode!r}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in or bias.shape[0] != c_out:
        raise ShapeMismatchError(f"conv2d: channel mismatch, input {x.shape} vs kernel {weight.shape}")
    _require_finite("conv2d", x.data, weight.data, bias.data)
    _, h, w = x.shape
    pt, pb = (kh - 1) // 2, kh // 2
    pl, pr = (kw - 1) // 2, kw // 2
    np_mode = "constant" if pad_mode == "zeros" else "edge"
    padded = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)), mode=np_mode)
    col = np.empty((c_in, kh, kw, h, w))
    for dy in range(kh):
        for dx in range(kw):
            col[:, dy, dx] = padded[:, dy:dy + h, dx:dx + w]
    colm = col.reshape(c_in * kh * kw, h * w)
    wflat = weight.data.reshape(c_out, c_in * kh * kw)
    out = Tensor((wflat @ colm + bias.data[:, None]).reshape(c_out, h, w))

    def vjp(g):
        gflat = g.reshape(c_out, h * w)
        gb = gflat.sum(axis=1)
        gw = (gflat @ colm.T).reshape(weight.shape)
        gcol = (wflat.T @ gflat).reshape(c_in, kh, kw, h, w)
        gpad = np.zeros_like(padded)
        for dy in range(kh):
            for dx in range(kw):
                gpad[:, dy:dy + h, dx:dx + w] += gcol[:, dy, dx]
        if pad_mode == "zeros":
            gx = gpad[:, pt:pt + h, pl:pl + w]
        else:
            # replicated border cells fold their gradient back onto the
            # source edge pixels
            rows = np.clip(np.arange(h + pt + pb) - pt, 0, h - 1)
            cols = np.clip(np.arange(w + pl + pr) - pl, 0, w - 1)
            gx = np.zeros_like(x.data)
            np.add.at(
                gx,
                (np.arange(c_in)[:, None, None], rows[None, :, None], cols[None, None, :]),
                gpad,
            )
        return gx, gw, gb

    _record(out, (x, weight, bias), vjp)
    return out


def _pool_bounds(extent: int, cells: int, i: int) -> tuple[int, int]:
    lo = (i * extent) // cells
    hi = -((-(i + 1) * extent) // cells)
    return lo, hi


def adaptive_avg_pool(x, out_h: int, out_w: int) -> Tensor:
    """Average-pool a (C, H, W) map to the requested spatial extents."""
    x = _coerce(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"adaptive_avg_pool: expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h < out_h or w < out_w:
        raise ShapeMismatchError(
            f"adaptive_avg_pool: input extents {(h, w)} smaller than output {(out_h, out_w)}"
        )
    _require_finite("adaptive_avg_pool", x.data)
    y = np.empty((c, out_h, out_w))
    windows = []
    for i in range(out_h):
        y0, y1 = _pool_bounds(h, out_h, i)
        for j in range(out_w):
            x0, x1 = _pool_bounds(w, out_w, j)
            y[:, i, j] = x.data[:, y0:y1, x0:x1].mean(axis=(1, 2))
            windows.append((i, j, y0, y1, x0, x1))
    out = Tensor(y)

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, j, y0, y1, x0, x1 in windows:
            area = (y1 - y0) * (x1 - x0)
            gx[:, y0:y1, x0:x1] += g[:, i, j][:, None, None] / area
        return (gx,)

    _record(out, (x,), vjp)
    return out


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate) at train time,
    identity at eval time or rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    x = _coerce(x)
    if not training or rate == 0.0:
        return x
    _require_finite("dropout", x.data)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def vjp(g):
        return (g * mask,)

    _record(out, (x,), vjp)
    return out


def as_constant(value) -> Tensor:
    """Wrap an array as a non-parameter tensor (gradient sink, never updated)."""
    return Tensor(value)
