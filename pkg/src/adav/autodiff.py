"""Small reverse-mode autodiff over dense numpy arrays.

Only the handful of operators needed by the grid detector, the patch
attack and the defense are provided. Every op is a plain function; when
any input is tracked by a :class:`Tape`, the op appends a record holding
the saved activations and a backward closure.

Image tensors are HWC (or NHWC when batched).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


class Tensor:
    __slots__ = ("data", "tape", "ident")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.tape = tape
        self.ident = tape._new_id() if tape is not None else -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

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

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable
    saved: dict = field(default_factory=dict)
    grad_out: np.ndarray | None = None
    grad_in: tuple | None = None


class Tape:
    """Ordered log of executed ops. Single writer; do not share across threads."""

    def __init__(self):
        self.records: list[Record] = []
        self._next = 0

    def _new_id(self) -> int:
        self._next += 1
        return self._next - 1

    def watch(self, array) -> Tensor:
        """Make a leaf tensor whose gradient can be requested."""
        return Tensor(array if isinstance(array, np.ndarray) else np.asarray(array, dtype=np.float64),
                      tape=self)

    def backward(self, seed: Tensor, wrt: Sequence[Tensor], mode: GradMode = GradMode.STANDARD,
                 keep: bool = False) -> list[np.ndarray]:
        """Gradients of the scalar ``seed`` with respect to each tensor in ``wrt``.

        Guided mode differs from standard only at ``relu`` records, where the
        upstream gradient is clamped to its positive part before the usual
        input-positivity gate. The tape is cleared afterwards unless
        ``keep=True``, in which case every record also stores its upstream
        and input gradients for inspection.
        """
        if seed.tape is not self:
            raise ValueError("seed was not produced on this tape")
        if seed.data.size != 1:
            raise ShapeError(f"backward needs a scalar seed, got shape {seed.shape}")
        grads: dict[int, np.ndarray] = {seed.ident: np.ones_like(seed.data)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.ident, None)
            if g is None:
                continue
            in_grads = rec.backward(g, mode)
            if keep:
                rec.grad_out = g
                rec.grad_in = in_grads
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or inp.tape is not self:
                    continue
                if inp.ident in grads:
                    grads[inp.ident] = grads[inp.ident] + gi
                else:
                    grads[inp.ident] = gi
        out = []
        for t in wrt:
            g = grads.get(t.ident)
            out.append(np.zeros_like(t.data) if g is None else g)
        if not keep:
            self.clear()
        return out

    def clear(self) -> None:
        """Drop recorded ops (and the activations they pin)."""
        self.records = []


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    return Tensor(arr.astype(dtype, copy=False))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; bare constants adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.data.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _emit(kind, inputs, value, backward, **saved) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.records.append(Record(kind, tuple(inputs), out, backward, saved))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, mode):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def bw(g, mode):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def bw(g, mode):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", (a, b), ad * bd, bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g, mode):
        if mode is GradMode.GUIDED:
            g = np.maximum(g, 0.0)
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), bw, mask=mask)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split form keeps exp() from overflowing for large |x|
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def bw(g, mode):
        return (g * y * (1.0 - y),)

    return _emit("sigmoid", (x,), y, bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(g, mode):
        return (g * y,)

    return _emit("exp", (x,), y, bw)


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def bw(g, mode):
        return (g / xd,)

    return _emit("log", (x,), np.log(xd), bw)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g, mode):
        return (g * inside,)

    return _emit("clip", (x,), np.clip(x.data, lo, hi), bw)


# ---------------------------------------------------------------- structural

def take(x, idx) -> Tensor:
    """Basic (view) indexing, e.g. ``x[..., 4]`` or ``x[..., 0:2]``."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g, mode):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _emit("take", (x,), x.data[idx], bw)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, mode):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(xs), np.concatenate([x.data for x in xs], axis=axis), bw)


# ---------------------------------------------------------------- reductions

def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def bw(g, mode):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over ``axis`` (all elements when None)."""
    x = as_tensor(x)
    shape = x.shape
    val = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(val).size, 1)

    def bw(g, mode):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", (x,), np.asarray(val), bw)


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = _coerce(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g, mode):
        ga = g * (2.0 / n) * diff
        return ga, -ga

    return _emit("mse", (a, b), np.asarray(np.mean(diff * diff)), bw)


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # columns ordered (i, j, c) to match kernel.reshape(kh * kw * cin, cout)
    ys, xs = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    parts = [xp[:, i : i + ys : stride, j : j + xs : stride, :] for i in range(kh) for j in range(kw)]
    cols = np.concatenate(parts, axis=-1)
    return cols.reshape(xp.shape[0] * ho * wo, kh * kw * xp.shape[3])


def conv2d(x, kernel, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an HWC (or NHWC) input with a (kh, kw, Cin, Cout) kernel."""
    x = as_tensor(x)
    kernel, bias = as_tensor(kernel, x.data.dtype), as_tensor(bias, x.data.dtype)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects HWC input and 4-d kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, cout)
    if not batched:
        out = out[0]

    def bw(g, mode):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.tracked else None
        gb = g2.sum(axis=0) if bias.tracked else None
        if not x.tracked:
            return None, gk, gb
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad : pad + h, pad : pad + w, :] if pad else gxp
        return (gx if batched else gx[0]), gk, gb

    return _emit("conv2d", (x, kernel, bias), out, bw, stride=stride, pad=pad)


class Adam:
    """Adam over a list of numpy arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], maximize: bool = False) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        sign = 1.0 if maximize else -1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p += sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def maxpool2d(x, size: int) -> Tensor:
    """Stride-1 max pooling with 'same' padding; ties route to the first maximum."""
    x = as_tensor(x)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    p = size // 2
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-np.inf)
    n0, h0, w0 = xd.shape[:3]
    # separable max: rows, then columns
    rmax = xp[:, :h0]
    for i in range(1, size):
        rmax = np.maximum(rmax, xp[:, i : i + h0])
    out = rmax[:, :, :w0]
    for j in range(1, size):
        out = np.maximum(out, rmax[:, :, j : j + w0])
    shape = x.shape

    def bw(g, mode):
        gd = g if batched else g[None]
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        routed = np.zeros(out.shape, dtype=bool)
        # first offset (row-major) attaining the max gets the gradient
        for k in range(size * size):
            i, j = divmod(k, size)
            hit = (xp[:, i : i + h0, j : j + w0] == out) & ~routed
            gxp[:, i : i + h0, j : j + w0] += np.where(hit, gd, 0)
            routed |= hit
        gx = gxp[:, p : p + h0, p : p + w0]
        return ((gx if batched else gx[0]).reshape(shape),)

    return _emit("maxpool", (x,), out if batched else out[0], bw)
