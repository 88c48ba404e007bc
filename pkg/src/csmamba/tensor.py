"""Dense numpy-backed tensors with a reverse-mode recording tape.

Every primitive here is a pure function: it computes its result with numpy and,
when a :class:`Tape` is active and one of the inputs requires a gradient, records
a node holding the inputs, the output and a vector-Jacobian closure.  Calling
:meth:`Tape.backward` walks those nodes once, newest first.

Precision follows the data: float32 is the training default, and every op runs
unchanged on float64 arrays, which is what the gradient checks use.
"""

from __future__ import annotations

import contextlib
import os
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPES: list["Tape | None"] = []
_FAULTS: set[str] = set()
_DEBUG = bool(os.environ.get("CSMAMBA_DEBUG"))


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class Tensor:
    """A value-semantic n-d array of float32 or float64 scalars."""

    __slots__ = ("data", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Gradients:
    """Gradient lookup keyed by tensor identity; unreachable tensors get zeros."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager; ops executed inside are recorded.  A tape is
    single-writer and is meant to be discarded after :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        """Reverse-mode sweep from a scalar ``loss``.

        Returns a :class:`Gradients` mapping, or a list of arrays aligned with
        ``wrt`` when given.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        keep = {id(t) for t in wrt} if wrt is not None else set()
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.pop(key, None)
            if g is None:
                continue
            if key in keep:
                kept[key] = g
            in_grads = node.vjp(g)
            if node.name in _FAULTS:
                in_grads = [None if gi is None else -gi for gi in in_grads]
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                grads[k] = grads[k] + gi if k in grads else gi
        grads.update(kept)
        result = Gradients(grads)
        if wrt is None:
            return result
        return [result[t] for t in wrt]


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    return tape.backward(loss, wrt)


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


@contextlib.contextmanager
def inject_adjoint_fault(*op_names: str) -> Iterator[None]:
    """Negate the adjoint of the named primitives (negative-control hook)."""
    added = [n for n in op_names if n not in _FAULTS]
    _FAULTS.update(added)
    try:
        yield
    finally:
        _FAULTS.difference_update(added)


def record(name: str, inputs: Sequence[Tensor], data: np.ndarray, vjp) -> Tensor:
    """Wrap ``data`` as a tensor and record it on the active tape if needed."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {name}")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(name, tuple(inputs), out, vjp))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Backed by Philox; the 128-bit key packs the seed and the stream id, so
    distinct pairs give independent streams.  String stream ids are hashed
    with CRC-32, which lets parameters draw from a stream named after them.
    """

    def __init__(self, seed: int, stream: int | str = 0):
        if isinstance(stream, str):
            stream = zlib.crc32(stream.encode("utf-8"))
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.seed & 0xFFFFFFFFFFFFFFFF) | ((self.stream & 0xFFFFFFFFFFFFFFFF) << 64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(tuple(shape))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)


def randn(shape, rng: Rng, dtype=DEFAULT_DTYPE) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"randn needs a non-empty shape of positive dims, got {shape}")
    return Tensor(rng.normal(shape).astype(dtype))


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("div", (a, b), out, vjp)


def neg(x: Tensor) -> Tensor:
    return record("neg", (x,), -x.data, lambda g: (-g,))


def power(x: Tensor, p: float) -> Tensor:
    return record("power", (x,), x.data ** p, lambda g: (g * p * x.data ** (p - 1),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, vjp)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return record("sum", (x,), np.asarray(out), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return record("mean", (x,), np.asarray(out, dtype=x.dtype), vjp)


def norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the subgradient at zero is taken as zero."""
    axes = _norm_axes(axis, x.ndim)
    out = np.sqrt((x.data * x.data).sum(axis=axes))

    def vjp(g):
        o = np.expand_dims(out, axes)
        safe = np.where(o > 0, o, 1)
        return (np.where(o > 0, np.expand_dims(g, axes) * x.data / safe, 0).astype(x.dtype),)

    return record("norm", (x,), np.asarray(out, dtype=x.dtype), vjp)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    return record("clamp_min", (x,), np.where(keep, x.data, x.dtype.type(lo)),
                  lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def tabs(x: Tensor) -> Tensor:
    return record("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", (x,), out, lambda g: (g * (1 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    big = v > 20
    out[big] = v[big] + np.log1p(np.exp(-v[big]))
    out[~big] = np.log1p(np.exp(v[~big]))
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("silu", (x,), x.data * s, lambda g: (g * s * (1 + x.data * (1 - s)),))


def softplus(x: Tensor) -> Tensor:
    return record("softplus", (x,), _softplus(x.data), lambda g: (g * _sigmoid(x.data),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return record("relu", (x,), np.where(pos, x.data, 0).astype(x.dtype), lambda g: (g * pos,))


def prelu(x: Tensor, slope: Tensor, axis: int = 1) -> Tensor:
    """Leaky rectifier with a learnable slope per index of ``axis``."""
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    s = slope.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, s * x.data)

    def vjp(g):
        gx = np.where(pos, g, g * s)
        gs = None
        if slope.requires_grad:
            gs = _unbroadcast(np.where(pos, 0, g * x.data), tuple(shape)).reshape(slope.shape)
        return gx, gs

    return record("prelu", (x, slope), out, vjp)


_ELEMENTWISE = {
    "silu": silu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "tanh": tanh,
    "exp": exp,
    "relu": relu,
}


def elementwise(x: Tensor, f: str) -> Tensor:
    try:
        return _ELEMENTWISE[f](x)
    except KeyError:
        raise ValueError(f"unknown elementwise function {f!r}") from None


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def flip(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"flip axis {axis} out of range for rank {x.ndim}")
    return record("flip", (x,), np.flip(x.data, axis), lambda g: (np.flip(g, axis),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    if not _is_basic_index(idx):
        raise TypeError("only basic (slice/int/None) indexing is differentiable")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return record("getitem", (x,), x.data[idx], vjp)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return record("concat", xs, out, lambda g: np.split(g, splits, axis=axis))


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    out = np.stack([t.data for t in xs], axis=axis)
    n = len(xs)
    return record("stack", xs, out,
                  lambda g: [np.take(g, i, axis=axis) for i in range(n)])


def gather_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[..., idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    length = x.shape[-1]

    def vjp(g):
        return (_scatter(g, idx, length),)

    return record("gather_last", (x,), x.data[..., idx], vjp)


def scatter_add_last(x: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Adjoint of :func:`gather_last`: sum ``x`` into ``length`` slots at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.shape[x.ndim - idx.ndim:] != idx.shape:
        raise ShapeError(f"scatter source {x.shape} does not end with index shape {idx.shape}")
    return record("scatter_add_last", (x,), _scatter(x.data, idx, length),
                  lambda g: (g[..., idx],))


def _scatter(src: np.ndarray, idx: np.ndarray, length: int) -> np.ndarray:
    lead = src.shape[: src.ndim - idx.ndim]
    rows = int(np.prod(lead)) if lead else 1
    flat = (np.arange(rows)[:, None] * length + idx.reshape(1, -1)).ravel()
    out = np.bincount(flat, weights=src.reshape(rows, -1).ravel(), minlength=rows * length)
    return out.astype(src.dtype).reshape(lead + (length,))


# ---------------------------------------------------------------------------
# Real DFT pair.  Complex values travel as a trailing axis of size 2.
# ---------------------------------------------------------------------------


def rfft(x: Tensor) -> Tensor:
    """Real DFT over the last axis: ``[..., n] -> [..., n//2 + 1, 2]``."""
    n = x.shape[-1]
    spec = np.fft.rfft(x.data)
    out = np.stack([spec.real, spec.imag], axis=-1).astype(x.dtype)

    def vjp(g):
        y = (g[..., 0] + 1j * g[..., 1]).astype(np.result_type(g.dtype, np.complex64))
        y[..., 1:(n + 1) // 2] *= 0.5
        return ((n * np.fft.irfft(y, n=n)).astype(x.dtype),)

    return record("rfft", (x,), out, vjp)


def irfft(y: Tensor, n: int) -> Tensor:
    """Inverse of :func:`rfft` for even or odd output length ``n``."""
    if y.shape[-1] != 2 or y.shape[-2] != n // 2 + 1:
        raise ShapeError(f"irfft input {y.shape} does not match length {n}")
    out = np.fft.irfft(y.data[..., 0] + 1j * y.data[..., 1], n=n).astype(y.dtype)
    weight = np.full(n // 2 + 1, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    weight /= n

    def vjp(g):
        r = np.fft.rfft(g) * weight
        return (np.stack([r.real, r.imag], axis=-1).astype(y.dtype),)

    return record("irfft", (y,), out, vjp)


# ---------------------------------------------------------------------------
# Convolution (stride 1 cross-correlation)
# ---------------------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, groups: int = 1,
           padding: int = 0) -> Tensor:
    """``[b, cin, t] * [cout, cin/groups, k] -> [b, cout, t + 2*padding - k + 1]``."""
    b, cin, t = x.shape
    cout, cpg, k = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"channels ({cin}, {cout}) not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ShapeError(f"weight expects {cpg} input channels per group, input has {cin // groups}")
    if k > t + 2 * padding:
        raise ShapeError(f"kernel {k} longer than padded input {t + 2 * padding}")
    opg = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    tout = t + 2 * padding - k + 1
    wg = w.data.reshape(groups, opg, cpg, k)
    xg = xp.reshape(b, groups, cpg, -1)

    out = np.zeros((b, groups, opg, tout), dtype=x.dtype)
    for j in range(k):
        seg = xg[..., j:j + tout]
        if groups == 1:
            out[:, 0] += np.einsum("oi,bit->bot", wg[0, :, :, j], seg[:, 0], optimize=True)
        else:
            out += np.einsum("goi,bgit->bgot", wg[..., j], seg)
    out = out.reshape(b, cout, tout)
    if bias is not None:
        out += bias.data[:, None]

    def vjp(g):
        gg = g.reshape(b, groups, opg, tout)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xg)
            for j in range(k):
                gxp[..., j:j + tout] += np.einsum("goi,bgot->bgit", wg[..., j], gg)
            gx = gxp.reshape(b, cin, -1)[..., padding:padding + t]
        if w.requires_grad:
            gw = np.stack([np.einsum("bgot,bgit->goi", gg, xg[..., j:j + tout]) for j in range(k)],
                          axis=-1).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return record("conv1d", inputs, out, vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding=0) -> Tensor:
    """``[b, cin, h, w] * [cout, cin, kh, kw] -> [b, cout, h', w']``."""
    b, cin, h, wd = x.shape
    cout, kin, kh, kw = kernel.shape
    if kin != cin:
        raise ShapeError(f"kernel expects {kin} input channels, input has {cin}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    kd = kernel.data

    out = np.zeros((cout, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(kd[:, :, i, j], xp[:, :, i:i + ho, j:j + wo], axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[:, None, None]

    def vjp(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros((cin, b) + xp.shape[2:], dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += np.tensordot(kd[:, :, i, j], g, axes=([0], [1]))
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3)[:, :, ph:ph + h, pw:pw + wd])
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for i in range(kh):
                for j in range(kw):
                    gk[:, :, i, j] = np.tensordot(g, xp[:, :, i:i + ho, j:j + wo],
                                                  axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, axis: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis``, then apply ``gain``/``bias``."""
    axis = axis % x.ndim
    shape = [1] * x.ndim
    shape[axis] = -1
    gv = gain.data.reshape(shape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gv + bias.data.reshape(shape)
    other = tuple(a for a in range(x.ndim) if a != axis)

    def vjp(g):
        gh = g * gv
        gx = rstd * (gh - gh.mean(axis=axis, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        ggain = (g * xhat).sum(axis=other).reshape(gain.shape)
        gbias = g.sum(axis=other).reshape(bias.shape)
        return gx, ggain, gbias

    return record("layer_norm", (x, gain, bias), out.astype(x.dtype), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis, ``x @ w + b``."""
    y = matmul(x, w)
    return y if b is None else y + b
