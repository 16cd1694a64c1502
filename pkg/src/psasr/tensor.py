"""Minimal 4-axis tensor engine with tape-based reverse-mode differentiation.

Every tensor carries exactly four extents. Activations use the
(batch, height, width, channel) layout; attention internals reuse the same
four axes as (windows, heads, tokens, features). Matrix-style ops act on the
last two axes and batch over the first two.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "ParameterError", "NumericError",
    "precision", "default_dtype", "tensor", "zeros",
    "matmul", "swap_last", "softmax_lastdim", "layer_norm", "conv2d",
    "strided_depthwise", "pixel_shuffle", "pixel_unshuffle", "gelu",
    "leaky_relu", "linear", "add", "scale", "reshape", "transpose",
    "gather", "weighted_gather", "add_broadcast", "abs_mean_diff",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand extents disagree."""


class ParameterError(ValueError):
    """Raised for invalid op parameters (kernel sizes, factors, eps...)."""


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tape:
    """Records differentiable ops while active.

    Usage::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    _active: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.remove(self)
        return False

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None

    def record(self, out, inputs, backward):
        self.records.append((out, inputs, backward))

    def backward(self, loss: "Tensor", seed: np.ndarray | None = None):
        if not self.records:
            return
        loss.grad = np.ones_like(loss.data) if seed is None else seed.astype(loss.data.dtype)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g.astype(t.data.dtype, copy=True)
                else:
                    t.grad += g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        if arr.ndim != 4:
            raise ShapeError(f"tensor needs 4 extents, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__


def tensor(data, requires_grad=False, name=None) -> Tensor:
    arr = np.asarray(data, dtype=default_dtype())
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor(arr, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad, name)


def _finish(out: np.ndarray, inputs: Sequence[Tensor], backward, opname: str) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{opname}: non-finite values in output")
    res = Tensor(out)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        tape.record(res, tuple(inputs), backward)
    return res


def _shape_err(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes; batch axes must match or be 1."""
    A, B = a.data, b.data
    if A.shape[-1] != B.shape[-2]:
        raise _shape_err("matmul", A.shape, B.shape)
    for da, db in zip(A.shape[:2], B.shape[:2]):
        if da != db and 1 not in (da, db):
            raise _shape_err("matmul", A.shape, B.shape)
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _finish(out, (a, b), backward, "matmul")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def swap_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 1, 3, 2))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _finish(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) != 4 or math.prod(shape) != x.data.size:
        raise _shape_err("reshape", x.shape, shape)
    src = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the channel axis. weight is (1, 1, Cin, Cout), bias (1, 1, 1, Cout)."""
    X, W = x.data, weight.data
    cin, cout = W.shape[2], W.shape[3]
    if X.shape[-1] != cin or W.shape[:2] != (1, 1):
        raise _shape_err("linear", X.shape, W.shape)
    w2 = W[0, 0]
    out = X @ w2
    if bias is not None:
        if bias.shape != (1, 1, 1, cout):
            raise _shape_err("linear bias", bias.shape, (1, 1, 1, cout))
        out = out + bias.data
    flat_x = X.reshape(-1, cin)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w2.T).reshape(X.shape)
        gw = (flat_x.T @ g2)[None, None]
        gb = g2.sum(axis=0).reshape(1, 1, 1, cout) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish(out, inputs, backward, "linear")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_err("add", a.shape, b.shape)
    return _finish(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """a + b where b may have extent 1 on any axis."""
    for da, db in zip(a.shape, b.shape):
        if db != da and db != 1:
            raise _shape_err("add_broadcast", a.shape, b.shape)
    return _finish(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)), "add_broadcast")


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return _finish(x.data * x.data.dtype.type(k), (x,), lambda g: (g * k,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / math.sqrt(2.0)))
    out = (X * cdf).astype(X.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * X * X) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + X * pdf)).astype(X.dtype),

    return _finish(out, (x,), backward, "gelu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    X = x.data
    mask = X > 0
    out = np.where(mask, X, X * X.dtype.type(slope))
    return _finish(out, (x,), lambda g: (np.where(mask, g, g * slope),), "leaky_relu")


def softmax_lastdim(x: Tensor) -> Tensor:
    X = x.data
    if not np.all(np.isfinite(X)):
        raise NumericError("softmax: non-finite scores")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return s * (g - (g * s).sum(axis=-1, keepdims=True)),

    return _finish(s, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each token over the channel axis, then apply per-channel affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    X = x.data
    c = X.shape[-1]
    if gamma.shape != (1, 1, 1, c) or beta.shape != (1, 1, 1, c):
        raise _shape_err("layer_norm", X.shape, gamma.shape)
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, c).sum(axis=0).reshape(1, 1, 1, c)
        gb = g.reshape(-1, c).sum(axis=0).reshape(1, 1, 1, c)
        return gx, gg, gb

    return _finish(out.astype(X.dtype), (x, gamma, beta), backward, "layer_norm")


def abs_mean_diff(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error as a (1,1,1,1) tensor; subgradient 0 at ties."""
    if pred.shape != target.shape:
        raise _shape_err("l1", pred.shape, target.shape)
    d = pred.data - target.data
    n = d.size
    out = np.abs(d).mean(dtype=np.float64).astype(d.dtype).reshape(1, 1, 1, 1)

    def backward(g):
        s = np.sign(d) * (g.reshape(()) / n)
        return s, -s

    return _finish(out, (pred, target), backward, "l1")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, depthwise: bool = False) -> Tensor:
    """Stride-1 'same' convolution with zero padding, NHWC layout.

    weight is (kh, kw, Cin, Cout), or (kh, kw, 1, C) when depthwise.
    """
    X, W = x.data, weight.data
    kh, kw, wcin, cout = W.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"conv2d: kernel must be odd, got {kh}x{kw}")
    b, h, w, cin = X.shape
    if depthwise:
        if wcin != 1 or cout != cin:
            raise _shape_err("depthwise conv2d", X.shape, W.shape)
    elif wcin != cin:
        raise _shape_err("conv2d", X.shape, W.shape)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(X, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # patches: (b, h, w, cin, kh, kw)
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    if depthwise:
        out = np.einsum("bhwcij,ijc->bhwc", patches, W[:, :, 0, :], optimize=True)
    else:
        out = np.tensordot(patches, W, axes=([4, 5, 3], [0, 1, 2]))
    if bias is not None:
        out = out + bias.data.reshape(cout)

    def backward(g):
        if depthwise:
            gw = np.einsum("bhwcij,bhwc->ijc", patches, g, optimize=True)[:, :, None, :]
            # input grad: correlate g with flipped kernel
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gpatch = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gx = np.einsum("bhwcij,ijc->bhwc", gpatch, W[::-1, ::-1, 0, :], optimize=True)
        else:
            gw = np.tensordot(patches, g, axes=([0, 1, 2], [0, 1, 2]))  # cin, kh, kw, cout
            gw = np.transpose(gw, (1, 2, 0, 3))
            gp = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gpatch = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))
            wf = W[::-1, ::-1]  # (kh, kw, cin, cout)
            gx = np.tensordot(gpatch, wf, axes=([4, 5, 3], [0, 1, 3]))
        gb = g.reshape(-1, cout).sum(axis=0).reshape(bias.shape) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish(out.astype(X.dtype), inputs, backward, "conv2d")


def strided_depthwise(x: Tensor, weight: Tensor, bias: Tensor | None, r: int) -> Tensor:
    """Depthwise r x r convolution with stride r (no padding). weight is (r, r, 1, C)."""
    X, W = x.data, weight.data
    b, h, w, c = X.shape
    if h % r or w % r:
        raise ParameterError(f"strided_depthwise: factor {r} does not divide {h}x{w}")
    if W.shape != (r, r, 1, c):
        raise _shape_err("strided_depthwise", X.shape, W.shape)
    blocks = X.reshape(b, h // r, r, w // r, r, c)
    out = np.einsum("bhiwjc,ijc->bhwc", blocks, W[:, :, 0, :], optimize=True)
    if bias is not None:
        out = out + bias.data.reshape(c)

    def backward(g):
        gx = np.einsum("bhwc,ijc->bhiwjc", g, W[:, :, 0, :], optimize=True).reshape(X.shape)
        gw = np.einsum("bhiwjc,bhwc->ijc", blocks, g, optimize=True)[:, :, None, :]
        gb = g.reshape(-1, c).sum(axis=0).reshape(1, 1, 1, c) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish(out.astype(X.dtype), inputs, backward, "strided_depthwise")


# ---------------------------------------------------------------- rearrangement

def _shuffle(X: np.ndarray, s: int) -> np.ndarray:
    b, h, w, c = X.shape
    cp = c // (s * s)
    # channel index = cp * (s*dy + dx) + c'
    y = X.reshape(b, h, w, s, s, cp).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, h * s, w * s, cp)


def _unshuffle(X: np.ndarray, s: int) -> np.ndarray:
    b, h, w, c = X.shape
    y = X.reshape(b, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(b, h // s, w // s, s * s * c)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    c = x.shape[3]
    if s < 1 or c % (s * s):
        raise ParameterError(f"pixel_shuffle: {c} channels not divisible by {s}^2")
    out = np.ascontiguousarray(_shuffle(x.data, s))
    return _finish(out, (x,), lambda g: (_unshuffle(g, s),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    _, h, w, _ = x.shape
    if s < 1 or h % s or w % s:
        raise ParameterError(f"pixel_unshuffle: extents {h}x{w} not divisible by {s}")
    out = np.ascontiguousarray(_unshuffle(x.data, s))
    return _finish(out, (x,), lambda g: (_shuffle(g, s),), "pixel_unshuffle")


def gather(x: Tensor, index: np.ndarray, unique: bool = False) -> Tensor:
    """out.flat[i] = x.flat[index.flat[i]]; output takes index's (4-axis) shape.

    ``unique`` promises that no source element is read twice, which allows a
    cheaper scatter in the backward pass.
    """
    if index.ndim != 4:
        raise ShapeError(f"gather: index must have 4 axes, got {index.shape}")
    flat = x.data.reshape(-1)
    out = flat[index]
    n = flat.size
    src = x.shape

    def backward(g):
        if unique:
            gx = np.zeros(n, dtype=g.dtype)
            gx[index.reshape(-1)] = g.reshape(-1)
        else:
            gx = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=n).astype(g.dtype)
        return gx.reshape(src),

    return _finish(out, (x,), backward, "gather")


def weighted_gather(x: Tensor, index: np.ndarray, weights: np.ndarray) -> Tensor:
    """out[...] = sum_k weights[..., k] * x.flat[index[..., k]].

    index and weights share a 5-axis shape whose first four axes give the output shape.
    """
    flat = x.data.reshape(-1)
    w = weights.astype(flat.dtype)
    out = (flat[index] * w).sum(axis=-1)
    n = flat.size
    src = x.shape

    def backward(g):
        contrib = (g[..., None] * w).reshape(-1)
        return np.bincount(index.reshape(-1), weights=contrib, minlength=n).astype(g.dtype).reshape(src),

    return _finish(out, (x,), backward, "weighted_gather")


# ---------------------------------------------------------------- gradient checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-6,
               wrt: Sequence[int] | None = None, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Inputs are promoted to float64. Returns the max over checked coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|). ``max_coords`` limits
    the number of coordinates sampled per input.
    """
    xs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    wrt = range(len(xs)) if wrt is None else wrt
    with precision(np.float64):
        with Tape() as tape:
            out = f(*xs)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: function must return a scalar, got shape {out.shape}")
        tape.backward(out)
        worst = 0.0
        for i in wrt:
            x = xs[i]
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
            for j in coords:
                orig = flat[j]
                flat[j] = orig + step
                fp = float(f(*xs).data.reshape(()))
                flat[j] = orig - step
                fm = float(f(*xs).data.reshape(()))
                flat[j] = orig
                num = (fp - fm) / (2 * step)
                a = float(analytic.reshape(-1)[j])
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
