"""Window partitioning and windowed attention kernels.

Four attention variants share one code path once keys and values have been
formed: standard window attention, permuted self-attention (keys/values
compressed to C/r^2 channels, then r x r spatial blocks folded into channels),
token reduction (strided depthwise downsampling before K/V projection) and
token sampling (random key/value subset per window).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import NumericError, ParameterError, ShapeError, Tensor

__all__ = [
    "WindowGeometry", "WindowSet", "PsaParams", "Standard", "PSA",
    "TokenReduction", "TokenSampling", "AttentionVariant",
    "make_geometry", "window_partition", "window_reverse", "spatial_to_channel",
    "build_relative_bias", "bias_table_side", "psa_attention", "standard_attention",
    "token_reduction_attention", "token_sampling_attention", "sample_key_indices",
]


# ---------------------------------------------------------------- variants

@dataclass(frozen=True)
class Standard:
    pass


@dataclass(frozen=True)
class PSA:
    r: int = 2


@dataclass(frozen=True)
class TokenReduction:
    r: int = 2


@dataclass(frozen=True)
class TokenSampling:
    t: int
    seed: int = 0


AttentionVariant = Union[Standard, PSA, TokenReduction, TokenSampling]


# ---------------------------------------------------------------- geometry

@dataclass(frozen=True)
class WindowGeometry:
    height: int
    width: int
    window: int
    shift: int = 0
    pad_bottom: int = 0
    pad_right: int = 0

    @property
    def padded(self) -> tuple[int, int]:
        return self.height + self.pad_bottom, self.width + self.pad_right

    @property
    def grid(self) -> tuple[int, int]:
        hp, wp = self.padded
        return hp // self.window, wp // self.window

    @property
    def n_windows(self) -> int:
        gy, gx = self.grid
        return gy * gx


def make_geometry(height: int, width: int, window: int, shift: int = 0) -> WindowGeometry:
    if window <= 0:
        raise ParameterError(f"window size must be positive, got {window}")
    if not 0 <= shift < window:
        raise ParameterError(f"shift {shift} outside [0, {window})")
    pb = (-height) % window
    pr = (-width) % window
    return WindowGeometry(height, width, window, shift, pb, pr)


@dataclass
class WindowSet:
    tokens: Tensor  # (batch * n_windows, 1, S*S, C)
    geometry: WindowGeometry
    batch: int


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(n)
    if pad == 0:
        return idx
    if n == 1:
        return np.zeros(n + pad, dtype=np.int64)
    return np.pad(idx, (0, pad), mode="reflect")


@lru_cache(maxsize=64)
def _partition_index(b: int, c: int, geom: WindowGeometry) -> np.ndarray:
    h, w, s = geom.height, geom.width, geom.window
    hp, wp = geom.padded
    gy, gx = geom.grid
    ry = _reflect_index(h, geom.pad_bottom)
    rx = _reflect_index(w, geom.pad_right)
    # cyclic shift: window-space position p reads padded position (p + shift) mod extent
    sy = ry[(np.arange(hp) + geom.shift) % hp]
    sx = rx[(np.arange(wp) + geom.shift) % wp]
    sy = sy.reshape(gy, s)
    sx = sx.reshape(gx, s)
    # (b, gy, gx, s, s, c)
    bi = np.arange(b)[:, None, None, None, None, None]
    yi = sy[None, :, None, :, None, None]
    xi = sx[None, None, :, None, :, None]
    ci = np.arange(c)[None, None, None, None, None, :]
    flat = ((bi * h + yi) * w + xi) * c + ci
    return flat.reshape(b * gy * gx, 1, s * s, c)


@lru_cache(maxsize=64)
def _reverse_index(b: int, c: int, geom: WindowGeometry) -> np.ndarray:
    h, w, s = geom.height, geom.width, geom.window
    hp, wp = geom.padded
    gy, gx = geom.grid
    # image pixel (y, x) sits at window-space position (y - shift) mod extent
    py = (np.arange(h) - geom.shift) % hp
    px = (np.arange(w) - geom.shift) % wp
    win = (py[:, None] // s) * gx + (px[None, :] // s)
    tok = (py[:, None] % s) * s + (px[None, :] % s)
    bi = np.arange(b)[:, None, None, None]
    flat = ((bi * gy * gx + win[None, :, :, None]) * (s * s) + tok[None, :, :, None]) * c
    return flat + np.arange(c)[None, None, None, :]


def window_partition(x: Tensor, geom: WindowGeometry) -> WindowSet:
    """Reflect-pad, cyclically shift and tile ``x`` into raster-ordered windows."""
    b, h, w, c = x.shape
    if geom.window <= 0:
        raise ParameterError(f"window size must be positive, got {geom.window}")
    if (h, w) != (geom.height, geom.width):
        raise ShapeError(f"geometry built for {geom.height}x{geom.width}, tensor is {h}x{w}")
    tokens = T.gather(x, _partition_index(b, c, geom))
    return WindowSet(tokens, geom, b)


def window_reverse(ws: WindowSet, geom: WindowGeometry | None = None) -> Tensor:
    geom = ws.geometry if geom is None else geom
    if geom != ws.geometry:
        raise ShapeError(f"window set was partitioned with {ws.geometry}, not {geom}")
    n, one, t, c = ws.tokens.shape
    if one != 1 or t != geom.window ** 2 or n != ws.batch * geom.n_windows:
        raise ShapeError(f"window tokens {ws.tokens.shape} do not match {geom}")
    return T.gather(ws.tokens, _reverse_index(ws.batch, c, geom), unique=True)


# ---------------------------------------------------------------- permutation

@lru_cache(maxsize=64)
def _fold_index(n: int, s: int, r: int, c_in: int) -> np.ndarray:
    sr = s // r
    # output (n, 1, sr*sr, r*r*c_in); channel = c_in * (r*dy + dx) + cc
    ni = np.arange(n)[:, None, None, None, None, None]
    ky = np.arange(sr)[None, :, None, None, None, None]
    kx = np.arange(sr)[None, None, :, None, None, None]
    dy = np.arange(r)[None, None, None, :, None, None]
    dx = np.arange(r)[None, None, None, None, :, None]
    cc = np.arange(c_in)[None, None, None, None, None, :]
    tok = (ky * r + dy) * s + (kx * r + dx)
    flat = (ni * s * s + tok) * c_in + cc
    return flat.reshape(n, 1, sr * sr, r * r * c_in)


def spatial_to_channel(w: Tensor, r: int, window: int) -> Tensor:
    """Fold each r x r block of window tokens into the channel axis.

    ``w`` is (n, 1, S*S, C/r^2); the result is (n, 1, (S/r)^2, C), with the
    same channel layout as ``pixel_unshuffle``.
    """
    n, one, t, c_in = w.shape
    if r < 1 or window % r:
        raise ParameterError(f"reduction {r} must divide window {window}")
    if one != 1 or t != window * window:
        raise ShapeError(f"expected (n, 1, {window * window}, C), got {w.shape}")
    return T.gather(w, _fold_index(n, window, r, c_in), unique=True)


# ---------------------------------------------------------------- relative bias

def bias_table_side(window: int, r: int = 1) -> int:
    return 2 * (window // r) - 1


@lru_cache(maxsize=64)
def _bias_interp(window: int, r: int, heads: int):
    s, sr = window, window // r
    side = 2 * sr - 1
    q = np.arange(s)
    centers = (np.arange(sr) + 0.5) * r - 0.5
    # displacement query - key, measured in key-grid units, clamped to the table span
    d = (q[:, None] - centers[None, :]) / r
    d = np.clip(d + (sr - 1), 0.0, side - 1)
    lo = np.minimum(np.floor(d).astype(np.int64), side - 2) if side > 1 else np.zeros_like(d, dtype=np.int64)
    fr = d - lo
    if side == 1:
        fr = np.zeros_like(d)
    # per axis (s, sr): two taps with weights (1-fr, fr)
    hi = np.minimum(lo + 1, side - 1)
    ty = np.stack([lo, hi], axis=-1)
    wy = np.stack([1.0 - fr, fr], axis=-1)
    # combine y and x: query (qy, qx), key (ky, kx)
    iy = ty[:, None, :, None, :, None]
    ix = ty[None, :, None, :, None, :]
    wgt = wy[:, None, :, None, :, None] * wy[None, :, None, :, None, :]
    idx = iy * side + ix  # (s, s, sr, sr, 2, 2)
    idx = idx.reshape(s * s, sr * sr, 4)
    wgt = wgt.reshape(s * s, sr * sr, 4)
    hoff = (np.arange(heads) * side * side)[:, None, None, None]
    index = (idx[None] + hoff)[None]
    weights = np.broadcast_to(wgt[None, None], index.shape)
    return index, np.ascontiguousarray(weights)


def build_relative_bias(table: Tensor, window: int, r: int, heads: int) -> Tensor:
    """Interpolate a (1, 1, heads, side^2) table into a (1, heads, S^2, (S/r)^2) bias.

    Keys sit at the centres of r x r blocks on the query grid. Displacements are
    measured in key-grid units and read from the table bilinearly; for r = 1
    this is the usual integer-offset lookup.
    """
    if r < 1 or window % r:
        raise ParameterError(f"reduction {r} must divide window {window}")
    side = bias_table_side(window, r)
    if table.shape != (1, 1, heads, side * side):
        raise ShapeError(f"bias table {table.shape} != {(1, 1, heads, side * side)}")
    index, weights = _bias_interp(window, r, heads)
    return T.weighted_gather(table, index, weights)


# ---------------------------------------------------------------- attention

@dataclass
class PsaParams:
    """Projection weights for one attention layer.

    Weights are (1, 1, Cin, Cout), biases (1, 1, 1, Cout). For PSA the key and
    value projections output C/r^2 channels; for the other variants C.
    ``reduce_w``/``reduce_b`` hold the strided depthwise kernel of token reduction.
    """
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    table: Tensor
    heads: int
    r: int = 1
    reduce_w: Tensor | None = None
    reduce_b: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.wq.shape[3]

    def validate(self):
        c = self.channels
        if c % self.heads:
            raise ParameterError(f"channels {c} not divisible by heads {self.heads}")
        if c % (self.r * self.r):
            raise ParameterError(f"channels {c} not divisible by r^2={self.r * self.r}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, _, t, c = x.shape
    return T.transpose(T.reshape(x, (n, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, t, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, 1, t, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None, p: PsaParams,
            name: str, return_weights: bool):
    d = q.shape[3]
    try:
        scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d))
        if bias is not None:
            scores = T.add_broadcast(scores, bias)
        attn = T.softmax_lastdim(scores)
    except NumericError as exc:
        raise NumericError(f"{name}: {exc}") from None
    out = T.linear(_merge_heads(T.matmul(attn, v)), p.wo, p.bo)
    return (out, attn) if return_weights else out


def _check_tokens(w: Tensor, window: int):
    if w.shape[1] != 1 or w.shape[2] != window * window:
        raise ShapeError(f"expected window tokens (n, 1, {window * window}, C), got {w.shape}")


def psa_attention(w: Tensor, p: PsaParams, bias: Tensor | None, window: int,
                  name: str = "psa", return_weights: bool = False):
    """Permuted self-attention over window tokens (n, 1, S^2, C)."""
    p.validate()
    _check_tokens(w, window)
    q = _split_heads(T.linear(w, p.wq, p.bq), p.heads)
    k = _split_heads(spatial_to_channel(T.linear(w, p.wk, p.bk), p.r, window), p.heads)
    v = _split_heads(spatial_to_channel(T.linear(w, p.wv, p.bv), p.r, window), p.heads)
    return _attend(q, k, v, bias, p, name, return_weights)


def standard_attention(w: Tensor, p: PsaParams, bias: Tensor | None, window: int,
                       name: str = "wmsa", return_weights: bool = False):
    p.validate()
    _check_tokens(w, window)
    q = _split_heads(T.linear(w, p.wq, p.bq), p.heads)
    k = _split_heads(T.linear(w, p.wk, p.bk), p.heads)
    v = _split_heads(T.linear(w, p.wv, p.bv), p.heads)
    return _attend(q, k, v, bias, p, name, return_weights)


def token_reduction_attention(w: Tensor, p: PsaParams, bias: Tensor | None, window: int,
                              name: str = "token_reduction", return_weights: bool = False):
    """Keys/values come from a stride-r depthwise downsampling of the window tokens."""
    p.validate()
    _check_tokens(w, window)
    r = p.r
    if window % r:
        raise ParameterError(f"reduction {r} must divide window {window}")
    n, _, _, c = w.shape
    img = T.reshape(w, (n, window, window, c))
    red = T.strided_depthwise(img, p.reduce_w, p.reduce_b, r)
    red = T.reshape(red, (n, 1, (window // r) ** 2, c))
    q = _split_heads(T.linear(w, p.wq, p.bq), p.heads)
    k = _split_heads(T.linear(red, p.wk, p.bk), p.heads)
    v = _split_heads(T.linear(red, p.wv, p.bv), p.heads)
    return _attend(q, k, v, bias, p, name, return_weights)


def sample_key_indices(n_windows: int, window: int, t: int, seed: int) -> np.ndarray:
    """Per-window key subsets of size t^2 drawn without replacement, shape (n_windows, t^2)."""
    if not 0 < t <= window:
        raise ParameterError(f"token sampling needs 0 < T <= S, got T={t}, S={window}")
    rng = np.random.default_rng(seed)
    return np.stack([rng.choice(window * window, t * t, replace=False) for _ in range(n_windows)])


def token_sampling_attention(w: Tensor, p: PsaParams, bias: Tensor | None, window: int, t: int,
                             seed: int, name: str = "token_sampling", return_weights: bool = False):
    """Attention against t^2 randomly sampled keys/values per window.

    ``bias`` is the full (1, heads, S^2, S^2) relative bias; the sampled
    columns are selected per window.
    """
    p.validate()
    _check_tokens(w, window)
    n, _, s2, c = w.shape
    keys = sample_key_indices(n, window, t, seed)  # (n, t2)
    t2 = t * t
    k_full = T.linear(w, p.wk, p.bk)
    v_full = T.linear(w, p.wv, p.bv)
    sel = ((np.arange(n)[:, None, None] * s2 + keys[:, :, None]) * c + np.arange(c)[None, None, :])
    sel = sel.reshape(n, 1, t2, c)
    q = _split_heads(T.linear(w, p.wq, p.bq), p.heads)
    k = _split_heads(T.gather(k_full, sel), p.heads)
    v = _split_heads(T.gather(v_full, sel), p.heads)
    if bias is not None:
        h = p.heads
        bidx = (np.arange(h)[None, :, None, None] * s2 + np.arange(s2)[None, None, :, None]) * s2 \
            + keys[:, None, None, :]
        bias = T.gather(bias, bidx)
    return _attend(q, k, v, bias, p, name, return_weights)
