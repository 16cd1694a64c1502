"""Permuted self-attention network: blocks, groups, and the full model."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import (
    PSA, AttentionVariant, PsaParams, Standard, TokenReduction, TokenSampling,
    bias_table_side, build_relative_bias, make_geometry, psa_attention, standard_attention,
    token_reduction_attention, token_sampling_attention, window_partition, window_reverse,
)
from .tensor import NumericError, ParameterError, Tensor

__all__ = [
    "ModelConfig", "ParameterStore", "Model", "PRESETS", "preset",
    "build_model", "model_forward", "convffn_forward", "pab_forward", "group_forward",
    "self_ensemble_infer", "block_windows", "upscale_image",
]

UPSAMPLERS = ("pixelshuffle", "direct")


@dataclass(frozen=True)
class ModelConfig:
    groups: int = 6
    blocks: int = 6
    channels: int = 180
    window: int = 24
    heads: int = 6
    scale: int = 2
    variant: AttentionVariant = PSA(2)
    convffn_kernel: int = 5
    ffn_ratio: float = 2.0
    small_window: int | None = None
    shift: bool = True
    upsampler: str = "pixelshuffle"
    upsample_features: int = 64
    in_channels: int = 3

    @property
    def r(self) -> int:
        v = self.variant
        if isinstance(v, (PSA, TokenReduction)):
            return v.r
        if isinstance(v, TokenSampling):
            return max(1, self.window // max(v.t, 1))
        return 1

    @property
    def hidden(self) -> int:
        return int(self.channels * self.ffn_ratio)

    @property
    def pad_multiple(self) -> int:
        if self.small_window:
            return math.lcm(self.window, self.small_window)
        return self.window

    def validation_errors(self) -> list[str]:
        errs = []
        for fname in ("groups", "blocks", "channels", "window", "heads", "in_channels"):
            if getattr(self, fname) < 1:
                errs.append(f"{fname} must be >= 1")
        if self.scale not in (2, 3, 4):
            errs.append(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.heads >= 1 and self.channels % self.heads:
            errs.append(f"channels {self.channels} not divisible by heads {self.heads}")
        k = self.convffn_kernel
        if k != 0 and (k < 3 or k % 2 == 0):
            errs.append(f"convffn kernel must be 0 or odd >= 3, got {k}")
        if self.ffn_ratio <= 0 or self.hidden < 1:
            errs.append("ffn_ratio must give at least one hidden channel")
        if self.upsampler not in UPSAMPLERS:
            errs.append(f"upsampler must be one of {UPSAMPLERS}")
        v = self.variant
        windows = [self.window] + ([self.small_window] if self.small_window else [])
        if isinstance(v, (PSA, TokenReduction)):
            if v.r < 1:
                errs.append("reduction factor must be >= 1")
            else:
                for s in windows:
                    if s % v.r:
                        errs.append(f"reduction {v.r} does not divide window {s}")
                if isinstance(v, PSA) and self.channels % (v.r * v.r):
                    errs.append(f"channels {self.channels} not divisible by r^2={v.r * v.r}")
        elif isinstance(v, TokenSampling):
            if not 0 < v.t <= min(windows):
                errs.append(f"token sampling needs 0 < T <= S, got T={v.t}")
        elif not isinstance(v, Standard):
            errs.append(f"unknown attention variant {v!r}")
        if self.small_window is not None and self.small_window < 1:
            errs.append("small_window must be >= 1")
        return errs

    def validate(self) -> "ModelConfig":
        errs = self.validation_errors()
        if errs:
            raise ParameterError("invalid model config: " + "; ".join(errs))
        return self


PRESETS = {
    "classical": ModelConfig(6, 6, 180, 24, 6, 2, PSA(2), 5, 2.0, upsampler="pixelshuffle"),
    "light": ModelConfig(4, 6, 60, 16, 6, 2, PSA(2), 5, 2.0, upsampler="direct"),
    "tiny": ModelConfig(2, 2, 32, 8, 4, 2, PSA(2), 5, 2.0, upsampler="direct"),
    "v2": ModelConfig(6, 6, 180, 36, 6, 2, PSA(2), 5, 2.0, small_window=12, upsampler="pixelshuffle"),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides).validate()


def block_windows(cfg: ModelConfig) -> list[tuple[int, int]]:
    """(window, shift) for every block of a group.

    With mixed windows the sequence is small, large, large, repeated.
    Shifts alternate 0, S/2 by block position.
    """
    out = []
    for j in range(cfg.blocks):
        s = cfg.small_window if cfg.small_window and j % 3 == 0 else cfg.window
        shift = s // 2 if cfg.shift and j % 2 == 1 else 0
        out.append((s, shift))
    return out


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Ordered, named learnable tensors plus optimizer moments."""

    def __init__(self, params: "OrderedDict[str, Tensor] | None" = None):
        self.params: OrderedDict[str, Tensor] = OrderedDict() if params is None else params
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self.params.items():
            out.add(k, t.data.astype(dtype))
        return out


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(np.float32)


def _build_store(cfg: ModelConfig, seed: int) -> ParameterStore:
    rng = np.random.default_rng(seed)
    st = ParameterStore()
    c, hid, h = cfg.channels, cfg.hidden, cfg.heads

    def w(name, *shape):
        st.add(name, _trunc_normal(rng, shape))

    def zeros(name, *shape):
        st.add(name, np.zeros(shape, np.float32))

    def ones(name, *shape):
        st.add(name, np.ones(shape, np.float32))

    def conv(name, k, cin, cout, depthwise=False):
        w(f"{name}.weight", k, k, 1 if depthwise else cin, cout)
        zeros(f"{name}.bias", 1, 1, 1, cout)

    def lin(name, cin, cout):
        w(f"{name}.weight", 1, 1, cin, cout)
        zeros(f"{name}.bias", 1, 1, 1, cout)

    v = cfg.variant
    conv("embed", 3, cfg.in_channels, c)
    for gi in range(cfg.groups):
        for bi, (s, _) in enumerate(block_windows(cfg)):
            p = f"groups.{gi}.blocks.{bi}"
            ones(f"{p}.norm1.gamma", 1, 1, 1, c)
            zeros(f"{p}.norm1.beta", 1, 1, 1, c)
            kv = c // (v.r * v.r) if isinstance(v, PSA) else c
            lin(f"{p}.attn.q", c, c)
            lin(f"{p}.attn.k", c, kv)
            lin(f"{p}.attn.v", c, kv)
            lin(f"{p}.attn.proj", c, c)
            if isinstance(v, TokenReduction):
                w(f"{p}.attn.reduce.weight", v.r, v.r, 1, c)
                zeros(f"{p}.attn.reduce.bias", 1, 1, 1, c)
            tr = v.r if isinstance(v, (PSA, TokenReduction)) else 1
            side = bias_table_side(s, tr)
            w(f"{p}.attn.bias_table", 1, 1, h, side * side)
            ones(f"{p}.norm2.gamma", 1, 1, 1, c)
            zeros(f"{p}.norm2.beta", 1, 1, 1, c)
            lin(f"{p}.ffn.fc1", c, hid)
            if cfg.convffn_kernel:
                conv(f"{p}.ffn.dw", cfg.convffn_kernel, hid, hid, depthwise=True)
            lin(f"{p}.ffn.fc2", hid, c)
        conv(f"groups.{gi}.conv", 3, c, c)
    conv("body_conv", 3, c, c)
    if cfg.upsampler == "direct":
        conv("recon.conv", 3, c, cfg.in_channels * cfg.scale ** 2)
    else:
        f = cfg.upsample_features
        conv("recon.conv_before", 3, c, f)
        for i, s in enumerate(_shuffle_stages(cfg.scale)):
            conv(f"recon.up.{i}", 3, f, f * s * s)
        conv("recon.conv_last", 3, f, cfg.in_channels)
    return st


def _shuffle_stages(scale: int) -> list[int]:
    if scale == 4:
        return [2, 2]
    return [scale]


@dataclass
class Model:
    cfg: ModelConfig
    store: ParameterStore
    features: dict[str, np.ndarray] = field(default_factory=dict)
    collect: bool = False


def build_model(cfg: ModelConfig, seed: int = 0) -> tuple[ParameterStore, Model]:
    cfg.validate()
    store = _build_store(cfg, seed)
    return store, Model(cfg, store)


# ---------------------------------------------------------------- forward

def _attn_params(st: ParameterStore, prefix: str, cfg: ModelConfig) -> PsaParams:
    v = cfg.variant
    g = st.params
    return PsaParams(
        wq=g[f"{prefix}.q.weight"], bq=g[f"{prefix}.q.bias"],
        wk=g[f"{prefix}.k.weight"], bk=g[f"{prefix}.k.bias"],
        wv=g[f"{prefix}.v.weight"], bv=g[f"{prefix}.v.bias"],
        wo=g[f"{prefix}.proj.weight"], bo=g[f"{prefix}.proj.bias"],
        table=g[f"{prefix}.bias_table"], heads=cfg.heads,
        r=v.r if isinstance(v, (PSA, TokenReduction)) else 1,
        reduce_w=g.get(f"{prefix}.reduce.weight"), reduce_b=g.get(f"{prefix}.reduce.bias"),
    )


def _window_attention(x: Tensor, p: PsaParams, cfg: ModelConfig, window: int, shift: int,
                      name: str, seed: int = 0) -> Tensor:
    b, h, w, c = x.shape
    geom = make_geometry(h, w, window, shift)
    ws = window_partition(x, geom)
    v = cfg.variant
    if isinstance(v, TokenSampling):
        bias = build_relative_bias(p.table, window, 1, p.heads)
        out = token_sampling_attention(ws.tokens, p, bias, window, min(v.t, window), seed, name=name)
    else:
        bias = build_relative_bias(p.table, window, p.r, p.heads)
        if isinstance(v, PSA):
            out = psa_attention(ws.tokens, p, bias, window, name=name)
        elif isinstance(v, TokenReduction):
            out = token_reduction_attention(ws.tokens, p, bias, window, name=name)
        else:
            out = standard_attention(ws.tokens, p, bias, window, name=name)
    ws.tokens = out
    return window_reverse(ws)


def convffn_forward(x: Tensor, st: ParameterStore, prefix: str, kernel: int) -> Tensor:
    """fc2(a + dwconv(a)) with a = gelu(fc1(x)); kernel 0 drops the depthwise branch."""
    if kernel and (kernel < 3 or kernel % 2 == 0):
        raise ParameterError(f"convffn kernel must be odd >= 3, got {kernel}")
    g = st.params
    a = T.gelu(T.linear(x, g[f"{prefix}.fc1.weight"], g[f"{prefix}.fc1.bias"]))
    if kernel:
        a = T.add(a, T.conv2d(a, g[f"{prefix}.dw.weight"], g[f"{prefix}.dw.bias"], depthwise=True))
    return T.linear(a, g[f"{prefix}.fc2.weight"], g[f"{prefix}.fc2.bias"])


def pab_forward(x: Tensor, st: ParameterStore, prefix: str, cfg: ModelConfig,
                window: int | None = None, shift: int = 0, seed: int = 0) -> Tensor:
    """Pre-norm residual block: attention then ConvFFN."""
    window = cfg.window if window is None else window
    g = st.params
    try:
        y = T.layer_norm(x, g[f"{prefix}.norm1.gamma"], g[f"{prefix}.norm1.beta"])
        y = _window_attention(y, _attn_params(st, f"{prefix}.attn", cfg), cfg, window, shift,
                              f"{prefix}.attn", seed)
        x = T.add(x, y)
        y = T.layer_norm(x, g[f"{prefix}.norm2.gamma"], g[f"{prefix}.norm2.beta"])
        y = convffn_forward(y, st, f"{prefix}.ffn", cfg.convffn_kernel)
        return T.add(x, y)
    except NumericError as exc:
        msg = str(exc)
        raise NumericError(msg if msg.startswith(prefix) else f"{prefix}: {msg}") from None


def group_forward(x: Tensor, st: ParameterStore, gi: int, cfg: ModelConfig,
                  features: dict | None = None) -> Tensor:
    y = x
    seed0 = cfg.variant.seed if isinstance(cfg.variant, TokenSampling) else 0
    for bi, (s, shift) in enumerate(block_windows(cfg)):
        y = pab_forward(y, st, f"groups.{gi}.blocks.{bi}", cfg, s, shift,
                        seed=seed0 + gi * cfg.blocks + bi)
        if features is not None:
            features[f"groups.{gi}.blocks.{bi}"] = y.data.copy()
    g = st.params
    y = T.conv2d(y, g[f"groups.{gi}.conv.weight"], g[f"groups.{gi}.conv.bias"])
    return T.add(x, y)


def _reflect_pad_index(b: int, h: int, w: int, c: int, m: int) -> np.ndarray:
    ry = np.pad(np.arange(h), (0, (-h) % m), mode="reflect") if h > 1 else np.zeros(h + (-h) % m, np.int64)
    rx = np.pad(np.arange(w), (0, (-w) % m), mode="reflect") if w > 1 else np.zeros(w + (-w) % m, np.int64)
    bi = np.arange(b)[:, None, None, None]
    return ((bi * h + ry[None, :, None, None]) * w + rx[None, None, :, None]) * c + np.arange(c)


def _crop_index(b: int, h: int, w: int, c: int, oh: int, ow: int) -> np.ndarray:
    bi = np.arange(b)[:, None, None, None]
    return ((bi * h + np.arange(oh)[None, :, None, None]) * w + np.arange(ow)[None, None, :, None]) * c \
        + np.arange(c)


def model_forward(model: Model, lr: Tensor) -> Tensor:
    """Super-resolve a (B, H, W, 3) batch in [0, 1]; returns (B, sH, sW, 3), unclamped."""
    cfg, st = model.cfg, model.store
    g = st.params
    b, h, w, cin = lr.shape
    if cin != cfg.in_channels:
        raise ParameterError(f"expected {cfg.in_channels}-channel input, got {cin}")
    m = cfg.pad_multiple
    x = lr
    if h % m or w % m:
        x = T.gather(lr, _reflect_pad_index(b, h, w, cin, m))
    feats = model.features if model.collect else None
    fp = T.conv2d(x, g["embed.weight"], g["embed.bias"])
    y = fp
    for gi in range(cfg.groups):
        y = group_forward(y, st, gi, cfg, feats)
    fe = T.conv2d(y, g["body_conv.weight"], g["body_conv.bias"])
    y = T.add(fe, fp)
    if cfg.upsampler == "direct":
        y = T.pixel_shuffle(T.conv2d(y, g["recon.conv.weight"], g["recon.conv.bias"]), cfg.scale)
    else:
        y = T.leaky_relu(T.conv2d(y, g["recon.conv_before.weight"], g["recon.conv_before.bias"]), 0.01)
        for i, s in enumerate(_shuffle_stages(cfg.scale)):
            y = T.pixel_shuffle(T.conv2d(y, g[f"recon.up.{i}.weight"], g[f"recon.up.{i}.bias"]), s)
        y = T.conv2d(y, g["recon.conv_last.weight"], g["recon.conv_last.bias"])
    s = cfg.scale
    if y.shape[1] != s * h or y.shape[2] != s * w:
        _, hp, wp, co = y.shape
        y = T.gather(y, _crop_index(b, hp, wp, co, s * h, s * w), unique=True)
    return y


def _dihedral(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(img, k, axes=(0, 1))
    return out[:, ::-1] if flip else out


def _dihedral_inverse(img: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if flip:
        img = img[:, ::-1]
    return np.rot90(img, -k, axes=(0, 1))


def upscale_image(model: Model, img: np.ndarray) -> np.ndarray:
    """(H, W, 3) array in [0, 1] -> (sH, sW, 3) array, unclamped."""
    x = Tensor(np.ascontiguousarray(img[None], dtype=np.float32))
    return model_forward(model, x).data[0]


def self_ensemble_infer(model: Model, img: np.ndarray, branches: list | None = None) -> np.ndarray:
    """Mean over the 8 dihedral transforms of the input, each mapped back."""
    acc = None
    for k in range(4):
        for flip in (False, True):
            out = _dihedral_inverse(upscale_image(model, _dihedral(img, k, flip)), k, flip)
            if branches is not None:
                branches.append(out)
            acc = out.astype(np.float64) if acc is None else acc + out
    return (acc / 8.0).astype(np.float32)


# ---------------------------------------------------------------- config serialization

def variant_to_dict(v: AttentionVariant) -> dict:
    if isinstance(v, PSA):
        return {"kind": "psa", "r": v.r}
    if isinstance(v, TokenReduction):
        return {"kind": "token_reduction", "r": v.r}
    if isinstance(v, TokenSampling):
        return {"kind": "token_sampling", "t": v.t, "seed": v.seed}
    return {"kind": "standard"}


def variant_from_dict(d: dict) -> AttentionVariant:
    kind = d.get("kind")
    if kind == "psa":
        return PSA(int(d["r"]))
    if kind == "token_reduction":
        return TokenReduction(int(d["r"]))
    if kind == "token_sampling":
        return TokenSampling(int(d["t"]), int(d.get("seed", 0)))
    if kind == "standard":
        return Standard()
    raise ParameterError(f"unknown attention variant {kind!r}")


def config_to_dict(cfg: ModelConfig) -> dict:
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d["variant"] = variant_to_dict(cfg.variant)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    unknown = set(d) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
    if "variant" in d:
        d["variant"] = variant_from_dict(d["variant"])
    return ModelConfig(**d).validate()
