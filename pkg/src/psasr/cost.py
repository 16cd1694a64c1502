"""Closed-form parameter and multiply-accumulate accounting.

Convention ``macs-v1``: one MAC per scalar multiply in convolutions, linear
layers and the two attention products (scores and weighted values). Softmax,
normalization, activations and bias additions are free. Every layer at LR
resolution runs on the input padded up to a multiple of the window size, the
same padding the forward pass applies; the upsampler runs on the padded grid
too. The output resolution is mapped to LR by ceiling division.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .attention import PSA, Standard, TokenReduction, TokenSampling, bias_table_side
from .model import ModelConfig, _shuffle_stages, block_windows

CONVENTION = "macs-v1"
DEFAULT_RESOLUTION = (1280, 720)

__all__ = ["CostRow", "CostReport", "count_params", "count_macs", "CONVENTION", "DEFAULT_RESOLUTION",
           "attention_macs_per_window"]


@dataclass
class CostRow:
    name: str
    params: int
    macs: int = 0


@dataclass
class CostReport:
    rows: list[CostRow]
    resolution: tuple[int, int] | None = None
    convention: str = CONVENTION
    lr_extent: tuple[int, int] | None = field(default=None)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "macs"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs])
        w.writerow(["total", self.params, self.macs])
        return buf.getvalue()

    def summary(self) -> str:
        res = f" at {self.resolution[0]}x{self.resolution[1]}" if self.resolution else ""
        return (f"params {self.params:,} ({self.params / 1e6:.3f}M)  "
                f"macs {self.macs:,} ({self.macs / 1e9:.2f}G){res}  [{self.convention}]")


def _conv(k: int, cin: int, cout: int) -> int:
    return k * k * cin * cout + cout


def _key_tokens(cfg: ModelConfig, s: int) -> int:
    v = cfg.variant
    if isinstance(v, (PSA, TokenReduction)):
        return (s // v.r) ** 2
    if isinstance(v, TokenSampling):
        return min(v.t, s) ** 2
    return s * s


def attention_macs_per_window(cfg: ModelConfig, s: int) -> int:
    """Score and weighted-value products for one window, summed over heads."""
    return 2 * s * s * _key_tokens(cfg, s) * cfg.channels


def _block_rows(cfg: ModelConfig, prefix: str, s: int, pixels: int | None) -> list[CostRow]:
    c, hid, h, v = cfg.channels, cfg.hidden, cfg.heads, cfg.variant
    P = pixels or 0
    kv = c // (v.r * v.r) if isinstance(v, PSA) else c
    tr = v.r if isinstance(v, (PSA, TokenReduction)) else 1
    side = bias_table_side(s, tr)
    nwin = P // (s * s)
    keys = _key_tokens(cfg, s)

    attn_p = (c * c + c) * 2 + (c * kv + kv) * 2 + h * side * side
    if isinstance(v, PSA) or isinstance(v, Standard):
        kv_macs = 2 * P * c * kv
    elif isinstance(v, TokenReduction):
        attn_p += v.r * v.r * c + c
        kv_macs = P * c + 2 * (P // (v.r * v.r)) * c * c
    else:
        kv_macs = 2 * nwin * keys * c * c
    attn_m = 2 * P * c * c + kv_macs + nwin * attention_macs_per_window(cfg, s)

    ffn_p = (c * hid + hid) + (hid * c + c)
    ffn_m = 2 * P * c * hid
    if cfg.convffn_kernel:
        k = cfg.convffn_kernel
        ffn_p += k * k * hid + hid
        ffn_m += P * hid * k * k
    return [
        CostRow(f"{prefix}.norm", 4 * c, 0),
        CostRow(f"{prefix}.attn", attn_p, attn_m),
        CostRow(f"{prefix}.ffn", ffn_p, ffn_m),
    ]


def _rows(cfg: ModelConfig, lr_pixels: int | None) -> list[CostRow]:
    cfg.validate()
    P = lr_pixels or 0
    c, s = cfg.channels, cfg.scale
    rows = [CostRow("embed", _conv(3, cfg.in_channels, c), P * 9 * cfg.in_channels * c)]
    for gi in range(cfg.groups):
        for bi, (win, _) in enumerate(block_windows(cfg)):
            rows += _block_rows(cfg, f"groups.{gi}.blocks.{bi}", win, lr_pixels)
        rows.append(CostRow(f"groups.{gi}.conv", _conv(3, c, c), P * 9 * c * c))
    rows.append(CostRow("body_conv", _conv(3, c, c), P * 9 * c * c))
    if cfg.upsampler == "direct":
        co = cfg.in_channels * s * s
        rows.append(CostRow("recon.conv", _conv(3, c, co), P * 9 * c * co))
    else:
        f = cfg.upsample_features
        rows.append(CostRow("recon.conv_before", _conv(3, c, f), P * 9 * c * f))
        area = P
        for i, st in enumerate(_shuffle_stages(s)):
            rows.append(CostRow(f"recon.up.{i}", _conv(3, f, f * st * st), area * 9 * f * f * st * st))
            area *= st * st
        rows.append(CostRow("recon.conv_last", _conv(3, f, cfg.in_channels), area * 9 * f * cfg.in_channels))
    return rows


def count_params(cfg: ModelConfig) -> CostReport:
    return CostReport(_rows(cfg, None))


def lr_extent(cfg: ModelConfig, out_resolution: tuple[int, int]) -> tuple[int, int]:
    """Padded LR (width, height) the network actually processes."""
    w, h = out_resolution
    if w <= 0 or h <= 0:
        raise ValueError(f"resolution must be positive, got {w}x{h}")
    m = cfg.pad_multiple
    lw, lh = math.ceil(w / cfg.scale), math.ceil(h / cfg.scale)
    return math.ceil(lw / m) * m, math.ceil(lh / m) * m


def count_macs(cfg: ModelConfig, out_resolution: tuple[int, int] = DEFAULT_RESOLUTION) -> CostReport:
    lw, lh = lr_extent(cfg, out_resolution)
    return CostReport(_rows(cfg, lw * lh), tuple(out_resolution), lr_extent=(lw, lh))
