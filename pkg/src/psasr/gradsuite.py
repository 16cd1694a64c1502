"""Central-difference gradient checks for every differentiable kernel, a block and a small model."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (
    PSA, PsaParams, bias_table_side, build_relative_bias, psa_attention, spatial_to_channel,
    standard_attention, token_reduction_attention, token_sampling_attention, window_partition,
    window_reverse, make_geometry,
)
from .data import l1_loss
from .model import Model, ModelConfig, ParameterStore, build_model, model_forward, pab_forward
from .tensor import Tensor, grad_check

__all__ = ["GradResult", "run_suite", "case_names", "KERNEL_TOL", "GRAPH_TOL"]

KERNEL_TOL = 1e-5
GRAPH_TOL = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _params(rng, c, h, s, r=1, kv=None, reduce=False, table_r=None):
    kv = c // (r * r) if kv is None else kv
    side = bias_table_side(s, r if table_r is None else table_r)
    p = PsaParams(
        wq=_rand(rng, 1, 1, c, c), bq=_rand(rng, 1, 1, 1, c), wk=_rand(rng, 1, 1, c, kv),
        bk=_rand(rng, 1, 1, 1, kv), wv=_rand(rng, 1, 1, c, kv), bv=_rand(rng, 1, 1, 1, kv),
        wo=_rand(rng, 1, 1, c, c), bo=_rand(rng, 1, 1, 1, c), table=_rand(rng, 1, 1, h, side * side),
        heads=h, r=r,
    )
    for t in (p.wq, p.wk, p.wv, p.wo):
        t.data *= 0.4
    if reduce:
        p.reduce_w = _rand(rng, r, r, 1, c)
        p.reduce_b = _rand(rng, 1, 1, 1, c)
    return p


_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "table", "reduce_w", "reduce_b")


def _attention_case(kind):
    def make(rng):
        s, c, h = 4, 8, 2
        r = 1 if kind in ("standard", "sampling") else 2
        p = _params(rng, c, h, s, r=r, kv=c if kind == "reduction" else None, reduce=kind == "reduction")
        names = [f for f in _FIELDS if getattr(p, f) is not None]
        x = _rand(rng, 2, 1, s * s, c)

        def op(x, *ts):
            q = PsaParams(**{**{f: getattr(p, f) for f in _FIELDS}, **dict(zip(names, ts))},
                          heads=h, r=r)
            bias = build_relative_bias(q.table, s, r, h)
            if kind == "psa":
                return psa_attention(x, q, bias, s)
            if kind == "standard":
                return standard_attention(x, q, bias, s)
            if kind == "reduction":
                return token_reduction_attention(x, q, bias, s)
            return token_sampling_attention(x, q, bias, s, t=2, seed=3)

        return (x, *[getattr(p, f) for f in names]), op
    return make


def _partition_case(rng):
    geom = make_geometry(5, 6, 4, 2)
    return (_rand(rng, 1, 5, 6, 2),), lambda x: window_reverse(window_partition(x, geom))


def _windows_case(rng):
    geom = make_geometry(5, 6, 4, 2)
    return (_rand(rng, 1, 5, 6, 2),), lambda x: window_partition(x, geom).tokens


CASES: "OrderedDict[str, Callable]" = OrderedDict([
    ("matmul", lambda rng: ((_rand(rng, 2, 1, 3, 4), _rand(rng, 2, 1, 4, 2)), T.matmul)),
    ("linear", lambda rng: ((_rand(rng, 1, 2, 3, 4), _rand(rng, 1, 1, 4, 3), _rand(rng, 1, 1, 1, 3)), T.linear)),
    ("softmax", lambda rng: ((_rand(rng, 1, 2, 3, 5),), T.softmax_lastdim)),
    ("layer_norm", lambda rng: ((_rand(rng, 1, 2, 3, 6), _rand(rng, 1, 1, 1, 6), _rand(rng, 1, 1, 1, 6)),
                                T.layer_norm)),
    ("gelu", lambda rng: ((_rand(rng, 1, 2, 2, 5),), T.gelu)),
    ("leaky_relu", lambda rng: ((_rand(rng, 1, 2, 2, 5),), T.leaky_relu)),
    ("conv2d", lambda rng: ((_rand(rng, 1, 4, 5, 2), _rand(rng, 3, 3, 2, 3), _rand(rng, 1, 1, 1, 3)), T.conv2d)),
    ("depthwise_conv", lambda rng: ((_rand(rng, 1, 5, 5, 3), _rand(rng, 5, 5, 1, 3), _rand(rng, 1, 1, 1, 3)),
                                    lambda x, w, b: T.conv2d(x, w, b, depthwise=True))),
    ("strided_depthwise", lambda rng: ((_rand(rng, 2, 4, 4, 3), _rand(rng, 2, 2, 1, 3), _rand(rng, 1, 1, 1, 3)),
                                       lambda x, w, b: T.strided_depthwise(x, w, b, 2))),
    ("pixel_shuffle", lambda rng: ((_rand(rng, 1, 2, 3, 8),), lambda x: T.pixel_shuffle(x, 2))),
    ("pixel_unshuffle", lambda rng: ((_rand(rng, 1, 4, 2, 3),), lambda x: T.pixel_unshuffle(x, 2))),
    ("window_partition", _windows_case),
    ("partition_reverse", _partition_case),
    ("spatial_to_channel", lambda rng: ((_rand(rng, 2, 1, 16, 3),), lambda x: spatial_to_channel(x, 2, 4))),
    ("relative_bias", lambda rng: ((_rand(rng, 1, 1, 2, 9),), lambda t: build_relative_bias(t, 4, 2, 2))),
    ("psa_attention", _attention_case("psa")),
    ("standard_attention", _attention_case("standard")),
    ("token_reduction", _attention_case("reduction")),
    ("token_sampling", _attention_case("sampling")),
])

_TINY = ModelConfig(groups=1, blocks=2, channels=8, window=4, heads=2, scale=2, variant=PSA(2),
                    convffn_kernel=3, upsampler="direct")


def case_names() -> list[str]:
    return list(CASES) + ["pab_block", "full_model"]


def _broken(x: Tensor) -> Tensor:
    """Identity forward with a deliberately wrong backward (negative control)."""
    return T._finish(x.data.copy(), (x,), lambda g: (1.5 * g,), "broken")


def _projected(op, weights, inject: bool):
    def f(*xs):
        y = op(*xs)
        if inject:
            y = _broken(y)
        return T.matmul(T.reshape(y, (1, 1, 1, y.data.size)), Tensor(weights.reshape(1, 1, -1, 1)))
    return f


def _kernel(name: str, seed: int, inject: bool) -> float:
    rng = np.random.default_rng(seed + zlib.crc32(name.encode()))
    inputs, op = CASES[name](rng)
    with T.precision(np.float64):
        probe = op(*inputs)
    weights = rng.standard_normal(probe.shape)
    return grad_check(_projected(op, weights, inject), inputs, max_coords=40, rng=rng)


def _random_store(cfg: ModelConfig, rng) -> ParameterStore:
    store, _ = build_model(cfg, seed=int(rng.integers(1 << 31)))
    for t in store.params.values():
        t.data[:] = rng.standard_normal(t.shape) * 0.3
    return store


def _pab(seed: int, inject: bool) -> float:
    rng = np.random.default_rng(seed + 17)
    cfg = _TINY
    store = _random_store(cfg, rng)
    prefix = "groups.0.blocks.1"
    names = [n for n in store if n.startswith(prefix)]
    x = _rand(rng, 1, 8, 8, cfg.channels)
    weights = rng.standard_normal(x.shape)

    def op(x, *ts):
        full = ParameterStore(OrderedDict(store.params))
        full.params.update(zip(names, ts))
        return pab_forward(x, full, prefix, cfg, cfg.window, cfg.window // 2)

    return grad_check(_projected(op, weights, inject), [x] + [store[n] for n in names], max_coords=12, rng=rng)


def _model(seed: int, inject: bool) -> float:
    rng = np.random.default_rng(seed + 29)
    cfg = _TINY
    store = _random_store(cfg, rng)
    names = list(store)
    x = Tensor(rng.random((1, 5, 6, 3)))
    target = Tensor(rng.random((1, 10, 12, 3)))

    def f(x, *ts):
        y = model_forward(Model(cfg, ParameterStore(OrderedDict(zip(names, ts)))), x)
        return l1_loss(_broken(y) if inject else y, target)

    return grad_check(f, [x] + [store[n] for n in names], max_coords=4, rng=rng)


def run_suite(seed: int = 0, inject: str | None = None, only: list[str] | None = None) -> list[GradResult]:
    """Run every check; ``inject`` names one case whose backward is deliberately corrupted."""
    out = []
    for name in case_names():
        if only and name not in only:
            continue
        bad = inject == name
        if name == "pab_block":
            out.append(GradResult(name, _pab(seed, bad), KERNEL_TOL))
        elif name == "full_model":
            out.append(GradResult(name, _model(seed, bad), GRAPH_TOL))
        else:
            out.append(GradResult(name, _kernel(name, seed, bad), KERNEL_TOL))
    return out
