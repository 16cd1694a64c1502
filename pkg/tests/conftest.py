import numpy as np
import pytest

from psasr.attention import PsaParams, bias_table_side
from psasr.tensor import Tensor


def make_params(rng, c, heads, window, r=1, kv_channels=None, dtype=np.float32, reduce=False,
                table_r=None, scale=0.3):
    kv = kv_channels if kv_channels is not None else c // (r * r)
    side = bias_table_side(window, r if table_r is None else table_r)

    def t(*shape):
        return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)

    p = PsaParams(
        wq=t(1, 1, c, c), bq=t(1, 1, 1, c),
        wk=t(1, 1, c, kv), bk=t(1, 1, 1, kv),
        wv=t(1, 1, c, kv), bv=t(1, 1, 1, kv),
        wo=t(1, 1, c, c), bo=t(1, 1, 1, c),
        table=t(1, 1, heads, side * side), heads=heads, r=r,
    )
    if reduce:
        p.reduce_w = t(r, r, 1, c)
        p.reduce_b = t(1, 1, 1, c)
    return p


def oracle_window_attention(tokens, p, window, bias=None):
    """Plain-numpy standard multi-head window attention, one window and head at a time."""
    x = tokens[:, 0].astype(np.float64)  # (n, S^2, C)
    n, s2, c = x.shape
    h = p.heads
    d = c // h
    wq, wk, wv, wo = (np.asarray(w.data[0, 0], np.float64) for w in (p.wq, p.wk, p.wv, p.wo))
    bq, bk, bv, bo = (np.asarray(b.data.reshape(-1), np.float64) for b in (p.bq, p.bk, p.bv, p.bo))
    out = np.zeros((n, s2, c))
    for i in range(n):
        q, k, v = x[i] @ wq + bq, x[i] @ wk + bk, x[i] @ wv + bv
        heads = []
        for j in range(h):
            sl = slice(j * d, (j + 1) * d)
            logits = q[:, sl] @ k[:, sl].T / np.sqrt(d)
            if bias is not None:
                logits = logits + bias[j]
            logits -= logits.max(axis=1, keepdims=True)
            a = np.exp(logits)
            a /= a.sum(axis=1, keepdims=True)
            heads.append(a @ v[:, sl])
        out[i] = np.concatenate(heads, axis=1) @ wo + bo
    return out[:, None]


def swin_bias(table, window, heads):
    """Integer relative-position lookup, query minus key, table side 2S-1."""
    side = 2 * window - 1
    tab = np.asarray(table, np.float64).reshape(heads, side, side)
    coords = np.array([(y, x) for y in range(window) for x in range(window)])
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    return tab[:, rel[..., 0], rel[..., 1]]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
