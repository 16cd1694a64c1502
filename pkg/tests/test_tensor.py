import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psasr import tensor as T
from psasr.tensor import ParameterError, ShapeError, Tape, Tensor, grad_check, precision


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_matmul(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_small_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = naive_matmul(a, b)
    assert expected.tolist() == [[19, 22], [43, 50]]
    out = T.matmul(t64(a[None, None]), t64(b[None, None]))
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_matmul_identity_and_dot():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((1, 1, 5, 4))
    out = T.matmul(t64(a), t64(np.eye(4)[None, None]))
    np.testing.assert_array_equal(out.data, a)
    u, v = rng.standard_normal(7), rng.standard_normal(7)
    dot = 0.0
    for x, y in zip(u, v):
        dot += x * y
    out = T.matmul(t64(u.reshape(1, 1, 1, 7)), t64(v.reshape(1, 1, 7, 1)))
    assert out.data.reshape(()) == pytest.approx(dot, abs=1e-12)


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 1, 2, 3\).*\(1, 1, 2, 3\)"):
        T.matmul(T.zeros((1, 1, 2, 3)), T.zeros((1, 1, 2, 3)))


# ---------------------------------------------------------------- softmax

@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([1000.0, 1000.0], [0.5, 0.5]),
    ([math.log(2.0), 0.0], [2 / 3, 1 / 3]),
])
def test_softmax_examples(x, expected):
    out = T.softmax_lastdim(t64(np.array(x).reshape(1, 1, 1, 2)))
    np.testing.assert_allclose(out.data.reshape(-1), expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    x = T.tensor(np.array(vals, dtype=np.float32).reshape(1, 1, 1, -1))
    s = T.softmax_lastdim(x).data
    assert abs(s.sum() - 1.0) < 1e-6


# ---------------------------------------------------------------- layer norm

def test_layer_norm_examples():
    ones, zero = t64(np.ones((1, 1, 1, 2))), t64(np.zeros((1, 1, 1, 2)))
    const = T.layer_norm(t64(np.full((1, 1, 1, 2), 3.0)), ones, zero)
    np.testing.assert_array_equal(const.data, 0.0)
    out = T.layer_norm(t64(np.array([1.0, 3.0]).reshape(1, 1, 1, 2)), ones, zero, eps=1e-12)
    np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-9)
    beta = t64(np.array([0.25, -4.0]).reshape(1, 1, 1, 2))
    out = T.layer_norm(t64(np.random.default_rng(0).standard_normal((2, 3, 3, 2))), zero, beta)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.data, out.shape))


def test_layer_norm_rejects_nonpositive_eps():
    x = T.zeros((1, 1, 1, 2))
    g = T.tensor(np.ones((1, 1, 1, 2)))
    with pytest.raises(ParameterError):
        T.layer_norm(x, g, x, eps=0.0)


# ---------------------------------------------------------------- conv2d

def direct_conv(x, w, b):
    """Direct summation over zero-padded neighbourhoods (NHWC, odd kernel)."""
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    out = np.zeros((bsz, h, wd, cout))
    for n in range(bsz):
        for i in range(h):
            for j in range(wd):
                for di in range(kh):
                    for dj in range(kw):
                        y, z = i + di - kh // 2, j + dj - kw // 2
                        if 0 <= y < h and 0 <= z < wd:
                            out[n, i, j] += x[n, y, z] @ w[di, dj]
    return out + b


def test_conv_dirac_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 3)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    w[1, 1] = np.eye(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros((1, 1, 1, 3), np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_on_constant():
    c = 0.7
    x = np.full((1, 6, 6, 1), c)
    out = T.conv2d(t64(x), t64(np.ones((3, 3, 1, 1)))).data[0, :, :, 0]
    oracle = direct_conv(x, np.ones((3, 3, 1, 1)), 0.0)[0, :, :, 0]
    np.testing.assert_allclose(out, oracle, atol=1e-12)
    np.testing.assert_allclose(out[1:-1, 1:-1], 9 * c, atol=1e-12)


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((5, 3, 3, 2))
    b = rng.standard_normal(2)
    out = T.conv2d(t64(x), t64(w), t64(b.reshape(1, 1, 1, 2)))
    np.testing.assert_allclose(out.data, direct_conv(x, w, b), atol=1e-10)


def test_depthwise_channel_independence():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 6, 6, 4))
    w = t64(rng.standard_normal((5, 5, 1, 4)))
    base = T.conv2d(t64(x), w, depthwise=True).data
    x2 = x.copy()
    x2[..., 2] += rng.standard_normal((1, 6, 6))
    moved = T.conv2d(t64(x2), w, depthwise=True).data
    changed = np.abs(moved - base).reshape(-1, 4).max(axis=0) > 0
    assert changed.tolist() == [False, False, True, False]


def test_conv_even_kernel_rejected():
    with pytest.raises(ParameterError):
        T.conv2d(T.zeros((1, 4, 4, 1)), T.zeros((2, 2, 1, 1)))


# ---------------------------------------------------------------- pixel shuffle

def test_pixel_shuffle_roundtrip_and_shape():
    x = T.tensor(np.random.default_rng(0).standard_normal((1, 4, 4, 8)).astype(np.float32))
    y = T.pixel_shuffle(x, 2)
    assert y.shape == (1, 8, 8, 2)
    back = T.pixel_unshuffle(y, 2)
    assert np.array_equal(back.data, x.data)


def test_pixel_shuffle_layout_convention():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    y = T.pixel_shuffle(T.tensor(np.array([a, b, c, d]).reshape(1, 1, 1, 4)), 2)
    assert y.data[0, :, :, 0].tolist() == [[a, b], [c, d]]


def test_pixel_shuffle_indivisible():
    with pytest.raises(ParameterError):
        T.pixel_shuffle(T.zeros((1, 2, 2, 6)), 2)


# ---------------------------------------------------------------- gelu / linear

def phi_series(x, terms=60):
    # Phi(x) = 1/2 + 1/2 erf(x / sqrt 2), erf via its Maclaurin series
    z = x / math.sqrt(2)
    s = 0.0
    for n in range(terms):
        s += (-1) ** n * z ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 0.5 + s / math.sqrt(math.pi)


def test_gelu_values():
    assert T.gelu(t64(np.zeros((1, 1, 1, 1)))).data.item() == 0.0
    assert T.gelu(t64(np.ones((1, 1, 1, 1)))).data.item() == pytest.approx(phi_series(1.0), abs=1e-12)
    assert phi_series(1.0) == pytest.approx(0.841345, abs=1e-6)
    x = np.linspace(-4, 4, 33).reshape(1, 1, 1, -1)
    np.testing.assert_allclose(T.gelu(t64(x)).data - T.gelu(t64(-x)).data, x, atol=1e-12)


def test_linear_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 2, 3))
    eye = t64(np.eye(3)[None, None])
    zb = t64(np.zeros((1, 1, 1, 3)))
    np.testing.assert_array_equal(T.linear(t64(x), eye, zb).data, x)
    bias = rng.standard_normal((1, 1, 1, 3))
    out = T.linear(t64(x), t64(np.zeros((1, 1, 3, 3))), t64(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, out.shape))
    w = rng.standard_normal((3, 2))
    tok = rng.standard_normal(3)
    out = T.linear(t64(tok.reshape(1, 1, 1, 3)), t64(w[None, None]))
    np.testing.assert_allclose(out.data.reshape(-1), naive_matmul(tok[None], w)[0], atol=1e-12)
    with pytest.raises(ShapeError):
        T.linear(t64(x), t64(np.zeros((1, 1, 4, 3))))


# ---------------------------------------------------------------- tape

def test_empty_tape_backward_is_noop():
    tape = Tape()
    x = T.zeros((1, 1, 1, 1), requires_grad=True)
    tape.backward(x)
    assert x.grad is None


def test_nan_is_an_error():
    with pytest.raises(T.NumericError):
        T.scale(T.tensor(np.array([np.inf])), 0.0)


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 6, 6, 4)).astype(np.float32))
    w = Tensor(rng.standard_normal((3, 3, 4, 4)).astype(np.float32))
    a = T.conv2d(x, w).data
    b = T.conv2d(x, w).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- gradient checks

def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 4)))

    def f(x):
        return T.matmul(T.reshape(x, (1, 1, 1, 24)), T.reshape(x, (1, 1, 24, 1)))

    # quadratic: central differences are exact up to rounding, so a coarse step is fine
    assert grad_check(f, [x], step=1e-3) < 1e-9


def test_grad_check_l1_away_from_ties():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((1, 3, 3, 2)))
    b = Tensor(a.data + rng.choice([-1.0, 1.0], a.shape) * rng.uniform(0.1, 1.0, a.shape))
    # analytic gradient equals the sign vector over n
    with Tape() as tape:
        xa = Tensor(a.data, requires_grad=True)
        loss = T.abs_mean_diff(xa, b)
    tape.backward(loss)
    np.testing.assert_allclose(xa.grad, np.sign(a.data - b.data) / a.data.size)
    assert grad_check(lambda x: T.abs_mean_diff(x, b), [a]) < 1e-6


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x, [T.zeros((1, 1, 1, 2))])


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


KERNEL_CASES = {
    "matmul": lambda rng: ((_rand(rng, 2, 1, 3, 4), _rand(rng, 2, 1, 4, 2)), T.matmul),
    "softmax": lambda rng: ((_rand(rng, 1, 2, 3, 5),), T.softmax_lastdim),
    "layer_norm": lambda rng: ((_rand(rng, 1, 2, 3, 6), _rand(rng, 1, 1, 1, 6), _rand(rng, 1, 1, 1, 6)),
                               T.layer_norm),
    "conv2d": lambda rng: ((_rand(rng, 1, 4, 5, 2), _rand(rng, 3, 3, 2, 3), _rand(rng, 1, 1, 1, 3)), T.conv2d),
    "depthwise": lambda rng: ((_rand(rng, 1, 5, 5, 3), _rand(rng, 5, 5, 1, 3), _rand(rng, 1, 1, 1, 3)),
                              lambda x, w, b: T.conv2d(x, w, b, depthwise=True)),
    "strided_depthwise": lambda rng: ((_rand(rng, 2, 4, 4, 3), _rand(rng, 2, 2, 1, 3), _rand(rng, 1, 1, 1, 3)),
                                      lambda x, w, b: T.strided_depthwise(x, w, b, 2)),
    "pixel_shuffle": lambda rng: ((_rand(rng, 1, 2, 3, 8),), lambda x: T.pixel_shuffle(x, 2)),
    "pixel_unshuffle": lambda rng: ((_rand(rng, 1, 4, 2, 3),), lambda x: T.pixel_unshuffle(x, 2)),
    "gelu": lambda rng: ((_rand(rng, 1, 2, 2, 5),), T.gelu),
    "leaky_relu": lambda rng: ((_rand(rng, 1, 2, 2, 5),), T.leaky_relu),
    "linear": lambda rng: ((_rand(rng, 1, 2, 3, 4), _rand(rng, 1, 1, 4, 3), _rand(rng, 1, 1, 1, 3)), T.linear),
    "transpose": lambda rng: ((_rand(rng, 2, 3, 4, 1),), lambda x: T.transpose(x, (0, 2, 1, 3))),
    "add_broadcast": lambda rng: ((_rand(rng, 2, 2, 3, 3), _rand(rng, 1, 2, 3, 3)), T.add_broadcast),
    "gather": lambda rng: ((_rand(rng, 1, 2, 3, 2),),
                           lambda x: T.gather(x, np.array([0, 3, 3, 5, 11, 0]).reshape(1, 1, 2, 3))),
    "weighted_gather": lambda rng: ((_rand(rng, 1, 1, 1, 6),),
                                    lambda x: T.weighted_gather(x, np.array([[0, 1], [4, 4], [5, 2]]).reshape(
                                        1, 1, 1, 3, 2), np.array([[0.3, 0.7], [1.0, 0.5], [0.2, 0.1]]).reshape(
                                        1, 1, 1, 3, 2))),
}


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs, op = KERNEL_CASES[name](rng)
    with precision(np.float64):
        probe = op(*inputs)
    weights = rng.standard_normal(probe.shape)

    def f(*xs):
        y = op(*xs)
        return T.matmul(T.reshape(y, (1, 1, 1, y.data.size)), Tensor(weights.reshape(1, 1, -1, 1)))

    assert grad_check(f, inputs) < 1e-5
