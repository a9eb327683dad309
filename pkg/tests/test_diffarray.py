import zlib

import numpy as np
import pytest

from trimodal import diffarray as da
from trimodal.diffarray import ShapeError, Tensor


def P(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def primitive_cases(rng):
    a, b = P(rng, 3, 4), P(rng, 3, 4)
    pos = P(rng, 3, 4, positive=True)
    row = P(rng, 4)
    m1, m2 = P(rng, 2, 3, 4), P(rng, 2, 4, 5)
    x3 = P(rng, 2, 5, 4)
    g, bb = P(rng, 4), P(rng, 4)
    lw, lb = P(rng, 4, 3), P(rng, 3)
    table = P(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    conv_x, conv_w, conv_b = P(rng, 2, 9, 2), P(rng, 3, 2, 3), P(rng, 3)
    allowed = np.array([[1, 1, 0], [0, 1, 1], [0, 0, 0]], dtype=bool)
    sm = P(rng, 2, 3, 3)
    logits = P(rng, 2, 5, 6)
    targets = rng.integers(0, 6, size=(2, 5))
    mask = rng.random((2, 5)) < 0.6
    mask[0, 0] = True
    w_ce = rng.uniform(0.5, 2.0, size=(2, 5))
    return {
        "add": (lambda: da.add(a, row), [a, row]),
        "sub": (lambda: da.sub(a, b), [a, b]),
        "mul": (lambda: da.mul(a, b), [a, b]),
        "div": (lambda: da.div(a, pos), [a, pos]),
        "power": (lambda: da.power(pos, 2.5), [pos]),
        "exp": (lambda: da.exp(a), [a]),
        "log": (lambda: da.log(pos), [pos]),
        "sqrt": (lambda: da.sqrt(pos), [pos]),
        "tanh": (lambda: da.tanh(a), [a]),
        "relu": (lambda: da.relu(a), [a]),
        "gelu": (lambda: da.gelu(a), [a]),
        "tsum": (lambda: da.tsum(x3, axis=1), [x3]),
        "mean": (lambda: da.mean(x3, axis=(0, 2), keepdims=True), [x3]),
        "reshape": (lambda: da.reshape(x3, (5, 8)), [x3]),
        "transpose": (lambda: da.transpose(x3, (2, 0, 1)), [x3]),
        "swapaxes": (lambda: da.swapaxes(x3, 1, 2), [x3]),
        "getitem": (lambda: x3[:, 1:4, ::2], [x3]),
        "getitem_fancy": (lambda: x3[:, [0, 0, 3]], [x3]),
        "take_rows": (lambda: da.take_rows(table, ids), [table]),
        "concat": (lambda: da.concat([a, b], axis=1), [a, b]),
        "matmul": (lambda: da.matmul(m1, m2), [m1, m2]),
        "linear": (lambda: da.linear(x3, lw, lb), [x3, lw, lb]),
        "softmax": (lambda: da.softmax(x3), [x3]),
        "masked_softmax": (lambda: da.masked_softmax(sm, allowed), [sm]),
        "log_softmax": (lambda: da.log_softmax(x3), [x3]),
        "layer_norm": (lambda: da.layer_norm(x3, g, bb), [x3, g, bb]),
        "l2_normalize": (lambda: da.l2_normalize(a), [a]),
        "masked_cross_entropy": (lambda: da.masked_cross_entropy(logits, targets, mask, w_ce), [logits]),
        "conv1d": (lambda: da.conv1d(conv_x, conv_w, conv_b, stride=2), [conv_x, conv_w, conv_b]),
    }


@pytest.mark.parametrize("name", list(primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    f, params = primitive_cases(rng)[name]
    # scalar probe: random weighted sum, so no gradient vanishes by symmetry
    probe_rng = np.random.default_rng(5)
    out = f()
    w = Tensor(probe_rng.normal(size=out.shape)) if out.shape else Tensor(1.0)
    err = da.grad_check(lambda: da.tsum(f() * w), params, eps=1e-6)
    assert err < 1e-4, f"{name}: relative error {err:.2e}"


def test_backward_accumulates_on_reused_node(rng):
    x = P(rng, 3)
    y = x * x + x
    da.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_one_sided_broadcast_only():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    with pytest.raises(ShapeError):
        da.add(a, b)


def test_masked_softmax_fully_masked_row_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    allowed = np.array([[True, False, True], [False, False, False]])
    out = da.masked_softmax(x, allowed).data
    np.testing.assert_allclose(out[0].sum(), 1.0)
    assert out[0, 1] == 0.0
    assert np.all(out[1] == 0.0)


def test_masked_cross_entropy_examples():
    logits = Tensor(np.zeros((1, 2, 4)))
    targets = np.array([[1, 3]])
    ce = da.masked_cross_entropy(logits, targets, np.array([[True, False]]))
    assert ce.item() == pytest.approx(np.log(4.0))
    none = da.masked_cross_entropy(logits, targets, np.array([[False, False]]))
    assert none.item() == 0.0
    with pytest.raises(IndexError):
        da.masked_cross_entropy(logits, np.array([[4, 0]]), np.array([[True, True]]))


def test_stop_gradient_blocks():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = da.tsum(da.stop_gradient(x) * x)
    y.backward()
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_grad_check_rejects_bad_eps():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        da.grad_check(lambda: da.tsum(x), [x], eps=1e-2)


def test_grad_check_detects_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def bad():
        # correct value, deliberately wrong derivative (2x instead of 3x^2)
        def backward(g):
            return (g * 2 * x.data,)

        return da._result(np.sum(x.data ** 3), (x,), backward)

    assert da.grad_check(bad, [x]) > 1e-2


def test_conv1d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 10, 3))
    w = rng.normal(size=(4, 3, 5))
    out = da.conv1d(Tensor(x), Tensor(w), stride=3).data
    L = (10 - 4) // 3 + 1
    ref = np.zeros((2, L, 5))
    for b in range(2):
        for i in range(L):
            for k in range(4):
                ref[b, i] += x[b, 3 * i + k] @ w[k]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
