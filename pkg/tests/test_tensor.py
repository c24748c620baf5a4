import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vinseg.tensor import (
    BatchNormState,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    activation,
    add,
    backward,
    batchnorm2d,
    bce_sum,
    conv2d,
    grad_check,
    maxpool2d,
    relu,
    scale,
    sigmoid,
    sum_all,
    upsample_bilinear,
)
from vinseg.tensor import _record


def rand(rng, *shape, requires_grad=False, dtype=np.float32):
    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# oracles


def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    acc = b[oi]
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[ni, ci, yi * stride + ky, xi * stride + kx] * w[oi, ci, ky, kx]
                    out[ni, oi, yi, xi] = acc
    return out


def pool_oracle(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.full((n, c, oh, ow), -np.inf)
    for ni in range(n):
        for ci in range(c):
            for yi in range(oh):
                for xi in range(ow):
                    for ky in range(k):
                        for kx in range(k):
                            yy, xx = yi * stride + ky - pad, xi * stride + kx - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                out[ni, ci, yi, xi] = max(out[ni, ci, yi, xi], x[ni, ci, yy, xx])
    return out


def bilinear_oracle(img, th, tw):
    h, w = img.shape
    out = np.zeros((th, tw))
    for oy in range(th):
        for ox in range(tw):
            sy = max((oy + 0.5) * h / th - 0.5, 0.0)
            sx = max((ox + 0.5) * w / tw - 0.5, 0.0)
            y0, x0 = min(int(math.floor(sy)), h - 1), min(int(math.floor(sx)), w - 1)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[oy, ox] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                           + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


# --------------------------------------------------------------------------
# conv2d


def test_conv_scalar_identity():
    out = conv2d(Tensor(np.full((1, 1, 1, 1), 3.5)), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert out.data.item() == 3.5


def test_conv_center_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 1, 6, 7)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1
    out = conv2d(x, Tensor(w), Tensor(np.zeros(1)), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_nested_loops():
    rng = np.random.default_rng(1)
    x, w, b = rand(rng, 1, 2, 5, 5), rand(rng, 4, 2, 3, 3), rand(rng, 4)
    out = conv2d(x, w, b, stride=2, pad=1)
    ref = conv_oracle(x.data, w.data, b.data, 2, 1)
    assert out.shape == ref.shape == (1, 4, 3, 3)
    np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (1, 2, 0), (3, 1, 1), (3, 2, 0), (7, 2, 3)])
def test_conv_oracle_various(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride + pad)
    x, w, b = rand(rng, 2, 3, 9, 8), rand(rng, 2, 3, k, k), rand(rng, 2)
    np.testing.assert_allclose(conv2d(x, w, b, stride, pad).data, conv_oracle(x.data, w.data, b.data, stride, pad),
                               rtol=1e-5, atol=1e-5)


def test_conv_shape_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError, match="channels"):
        conv2d(rand(rng, 1, 2, 5, 5), rand(rng, 1, 3, 3, 3))
    with pytest.raises(ShapeError, match="exceeds"):
        conv2d(rand(rng, 1, 1, 2, 2), rand(rng, 1, 1, 5, 5))
    with pytest.raises(ShapeError):
        conv2d(rand(rng, 1, 1, 4, 4), rand(rng, 2, 1, 3, 3), rand(rng, 3))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 5), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_output_extent_matches_window_count(h, w, k, stride, pad):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    # enumerate window origins on the padded grid
    n_y = len([y for y in range(0, h + 2 * pad) if y + k <= h + 2 * pad and y % stride == 0])
    n_x = len([x for x in range(0, w + 2 * pad) if x + k <= w + 2 * pad and x % stride == 0])
    out = conv2d(Tensor(np.zeros((1, 1, h, w))), Tensor(np.zeros((1, 1, k, k))), stride=stride, pad=pad)
    assert out.shape[2:] == (n_y, n_x)
    if pad < k:
        assert maxpool2d(Tensor(np.zeros((1, 1, h, w))), k, stride, pad).shape[2:] == (n_y, n_x)


# --------------------------------------------------------------------------
# maxpool2d


def test_pool_constant():
    out = maxpool2d(Tensor(np.full((1, 2, 6, 6), 4.0)), 3, 2, 1)
    assert np.all(out.data == 4.0)


def test_pool_known_values():
    x = np.arange(1, 17, dtype=np.float32).reshape(1, 1, 4, 4)
    out = maxpool2d(Tensor(x), 2, 2, 0)
    np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [14, 16]])


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)])
def test_pool_matches_window_scan(k, stride, pad):
    rng = np.random.default_rng(k + stride + pad)
    x = rand(rng, 2, 3, 7, 6)
    np.testing.assert_array_equal(maxpool2d(x, k, stride, pad).data, pool_oracle(x.data, k, stride, pad))


def test_pool_tie_goes_to_first_position():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(sum_all(maxpool2d(x, 2, 2, 0)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 5, 1, 0)


# --------------------------------------------------------------------------
# batchnorm2d


def test_bn_normalized_input_unchanged():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = batchnorm2d(Tensor(x.astype(np.float32)), Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState.fresh(3), True)
    np.testing.assert_allclose(out.data, x, atol=1e-3)


def test_bn_zero_gamma_gives_beta():
    rng = np.random.default_rng(4)
    beta = np.array([0.5, -2.0], dtype=np.float32)
    out = batchnorm2d(rand(rng, 2, 2, 3, 3), Tensor(np.zeros(2)), Tensor(beta), BatchNormState.fresh(2), True)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 2, 1, 1), out.shape))


def test_bn_formula_oracle_and_running_update():
    rng = np.random.default_rng(5)
    x = rand(rng, 3, 2, 4, 5)
    gamma, beta = rand(rng, 2), rand(rng, 2)
    state = BatchNormState.fresh(2)
    out = batchnorm2d(x, gamma, beta, state, training=True, momentum=0.9, eps=1e-5)
    xd = x.data.astype(np.float64)
    for c in range(2):
        vals = xd[:, c]
        mu, var = vals.mean(), vals.var()
        ref = (vals - mu) / np.sqrt(var + 1e-5) * gamma.data[c] + beta.data[c]
        np.testing.assert_allclose(out.data[:, c], ref, atol=1e-5)
        assert state.running_mean[c] == pytest.approx(0.1 * mu, abs=1e-6)
        assert state.running_var[c] == pytest.approx(0.9 + 0.1 * vals.var(ddof=1), abs=1e-6)


def test_bn_eval_uses_running_state():
    state = BatchNormState(np.array([1.0], dtype=np.float32), np.array([4.0], dtype=np.float32))
    x = Tensor(np.full((1, 1, 2, 2), 3.0))
    out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=False, eps=0.0)
    np.testing.assert_allclose(out.data, 1.0)
    assert state.running_mean[0] == 1.0


def test_bn_rejects_degenerate_extent():
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1), True)
    with pytest.raises(ShapeError):
        batchnorm2d(Tensor(np.zeros((0, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1), False)


# --------------------------------------------------------------------------
# activations, upsampling, add, bce


def test_activations():
    assert sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).data.item() == 0.5
    assert np.all(relu(Tensor(-np.abs(np.random.default_rng(0).standard_normal((2, 2, 3, 3))) - 1e-3)).data == 0)
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(activation(Tensor(x), "relu").data, np.maximum(x, 0))
    sig = activation(Tensor(x), "sigmoid").data
    ref = np.array([1 / (1 + math.exp(-v)) for v in x.ravel().tolist()], dtype=np.float32).reshape(x.shape)
    np.testing.assert_allclose(sig, ref, rtol=1e-6)
    assert np.all((sig > 0) & (sig < 1))
    with pytest.raises(ValueError):
        activation(Tensor(x), "tanh")


@settings(max_examples=50, deadline=None)
@given(st.floats(-15, 15))
def test_sigmoid_open_interval(v):
    s = sigmoid(Tensor(np.full((1, 1, 1, 1), v, dtype=np.float32))).data.item()
    assert 0 < s < 1


def test_upsample_constant_and_degenerate():
    out = upsample_bilinear(Tensor(np.full((1, 2, 3, 5), 7.0)), 8, 11)
    np.testing.assert_allclose(out.data, 7.0, rtol=1e-6)
    out = upsample_bilinear(Tensor(np.full((2, 1, 1, 1), -1.5)), 4, 6)
    assert out.shape == (2, 1, 4, 6) and np.all(out.data == -1.5)
    with pytest.raises(ShapeError):
        upsample_bilinear(Tensor(np.ones((1, 1, 2, 2))), 0, 3)


@pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((3, 5), (12, 7)), ((4, 4), (32, 32))])
def test_upsample_matches_per_pixel_oracle(src, dst):
    img = np.random.default_rng(2).standard_normal(src)
    out = upsample_bilinear(Tensor(img.reshape(1, 1, *src)), *dst)
    np.testing.assert_allclose(out.data[0, 0], bilinear_oracle(img, *dst), atol=1e-6)


def test_add():
    rng = np.random.default_rng(0)
    a = rand(rng, 2, 3, 4, 4, requires_grad=True)
    b = rand(rng, 2, 3, 4, 4, requires_grad=True)
    np.testing.assert_array_equal(add(a, Tensor(np.zeros(a.shape))).data, a.data)
    np.testing.assert_array_equal(add(a, b).data, a.data + b.data)
    backward(sum_all(add(a, b)))
    np.testing.assert_array_equal(a.grad, np.ones(a.shape))
    with pytest.raises(ShapeError):
        add(a, rand(rng, 2, 3, 4, 5))


def test_bce_values():
    assert bce_sum(Tensor(np.full((1, 1, 1, 1), 0.5)), np.ones((1, 1, 1, 1))).item() == pytest.approx(math.log(2), abs=1e-6)
    y = (np.random.default_rng(0).random((1, 1, 8, 8)) > 0.5).astype(np.float32)
    assert bce_sum(Tensor(y.copy()), y).item() <= y.size * 1e-6
    with pytest.raises(ShapeError):
        bce_sum(Tensor(np.full((1, 1, 2, 2), 0.5)), np.ones((1, 1, 2, 3)))


def test_bce_loop_oracle():
    rng = np.random.default_rng(7)
    p = rng.uniform(0.01, 0.99, (2, 1, 5, 6))
    y = (rng.random(p.shape) > 0.5).astype(np.float64)
    ref = -sum(yy * math.log(pp) + (1 - yy) * math.log(1 - pp) for pp, yy in zip(p.ravel(), y.ravel()))
    assert bce_sum(Tensor(p.astype(np.float32)), y).item() == pytest.approx(ref, rel=1e-5)
    assert bce_sum(Tensor(p.astype(np.float32)), y, reduction="mean").item() == pytest.approx(ref / p.size, rel=1e-5)


# --------------------------------------------------------------------------
# tape and backward


def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 2, 3, 3)), requires_grad=True)
    backward(sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones(x.shape))


def test_fan_out_accumulates():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)), requires_grad=True)
    backward(sum_all(add(add(x, x), scale(x, 3.0))))
    np.testing.assert_array_equal(x.grad, np.full(x.shape, 5.0))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(relu(x))


def test_tape_records_in_order_and_is_consumed():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(sigmoid(relu(x)))
    assert [op.name for op in tape.ops] == ["relu", "sigmoid", "sum"]
    backward(loss)
    assert len(tape) == 0


def test_non_finite_raises():
    with pytest.raises(NumericError):
        relu(Tensor(np.array([[[[np.nan]]]], dtype=np.float32)))
    with pytest.raises(NumericError):
        add(Tensor(np.full((1, 1, 1, 1), 3e38, dtype=np.float32)), Tensor(np.full((1, 1, 1, 1), 3e38, dtype=np.float32)))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = rand(rng, 2, 3, 16, 16, requires_grad=True)
        w = rand(rng, 4, 3, 3, 3, requires_grad=True)
        y = maxpool2d(relu(conv2d(x, w, None, 2, 1)), 3, 2, 1)
        loss = bce_sum(sigmoid(upsample_bilinear(y, 16, 16)), np.ones((2, 4, 16, 16)))
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


# --------------------------------------------------------------------------
# gradient checks


def _square(t):
    # test-only elementwise square, recorded like any library op
    return _record("square", (t,), t.data * t.data, lambda g: (2 * t.data * g,))


def test_grad_check_quadratic():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)), requires_grad=True)
    assert grad_check(lambda: sum_all(_square(x)), [x]) < 1e-6


def _readout(out, rng_seed):
    target = (np.random.default_rng(rng_seed).random(out.shape) > 0.5).astype(np.float64)
    return bce_sum(sigmoid(out), target)


LAYER_CASES = {
    "conv2d": lambda rng: _case_conv(rng),
    "conv2d_1x1_stride2": lambda rng: _case_conv(rng, k=1, stride=2, pad=0),
    "conv2d_7x7": lambda rng: _case_conv(rng, k=7, stride=2, pad=3),
    "maxpool2d": lambda rng: _case_unary(rng, lambda x: maxpool2d(x, 3, 2, 1)),
    "batchnorm_train": lambda rng: _case_bn(rng, True),
    "batchnorm_eval": lambda rng: _case_bn(rng, False),
    "relu": lambda rng: _case_unary(rng, relu, margin=0.01),
    "sigmoid": lambda rng: _case_unary(rng, sigmoid),
    "upsample": lambda rng: _case_unary(rng, lambda x: upsample_bilinear(x, 9, 7)),
    "add": lambda rng: _case_add(rng),
    "bce": lambda rng: _case_bce(rng),
}


def _case_unary(rng, fn, margin=0.0):
    data = rng.standard_normal((2, 2, 5, 4))
    # keep inputs clear of the kink so a finite-difference step cannot cross it
    data = np.where(data >= 0, data + margin, data - margin)
    x = Tensor(data, requires_grad=True)
    seed = int(rng.integers(1 << 30))
    return (lambda: _readout(fn(x), seed)), [x]


def _case_conv(rng, k=3, stride=2, pad=1):
    x = Tensor(rng.standard_normal((2, 3, 7, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, k, k)) * 0.3, requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    seed = int(rng.integers(1 << 30))
    return (lambda: _readout(conv2d(x, w, b, stride, pad), seed)), [x, w, b]


def _case_bn(rng, training):
    x = Tensor(rng.standard_normal((3, 2, 4, 3)) * 2 + 1, requires_grad=True)
    g = Tensor(rng.standard_normal(2), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    state = BatchNormState(rng.standard_normal(2).astype(np.float32), rng.uniform(0.5, 2, 2).astype(np.float32))
    seed = int(rng.integers(1 << 30))
    return (lambda: _readout(batchnorm2d(x, g, b, state, training), seed)), [x, g, b]


def _case_add(rng):
    a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    seed = int(rng.integers(1 << 30))
    return (lambda: _readout(add(a, b), seed)), [a, b]


def _case_bce(rng):
    p = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 4)), requires_grad=True)
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    return (lambda: bce_sum(p, y)), [p]


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_layer_gradients(name, seed):
    builder, params = LAYER_CASES[name](np.random.default_rng(seed))
    assert grad_check(builder, params, eps=1e-3) < 1e-3


def test_grad_check_restores_params():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)).astype(np.float32), requires_grad=True)
    before = x.data.copy()
    grad_check(lambda: _readout(relu(x), 0), [x])
    assert x.data.dtype == np.float32 and x.data.tobytes() == before.tobytes()
