"""Tensor engine tests: frozen forward values plus finite-difference checks.

All gradient checks run in float64 with central differences (h = 1e-5) and a
relative-error bound of 1e-4.
"""

import numpy as np
import pytest

from forgeloc import autograd as ag
from forgeloc.autograd import (Adam, Tensor, add, bce_loss, concat_channels,
                               conv2d, conv_output_size, matmul, maxpool2d,
                               no_grad, relu, reshape, scale_mul, sigmoid,
                               transpose_last2, tsum, upsample_nearest)

FD_H = 1e-5
FD_TOL = 1e-4


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def numeric_grads(build_loss, leaves, h=FD_H):
    """Central-difference gradients of build_loss() w.r.t. each leaf."""
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                lp = float(build_loss().data)
            flat[i] = orig - h
            with no_grad():
                lm = float(build_loss().data)
            flat[i] = orig
            gf[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def check_grads(build_loss, leaves, tol=FD_TOL):
    """Compare analytic gradients of build_loss() against finite differences."""
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    loss.backward()
    for leaf, num in zip(leaves, numeric_grads(build_loss, leaves)):
        ana = leaf.grad
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        rel = np.abs(ana - num) / denom
        assert rel.max() < tol, f"max rel grad error {rel.max():.3e} >= {tol}"


# ---------------------------------------------------------------------------
# conv2d

def test_conv_identity_kernel():
    x = t64(np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3), requires_grad=False)
    k = t64([[[[1.0]]]], requires_grad=False)
    out = conv2d(x, k)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_ones_box_sum():
    # 3x3 ones kernel over 5x5 ones input, no padding: every output cell is 9
    x = t64(np.ones((1, 1, 5, 5)), requires_grad=False)
    k = t64(np.ones((1, 1, 3, 3)), requires_grad=False)
    out = conv2d(x, k)
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(out.data, 9.0)


def test_conv_is_cross_correlation():
    # unit impulse at the center reproduces the kernel flipped in both axes
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    k = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    out = conv2d(t64(x, False), t64(k, False), padding=1)
    np.testing.assert_array_equal(out.data[0, 0, 1:4, 1:4], k[0, 0, ::-1, ::-1])


def test_conv_dilation_taps():
    # dilation=2 with k=3 samples offsets {0, 2, 4}
    x = t64(np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5), requires_grad=False)
    k = t64(np.ones((1, 1, 3, 3)), requires_grad=False)
    out = conv2d(x, k, dilation=2)
    assert out.shape == (1, 1, 1, 1)
    expect = sum(x.data[0, 0, i, j] for i in (0, 2, 4) for j in (0, 2, 4))
    assert out.data.item() == expect == 108.0


def test_conv_output_size_formula():
    assert conv_output_size(7, 3, 2, 2, 2) == 4
    assert conv_output_size(64, 3, 1, 1, 1) == 64
    assert conv_output_size(5, 5, 1, 1, 0) == 1
    assert conv_output_size(6, 7, 1, 7, 21) == 6  # same padding with dilation 7


def test_conv_same_padding_preserves_dims():
    rng = np.random.default_rng(0)
    x = t64(rng.normal(size=(2, 3, 8, 9)), requires_grad=False)
    for d in (1, 2, 4):
        pad = d * (3 - 1) // 2
        k = t64(rng.normal(size=(5, 3, 3, 3)), requires_grad=False)
        out = conv2d(x, k, dilation=d, padding=pad)
        assert out.shape == (2, 5, 8, 9)


def test_conv_channel_mismatch_raises():
    x = t64(np.ones((1, 3, 4, 4)), False)
    k = t64(np.ones((2, 4, 3, 3)), False)
    with pytest.raises(ValueError, match="channel"):
        conv2d(x, k)


def test_conv_grads_basic():
    rng = np.random.default_rng(1)
    x = t64(rng.normal(size=(2, 3, 5, 6)))
    k = t64(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    b = t64(rng.normal(size=(4,)))
    check_grads(lambda: tsum(conv2d(x, k, b, padding=1)), [x, k, b])


def test_conv_grads_strided_dilated():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(1, 2, 9, 8)))
    k = t64(rng.normal(size=(3, 2, 3, 3)) * 0.3)
    b = t64(rng.normal(size=(3,)))

    def build():
        h = conv2d(x, k, b, stride=2, dilation=2, padding=2)
        return tsum(sigmoid(h))

    check_grads(build, [x, k, b])


def test_conv_grad_skips_fixed_kernel():
    rng = np.random.default_rng(3)
    x = t64(rng.normal(size=(1, 1, 6, 6)))
    k = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=False)
    loss = tsum(conv2d(x, k))
    loss.backward()
    assert k.grad is None
    assert x.grad is not None and np.abs(x.grad).sum() > 0


# ---------------------------------------------------------------------------
# pooling / upsampling

def test_maxpool_forward_and_tie_routing():
    x = t64([[[[5.0, 5.0], [3.0, 1.0]]]])
    out = maxpool2d(x)
    assert out.data.item() == 5.0
    tsum(out).backward()
    # tie between (0,0) and (0,1): gradient goes to the first in row-major order
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_odd_dims_padded():
    x = t64(np.arange(1.0, 10.0).reshape(1, 1, 3, 3), requires_grad=False)
    out = maxpool2d(x)
    np.testing.assert_array_equal(out.data[0, 0], [[5.0, 6.0], [8.0, 9.0]])


def test_maxpool_grads():
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(2, 2, 5, 5)))  # distinct values: ties measure-zero
    check_grads(lambda: tsum(sigmoid(maxpool2d(x))), [x])


def test_upsample_forward():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]], requires_grad=False)
    out = upsample_nearest(x)
    np.testing.assert_array_equal(
        out.data[0, 0],
        [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_backward_sums_blocks():
    x = t64(np.zeros((1, 1, 2, 2)))
    tsum(upsample_nearest(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_upsample_grads():
    rng = np.random.default_rng(5)
    x = t64(rng.normal(size=(2, 3, 3, 4)))
    check_grads(lambda: tsum(sigmoid(upsample_nearest(x))), [x])


# ---------------------------------------------------------------------------
# matmul and views

def test_matmul_2d_frozen():
    a = t64([[1.0, 2.0], [3.0, 4.0]], False)
    b = t64([[5.0, 6.0], [7.0, 8.0]], False)
    np.testing.assert_array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_batched_matches_loop():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(3, 4, 5))
    b = rng.normal(size=(3, 5, 2))
    out = matmul(t64(a, False), t64(b, False)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], a[i] @ b[i])


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ValueError, match="inner dims"):
        matmul(t64(np.ones((2, 3)), False), t64(np.ones((2, 3)), False))


def test_matmul_grads():
    rng = np.random.default_rng(7)
    a = t64(rng.normal(size=(4, 3)))
    b = t64(rng.normal(size=(3, 5)))
    check_grads(lambda: tsum(sigmoid(matmul(a, b))), [a, b])


def test_matmul_batched_grads():
    rng = np.random.default_rng(8)
    a = t64(rng.normal(size=(2, 3, 4)))
    b = t64(rng.normal(size=(2, 4, 3)))
    check_grads(lambda: tsum(sigmoid(matmul(a, b))), [a, b])


def test_reshape_transpose_grads():
    rng = np.random.default_rng(9)
    x = t64(rng.normal(size=(2, 3, 2, 2)))

    def build():
        m = reshape(x, (2, 3, 4))        # (n, c, h*w)
        mt = transpose_last2(m)          # (n, h*w, c)
        return tsum(sigmoid(matmul(mt, m)))

    check_grads(build, [x])


# ---------------------------------------------------------------------------
# elementwise and reductions

def test_add_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        add(t64(np.ones((2, 2)), False), t64(np.ones((2, 3)), False))


def test_relu_forward():
    x = t64([[-1.0, 0.0, 2.0]], False)
    np.testing.assert_array_equal(relu(x).data, [[0.0, 0.0, 2.0]])


def test_relu_grads():
    rng = np.random.default_rng(10)
    # keep values away from the kink at 0
    vals = rng.normal(size=(3, 4))
    vals[np.abs(vals) < 0.1] += 0.2
    x = t64(vals)
    check_grads(lambda: tsum(sigmoid(relu(x))), [x])


def test_sigmoid_frozen_values():
    x = t64([0.0, 20.0], False)
    out = sigmoid(x).data
    assert out[0] == 0.5
    np.testing.assert_allclose(out[1], 0.9999999979388463, rtol=1e-12)


def test_sigmoid_open_interval_float32():
    x = Tensor(np.array([-200.0, 200.0], dtype=np.float32))
    out = sigmoid(x).data
    assert out.dtype == np.float32
    assert 0.0 < out[0] and out[1] < 1.0


def test_sigmoid_derivative_at_zero():
    x = t64([0.0])
    tsum(sigmoid(x)).backward()
    np.testing.assert_allclose(x.grad, [0.25], rtol=1e-12)


def test_sigmoid_grads():
    rng = np.random.default_rng(11)
    x = t64(rng.normal(size=(3, 3)) * 2)
    check_grads(lambda: tsum(sigmoid(x)), [x])


def test_scale_mul_identity_at_zero():
    rng = np.random.default_rng(12)
    s = t64([0.0])
    x = t64(rng.normal(size=(1, 2, 3, 3)), False)
    base = t64(rng.normal(size=(1, 2, 3, 3)), False)
    out = add(scale_mul(s, x), base)
    np.testing.assert_array_equal(out.data, base.data)


def test_scale_mul_grads():
    rng = np.random.default_rng(13)
    s = t64([0.7])
    x = t64(rng.normal(size=(2, 3)))
    check_grads(lambda: tsum(sigmoid(scale_mul(s, x))), [s, x])


def test_concat_channels_roundtrip_and_grads():
    rng = np.random.default_rng(14)
    a = t64(rng.normal(size=(2, 2, 3, 3)))
    b = t64(rng.normal(size=(2, 3, 3, 3)))
    out = concat_channels([a, b])
    assert out.shape == (2, 5, 3, 3)
    np.testing.assert_array_equal(out.data[:, :2], a.data)
    np.testing.assert_array_equal(out.data[:, 2:], b.data)
    check_grads(lambda: tsum(sigmoid(concat_channels([a, b]))), [a, b])


def test_concat_channels_spatial_mismatch():
    with pytest.raises(ValueError, match="dims differ"):
        concat_channels([t64(np.ones((1, 1, 2, 2)), False),
                         t64(np.ones((1, 1, 3, 2)), False)])


# ---------------------------------------------------------------------------
# binary cross-entropy

def test_bce_frozen_values():
    p = t64([[0.5]], False)
    assert bce_loss(p, np.array([[1.0]])).data.item() == pytest.approx(
        0.6931471805599453, rel=1e-12)
    p = t64([[0.9, 0.2]], False)
    assert bce_loss(p, np.array([[1.0, 0.0]])).data.item() == pytest.approx(
        0.164252033486018, rel=1e-12)


def test_bce_clamps_endpoints():
    p = t64([[0.0, 1.0]], False)
    loss = bce_loss(p, np.array([[0.0, 1.0]]))
    assert np.isfinite(loss.data.item())
    assert loss.data.item() == pytest.approx(1e-7, rel=1e-3)


def test_bce_rejects_nonbinary_target():
    with pytest.raises(ValueError, match="0, 1"):
        bce_loss(t64([[0.5]], False), np.array([[0.3]]))


def test_bce_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        bce_loss(t64([[0.5]], False), np.array([0.5, 0.5]))


def test_bce_grads():
    rng = np.random.default_rng(15)
    x = t64(rng.normal(size=(2, 1, 4, 4)))
    target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    check_grads(lambda: bce_loss(sigmoid(x), target), [x])


# ---------------------------------------------------------------------------
# graph mechanics

def test_backward_of_sum_is_ones():
    x = t64(np.zeros((2, 3)))
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_disconnected_leaf_has_zero_grad():
    x = t64(np.ones((2, 2)))
    y = t64(np.ones((2, 2)))
    tsum(x).backward()
    np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))


def test_backward_requires_scalar():
    x = t64(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        relu(x).backward()


def test_double_backward_rejected():
    x = t64(np.ones((2, 2)))
    loss = tsum(sigmoid(x))
    loss.backward()
    with pytest.raises(RuntimeError, match="re-record"):
        loss.backward()


def test_grad_accumulates_across_fresh_graphs():
    x = t64(np.ones((2, 2)))
    tsum(x).backward()
    tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_shared_subexpression_accumulates():
    x = t64([2.0])
    y = add(x, x)  # dy/dx = 2
    tsum(y).backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_diamond_graph_order():
    # z = relu(x) used twice through different depths; FD validates ordering
    rng = np.random.default_rng(16)
    vals = rng.normal(size=(3, 3)) + 0.5
    x = t64(vals)

    def build():
        z = relu(x)
        a = sigmoid(z)
        b = add(z, a)
        return tsum(sigmoid(b))

    check_grads(build, [x])


def test_no_grad_blocks_recording():
    x = t64(np.ones((2, 2)))
    with no_grad():
        y = tsum(sigmoid(x))
    assert y._grad_fn is None and not y.requires_grad
    assert ag._grad_enabled  # restored on exit


def test_requires_grad_propagation():
    a = t64(np.ones((2, 2)), requires_grad=False)
    b = t64(np.ones((2, 2)), requires_grad=False)
    assert not add(a, b).requires_grad
    c = t64(np.ones((2, 2)), requires_grad=True)
    assert add(a, c).requires_grad


def test_composite_chain_grads():
    rng = np.random.default_rng(17)
    x = t64(rng.normal(size=(1, 2, 6, 6)) * 0.5)
    k1 = t64(rng.normal(size=(3, 2, 3, 3)) * 0.3)
    b1 = t64(np.zeros(3))
    k2 = t64(rng.normal(size=(1, 3, 3, 3)) * 0.3)
    b2 = t64(np.zeros(1))
    target = (rng.random((1, 1, 3, 3)) > 0.5).astype(np.float64)

    def build():
        h = relu(conv2d(x, k1, b1, padding=1))
        h = maxpool2d(h)
        h = sigmoid(conv2d(h, k2, b2, padding=1))
        return bce_loss(h, target)

    check_grads(build, [x, k1, b1, k2, b2])


# ---------------------------------------------------------------------------
# Adam

def test_adam_default_lr():
    p = Tensor(np.zeros(1), requires_grad=True)
    assert Adam([("p", p)]).lr == 0.002


def test_adam_zero_grad_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.01)
    opt.zero_grad()
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude():
    # first step moves by ~lr * sign(grad) after bias correction
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.01)
    p.grad = np.array([0.5])
    opt.step()
    assert p.data.item() == pytest.approx(0.99, abs=1e-8)


def test_adam_two_steps_frozen():
    p = Tensor(np.array([1.0], dtype=np.float64), requires_grad=True)
    opt = Adam([("p", p)], lr=0.01)
    p.grad = np.array([0.5])
    opt.step()
    p.grad = np.array([0.25])
    opt.step()
    assert p.data.item() == pytest.approx(0.9806782040477462, rel=1e-10)
    assert opt.step_count == 2


def test_adam_rejects_nan_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("head.weight", p)], lr=0.01)
    p.grad = np.array([np.nan])
    with pytest.raises(ValueError, match="head.weight"):
        opt.step()


def test_adam_descends_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam([("p", p)], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        p.grad = 2.0 * p.data  # d/dp of p^2
        opt.step()
    assert abs(p.data.item()) < 0.1
