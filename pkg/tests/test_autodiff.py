"""Tensor library: op semantics, adjoints, optimizer, gradient oracle."""

import math

import numpy as np
import pytest

from bicodec import autodiff as ad


def rng(seed=0):
    return np.random.default_rng(seed)


# -- conv2d -------------------------------------------------------------------


def conv2d_reference(x, w, b, stride, padding):
    """Direct sliding-window sum, the independent oracle for conv2d."""
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def test_conv2d_identity_kernel():
    x = ad.tensor(rng().random((2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ad.conv2d(x, ad.tensor(w), ad.tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_zero_weights():
    x = ad.tensor(rng().random((1, 2, 4, 6)))
    out = ad.conv2d(x, ad.tensor(np.zeros((4, 2, 3, 3))), ad.tensor(np.zeros(4)), padding=1)
    assert np.all(out.data == 0.0)


def test_conv2d_hand_example():
    # 3x3 input 1..9 against a 2x2 kernel [[1,0],[0,1]]
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = ad.conv2d(ad.tensor(x), ad.tensor(w), ad.tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data[0, 0], [[6.0, 8.0], [12.0, 14.0]])


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_reference(stride, padding):
    r = rng(7)
    x = r.standard_normal((2, 3, 8, 7))
    w = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    out = ad.conv2d(ad.tensor(x), ad.tensor(w), ad.tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, stride, padding), atol=1e-12)


def test_conv2d_shape_errors():
    x = ad.tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(x, ad.tensor(np.zeros((2, 4, 3, 3))), None, padding=1)
    with pytest.raises(ValueError, match="bias"):
        ad.conv2d(x, ad.tensor(np.zeros((2, 3, 3, 3))), ad.tensor(np.zeros(5)), padding=1)
    with pytest.raises(ValueError, match="kernel"):
        ad.conv2d(x, ad.tensor(np.zeros((2, 3, 9, 9))), None)


# -- conv2d_transpose -----------------------------------------------------------


def test_conv_transpose_identity():
    x = ad.tensor(rng(1).random((2, 3, 4, 4)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ad.conv2d_transpose(x, ad.tensor(w))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_transpose_single_tap_spread():
    v = 2.5
    k = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    x = np.full((1, 1, 1, 1), v)
    out = ad.conv2d_transpose(ad.tensor(x), ad.tensor(k), stride=2)
    np.testing.assert_array_equal(out.data[0, 0], v * k[0, 0])


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (2, 0)])
def test_conv_transpose_adjoint_identity(stride, padding):
    # <conv2d(x, w), y> == <x, conv2d_transpose(y, w)> for random instances
    # (sizes chosen so the strided geometry round-trips exactly)
    r = rng(3)
    x = r.standard_normal((2, 3, 5, 5))
    w = r.standard_normal((4, 3, 3, 3))
    fwd = ad.conv2d(ad.tensor(x), ad.tensor(w), stride=stride, padding=padding)
    y = r.standard_normal(fwd.data.shape)
    adj = ad.conv2d_transpose(ad.tensor(y), ad.tensor(w), stride=stride, padding=padding)
    lhs = float(np.sum(fwd.data * y))
    rhs = float(np.sum(x * adj.data))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose_output_size():
    x = ad.tensor(np.zeros((1, 2, 5, 5)))
    w = ad.tensor(np.zeros((2, 3, 3, 3)))
    out = ad.conv2d_transpose(x, w, stride=2, padding=1)
    assert out.shape == (1, 3, 9, 9)


# -- leaky_relu ------------------------------------------------------------------


def test_leaky_relu_values():
    x = ad.tensor([0.0, 2.0, -3.0])
    out = ad.leaky_relu(x, 0.2)
    np.testing.assert_allclose(out.data, [0.0, 2.0, -0.6])
    out2 = ad.leaky_relu(ad.tensor([2.0]), 0.01)
    assert out2.data[0] == 2.0


def test_leaky_relu_slope_domain():
    with pytest.raises(ValueError):
        ad.leaky_relu(ad.tensor([1.0]), 1.0)


# -- bilinear_sample --------------------------------------------------------------


def _grid_coords(bsz, h, w):
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys]), (bsz, 2, h, w)).copy()


def test_bilinear_integer_grid_exact():
    src = rng(5).random((2, 3, 6, 7))
    coords = _grid_coords(2, 6, 7)
    out = ad.bilinear_sample(ad.tensor(src), ad.tensor(coords))
    assert np.array_equal(out.data, src)


def test_bilinear_halfway():
    # row [0, 10, 20], sample at x = 0.5 -> 5 (hand bilinear closed form)
    src = np.array([0.0, 10.0, 20.0]).reshape(1, 1, 1, 3)
    coords = np.zeros((1, 2, 1, 1))
    coords[0, 0] = 0.5
    out = ad.bilinear_sample(ad.tensor(src), ad.tensor(coords))
    assert out.data[0, 0, 0, 0] == pytest.approx(5.0)


def test_bilinear_border_clamp():
    src = np.array([3.0, 10.0, 20.0]).reshape(1, 1, 1, 3)
    coords = np.zeros((1, 2, 1, 1))
    coords[0, 0] = -3.0
    out = ad.bilinear_sample(ad.tensor(src), ad.tensor(coords))
    assert out.data[0, 0, 0, 0] == 3.0


# -- backprop ----------------------------------------------------------------------


def test_backprop_sum_gives_ones():
    x = ad.parameter(rng(2).random((3, 4)))
    ad.reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backprop_square():
    x = ad.parameter(rng(3).random((5,)))
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)


def test_backprop_requires_scalar():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_backprop_deterministic():
    def run():
        r = rng(11)
        x = ad.parameter(r.random((2, 3, 4, 4)))
        w = ad.parameter(r.standard_normal((2, 3, 3, 3)) * 0.1)
        out = ad.leaky_relu(ad.conv2d(x, w, padding=1))
        loss = (out * out).sum()
        loss.backward()
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


def test_shared_subexpression_accumulates():
    x = ad.parameter(np.array([3.0]))
    y = x * x + x * 2.0  # d/dx = 2x + 2
    y.sum().backward()
    assert x.grad[0] == pytest.approx(8.0)


# -- finite-difference gradient checks ------------------------------------------


def test_gradcheck_elementwise_chain():
    r = rng(13)
    x = ad.parameter(r.random((2, 3, 4, 4)) + 0.1)

    def f():
        return (ad.sigmoid(x) * ad.tanh(x) + ad.softplus(x) / (x + 2.0)).sum()

    assert ad.gradient_check(f, [x]) < 1e-4


def test_gradcheck_conv_ops():
    r = rng(17)
    x = ad.parameter(r.standard_normal((2, 3, 6, 6)) * 0.5)
    w = ad.parameter(r.standard_normal((4, 3, 3, 3)) * 0.3)
    b = ad.parameter(r.standard_normal(4) * 0.1)

    def f():
        out = ad.conv2d(x, w, b, stride=2, padding=1)
        return (out * out).sum()

    assert ad.gradient_check(f, [x, w, b]) < 1e-4


def test_gradcheck_conv_transpose():
    r = rng(19)
    x = ad.parameter(r.standard_normal((1, 4, 4, 4)) * 0.5)
    w = ad.parameter(r.standard_normal((4, 2, 2, 2)) * 0.3)
    b = ad.parameter(r.standard_normal(2) * 0.1)

    def f():
        out = ad.conv2d_transpose(x, w, b, stride=2)
        return (out * out).sum()

    assert ad.gradient_check(f, [x, w, b]) < 1e-4


def test_gradcheck_bilinear_sample():
    r = rng(23)
    src = ad.parameter(r.random((1, 2, 6, 6)))
    # interior coords, away from clamp boundaries and integer crossings
    coords = ad.parameter(1.0 + 3.0 * r.random((1, 2, 5, 5)) + 0.25)

    def f():
        out = ad.bilinear_sample(src, coords)
        return (out * out).sum()

    assert ad.gradient_check(f, [src, coords]) < 1e-4


def test_gradcheck_pad_and_concat():
    r = rng(29)
    a = ad.parameter(r.random((1, 2, 3, 3)))
    b = ad.parameter(r.random((1, 3, 3, 3)))

    def f():
        cat = ad.concat([a, b], axis=1)
        padded = ad.pad2d(cat, 1, mode="edge")
        return (padded * padded).sum()

    assert ad.gradient_check(f, [a, b]) < 1e-4


def test_gradcheck_matmul_and_cdf():
    r = rng(31)
    a = ad.parameter(r.standard_normal((3, 2, 4)))
    b = ad.parameter(r.standard_normal((3, 4, 2)))

    def f():
        return (ad.std_normal_cdf(ad.matmul(a, b))).sum()

    assert ad.gradient_check(f, [a, b]) < 1e-4


# -- grad clipping ----------------------------------------------------------------


def test_clip_noop_below_max():
    p = ad.parameter(np.zeros(2))
    p.grad = np.array([0.3, 0.4])  # norm 0.5
    scale = ad.clip_global_grad_norm([p], 1.0)
    assert scale == 1.0
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])


def test_clip_scales_to_max():
    p = ad.parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    scale = ad.clip_global_grad_norm([p], 1.0)
    assert scale == pytest.approx(0.2)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_clip_postcondition_norm():
    r = rng(37)
    params = [ad.parameter(np.zeros(5)) for _ in range(3)]
    for p in params:
        p.grad = r.standard_normal(5)
    before = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    ad.clip_global_grad_norm(params, 1.0)
    after = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    assert after == pytest.approx(min(before, 1.0), abs=1e-12)


# -- Adam ---------------------------------------------------------------------------


def test_adam_zero_grad_no_change():
    p = ad.parameter(np.array([1.0, -2.0]))
    st = ad.AdamState({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    ad.adam_step(st, {"p": p})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.t == 1


def test_adam_first_step_sign():
    p = ad.parameter(np.array([1.0, 1.0]))
    st = ad.AdamState({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -3.0])
    ad.adam_step(st, {"p": p})
    np.testing.assert_allclose(p.data, [1.0 - 0.1, 1.0 + 0.1], atol=1e-6)


def test_adam_minimizes_quadratic():
    # scalar simulation oracle: 100 steps on f(x) = x^2 from x = 1
    p = ad.parameter(np.array([1.0]))
    st = ad.AdamState({"p": p}, lr=0.1)
    values = [abs(p.data[0])]
    for _ in range(100):
        p.grad = 2.0 * p.data
        ad.adam_step(st, {"p": p})
        values.append(abs(p.data[0]))
    assert values[-1] < 1.0
    # decreasing in trend: windowed means fall
    w = np.array(values)
    assert w[:20].mean() > w[-20:].mean()


def test_adam_shape_mismatch():
    p = ad.parameter(np.zeros(3))
    st = ad.AdamState({"p": p})
    p.grad = np.zeros(4)
    with pytest.raises(ValueError, match="shape"):
        ad.adam_step(st, {"p": p})


# -- uniform noise -----------------------------------------------------------------


def test_noise_support_bound():
    x = ad.tensor(np.zeros((4, 4)))
    out = ad.add_uniform_noise(x, rng(0))
    assert np.all(np.abs(out.data - x.data) <= 0.5)


def test_noise_seed_determinism():
    x = ad.tensor(np.zeros(16))
    a = ad.add_uniform_noise(x, rng(42)).data
    b = ad.add_uniform_noise(x, rng(42)).data
    assert np.array_equal(a, b)


def test_noise_monte_carlo_mean():
    x = ad.tensor(np.zeros(10**6))
    out = ad.add_uniform_noise(x, rng(7))
    assert abs(float(np.mean(out.data - x.data))) < 0.002


def test_noise_gradient_passthrough():
    x = ad.parameter(np.ones(5))
    out = ad.add_uniform_noise(x, rng(1))
    (out * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, 3.0 * np.ones(5))


# -- misc ops ------------------------------------------------------------------------


def test_round_half_away():
    x = ad.tensor([1.4, -1.5, 1.5, -2.5, 0.49, -0.5])
    out = ad.round_half_away(x)
    np.testing.assert_array_equal(out.data, [1.0, -2.0, 2.0, -3.0, 0.0, -1.0])


def test_maximum_tie_goes_to_first():
    a = ad.parameter(np.array([1.0, 2.0]))
    b = ad.parameter(np.array([1.0, 5.0]))
    ad.maximum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


def test_no_grad_blocks_recording():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = (x * 2.0).sum()
    assert y._backward is None and y._parents == ()


def test_debug_checks_flag():
    ad.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.log(ad.tensor([-1.0]))
    finally:
        ad.set_debug_checks(False)
