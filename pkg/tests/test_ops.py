import numpy as np
import pytest

from kprnet import ops
from kprnet.errors import StateError
from kprnet.gradcheck import check
from kprnet.layers import BatchNorm

TOL = 1e-4
TRIALS = 20


def conv_case(rng):
    groups = int(rng.choice([1, 2]))
    c_in = groups * int(rng.integers(1, 3))
    c_out = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    dilation = int(rng.choice([1, 2]))
    x = rng.standard_normal((2, c_in, int(rng.integers(4, 8)), int(rng.integers(4, 8))))
    kernel = rng.standard_normal((c_out, c_in // groups, k, k))
    circ = bool(rng.random() < 0.3)
    return x, kernel, stride, dilation, groups, circ


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 6))
    y, _ = ops.conv2d_forward(x, np.eye(3).reshape(3, 3, 1, 1))
    np.testing.assert_array_equal(y, x)


def test_conv_zero_kernel_grad_is_correlation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    y, cache = ops.conv2d_forward(x, np.zeros((3, 2, 3, 3)))
    assert not y.any()
    gy = rng.standard_normal(y.shape)
    gx, gk = ops.conv2d_backward(gy, cache)
    assert not gx.any()
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros_like(gk)
    for o in range(3):
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    expected[o, c, i, j] = (gy[0, o] * xp[0, c, i : i + 5, j : j + 5]).sum()
    np.testing.assert_allclose(gk, expected, rtol=1e-12)


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 7, 9))
    k = rng.standard_normal((6, 2, 3, 3))
    y, _ = ops.conv2d_forward(x, k, stride=2, dilation=2, groups=2)
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    ref = np.zeros_like(y)
    for o in range(6):
        g = o // 3
        for r in range(y.shape[2]):
            for c in range(y.shape[3]):
                patch = xp[0, 2 * g : 2 * g + 2, 2 * r : 2 * r + 5 : 2, 2 * c : 2 * c + 5 : 2]
                ref[0, o, r, c] = (patch * k[o]).sum()
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))


def test_conv_flip_equivariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 8))
    k = rng.standard_normal((3, 2, 3, 3))
    y, _ = ops.conv2d_forward(x, k)
    yf, _ = ops.conv2d_forward(x[..., ::-1], k[..., ::-1])
    np.testing.assert_allclose(yf, y[..., ::-1], rtol=1e-12, atol=1e-12)


def test_circular_padding_wraps_width():
    x = np.zeros((1, 1, 3, 4))
    x[0, 0, 1, 0] = 1.0
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 0] = 1.0  # reads the left neighbour
    y, _ = ops.conv2d_forward(x, k, circular_w=True)
    assert y[0, 0, 1, 1] == 1.0
    k2 = np.zeros((1, 1, 3, 3))
    k2[0, 0, 1, 2] = 1.0  # reads the right neighbour
    y2, _ = ops.conv2d_forward(x, k2, circular_w=True)
    assert y2[0, 0, 1, 3] == 1.0


@pytest.mark.parametrize("trial", range(TRIALS))
def test_conv_gradients(trial):
    rng = np.random.default_rng(100 + trial)
    x, kernel, stride, dilation, groups, circ = conv_case(rng)
    y, cache = ops.conv2d_forward(x, kernel, stride, dilation, groups, circular_w=circ)
    r = rng.standard_normal(y.shape)
    gx, gk = ops.conv2d_backward(r, cache)
    f = lambda: (ops.conv2d_forward(x, kernel, stride, dilation, groups, circular_w=circ)[0] * r).sum()  # noqa: E731
    assert check(f, x, gx, rng) < TOL
    assert check(f, kernel, gk, rng) < TOL


def test_relu_identity_on_non_negative():
    x = np.abs(np.random.default_rng(4).standard_normal((3, 4)))
    np.testing.assert_array_equal(ops.relu_forward(x)[0], x)


@pytest.mark.parametrize("trial", range(TRIALS))
def test_relu_gradient(trial):
    rng = np.random.default_rng(200 + trial)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.standard_normal(x.shape)
    y, cache = ops.relu_forward(x)
    f = lambda: (ops.relu_forward(x)[0] * r).sum()  # noqa: E731
    assert check(f, x, ops.relu_backward(r, cache), rng) < TOL


def test_batchnorm_zero_variance_gives_beta():
    x = np.full((5, 3), 2.5)
    gamma, beta = np.array([1.0, 2.0, 3.0]), np.array([0.1, -0.2, 0.3])
    state = {"running_mean": np.zeros(3), "running_var": np.ones(3)}
    y, _ = ops.batchnorm_forward(x, gamma, beta, state, train=True)
    np.testing.assert_allclose(y, np.broadcast_to(beta, x.shape), atol=1e-12)


def test_batchnorm_eval_without_statistics():
    bn = BatchNorm(3)
    with pytest.raises(StateError):
        bn.forward(np.zeros((2, 3)), train=False)
    bn.forward(np.random.default_rng(0).standard_normal((4, 3)), train=True)
    bn.forward(np.zeros((2, 3)), train=False)


def test_batchnorm_running_stats():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 2)) * 3 + 1
    state = {"running_mean": np.zeros(2), "running_var": np.ones(2)}
    ops.batchnorm_forward(x, np.ones(2), np.zeros(2), state, train=True, momentum=0.1)
    np.testing.assert_allclose(state["running_mean"], 0.1 * x.mean(0))
    np.testing.assert_allclose(state["running_var"], 0.9 + 0.1 * x.var(0, ddof=1))


@pytest.mark.parametrize("trial", range(TRIALS))
@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(trial, train):
    rng = np.random.default_rng(300 + trial)
    shape = (3, 2, 3, 4) if trial % 2 else (7, 3)
    c = shape[1]
    x = rng.standard_normal(shape)
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
    stats = {"running_mean": rng.standard_normal(c), "running_var": rng.uniform(0.5, 2, c), "tracked": 1}

    def run():
        return ops.batchnorm_forward(x, gamma, beta, dict(stats), train)

    r = rng.standard_normal(shape)
    y, cache = run()
    gx, gg, gb = ops.batchnorm_backward(r, cache)
    f = lambda: (run()[0] * r).sum()  # noqa: E731
    assert check(f, x, gx, rng) < TOL
    assert check(f, gamma, gg, rng) < TOL
    assert check(f, beta, gb, rng) < TOL


def test_bilinear_exact_on_linear_ramp():
    # interior samples of a linear function are reproduced exactly
    x = np.arange(4.0)[None, None, None, :].repeat(2, axis=2)
    y, _ = ops.upsample_bilinear_forward(x, 4, 8)
    np.testing.assert_allclose(y[0, 0, 0, 1:-1], (np.arange(8)[1:-1] + 0.5) / 2 - 0.5)


def test_bilinear_same_size_identity():
    x = np.random.default_rng(6).standard_normal((1, 2, 3, 5))
    np.testing.assert_array_equal(ops.upsample_bilinear_forward(x, 3, 5)[0], x)


@pytest.mark.parametrize("trial", range(TRIALS))
def test_bilinear_gradient(trial):
    rng = np.random.default_rng(400 + trial)
    x = rng.standard_normal((2, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    oh, ow = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    y, cache = ops.upsample_bilinear_forward(x, oh, ow)
    r = rng.standard_normal(y.shape)
    f = lambda: (ops.upsample_bilinear_forward(x, oh, ow)[0] * r).sum()  # noqa: E731
    assert check(f, x, ops.upsample_bilinear_backward(r, cache), rng) < TOL


def test_pad_unpad_adjoint():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 4, 5))
    g = rng.standard_normal((1, 2, 6, 9))
    for circ in (False, True):
        lhs = (ops.pad2d(x, 1, 2, circ) * g).sum()
        rhs = (x * ops.unpad2d(g, 1, 2, circ)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)
