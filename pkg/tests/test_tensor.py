import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgcd.tensor import DegenerateStatisticsError, RunningStats, ShapeError, Tape, TapeError


def naive_conv(x, w, b, stride, pad):
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for i in range(n):
        for o in range(oc):
            for r in range(oh):
                for q in range(ow):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, q * stride + v] * w[o, ch, u, v]
                    out[i, o, r, q] = acc
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv(x, w, b, stride=1, pad=0):
    t = Tape()
    return t.conv2d(t.constant(x), t.constant(w), t.constant(b), stride, pad).value


def fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


# -- conv2d -----------------------------------------------------------------


def test_conv_sum_of_ones():
    out = conv(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9


def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    out = conv(np.zeros((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), np.array([1.0, -2.0, 0.5, 3.0]), 2, 1)
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([1.0, -2.0, 0.5, 3.0])[None, :, None, None], out.shape))


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv(x, w, b, stride=2, pad=1)
    assert out.shape == (1, 3, 3, 3)
    assert np.max(np.abs(out - naive_conv(x, w, b, 2, 1))) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(1, 2),
       st.integers(0, 2), st.integers(5, 8), st.integers(0, 10_000))
def test_conv_matches_naive_loops_random_shapes(n, c, k, stride, pad, side, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, side, side))
    w = rng.standard_normal((2, c, k, k))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(conv(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-9)


def test_conv_float32_close_to_naive():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = (0.1 * rng.standard_normal((4, 3, 5, 5))).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = conv(x, w, b, 2, 2)
    assert out.dtype == np.float32
    assert np.max(np.abs(out - naive_conv(x, w, b, 2, 2))) < 1e-5


def test_conv_shape_errors_name_axes():
    with pytest.raises(ShapeError, match="channel"):
        conv(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)), np.zeros(1))


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    wts = rng.standard_normal((2, 3, 3, 3))
    t = Tape()
    nx, nw, nb = t.variable(x), t.variable(w), t.variable(b)
    g = t.backward(t.dot(t.conv2d(nx, nw, nb, 2, 1), wts), [nx, nw, nb])
    f = lambda: float(np.sum(conv(x, w, b, 2, 1) * wts))
    for arr, node in ((x, nx), (w, nw), (b, nb)):
        np.testing.assert_allclose(g[node], fd_grad(f, arr), rtol=1e-6, atol=1e-8)


# -- relu -------------------------------------------------------------------


def test_relu_definition():
    t = Tape()
    np.testing.assert_array_equal(t.relu(t.constant(np.array([-1.0, 0.0, 2.0]))).value, [0, 0, 2])


def test_relu_identity_on_positives():
    x = np.random.default_rng(0).uniform(0.1, 3, (2, 3, 4, 4))
    t = Tape()
    np.testing.assert_array_equal(t.relu(t.constant(x)).value, x)


def test_relu_gradient_mask():
    t = Tape()
    x = t.variable(np.array([-1.0, 2.0]))
    g = t.backward(t.dot(t.relu(x), np.array([5.0, 5.0])), [x])
    np.testing.assert_array_equal(g[x], [0, 5])


def test_relu_subgradient_at_zero_is_zero():
    t = Tape()
    x = t.variable(np.array([0.0]))
    g = t.backward(t.dot(t.relu(x), np.array([1.0])), [x])
    assert g[x][0] == 0


def test_dead_relu_gives_zero_gradient():
    t = Tape()
    x = t.variable(-np.random.default_rng(1).uniform(0.1, 1, (2, 1, 3, 3)))
    g = t.backward(t.dot(t.relu(x), np.ones((2, 1, 3, 3))), [x])
    assert not g[x].any()


# -- batch norm -------------------------------------------------------------


def bn(x, gamma, beta, stats=None, mode="train", update=False):
    t = Tape()
    return t.batchnorm(t.constant(x), t.constant(gamma), t.constant(beta), stats, mode=mode, update_stats=update).value


def test_batchnorm_train_normalizes():
    x = np.random.default_rng(0).normal(3, 2, (8, 3, 4, 4))
    out = bn(x, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_constant_channel():
    out = bn(np.full((4, 1, 3, 3), 7.0), np.ones(1), np.full(1, 3.0))
    np.testing.assert_allclose(out, 3.0)


def test_batchnorm_eval_uses_running_stats():
    stats = RunningStats(np.array([1.0]), np.array([4.0]))
    out = bn(np.full((1, 1, 1, 1), 5.0), np.ones(1), np.zeros(1), stats, mode="eval")
    np.testing.assert_allclose(out, 4.0 / np.sqrt(4.0 + 1e-5))


def test_batchnorm_running_stats_update():
    rng = np.random.default_rng(1)
    x = rng.normal(2, 3, (5, 2, 3, 3))
    stats = RunningStats.fresh(2, np.float64)
    bn(x, np.ones(2), np.zeros(2), stats, update=True)
    m = x.shape[0] * 9
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateStatisticsError):
        bn(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2))


def test_batchnorm_input_gradient_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(1, 2, (4, 2, 3, 3))
    gamma, beta = rng.normal(1, 0.3, 2), rng.standard_normal(2)
    wts = rng.standard_normal(x.shape)
    t = Tape()
    nx = t.variable(x)
    g = t.backward(t.dot(t.batchnorm(nx, t.constant(gamma), t.constant(beta)), wts), [nx])[nx]
    num = fd_grad(lambda: float(np.sum(bn(x, gamma, beta) * wts)), x, h=1e-3)
    assert np.max(np.abs(g - num) / np.maximum(np.abs(g), 1e-6)) < 1e-5


def test_batchnorm_gradient_of_plain_sum_is_zero():
    # sum over a normalized channel is constant in x
    x = np.random.default_rng(5).standard_normal((3, 2, 2, 2))
    t = Tape()
    nx = t.variable(x)
    g = t.backward(t.dot(t.batchnorm(nx, t.constant(np.ones(2)), t.constant(np.zeros(2))), np.ones(x.shape)), [nx])
    np.testing.assert_allclose(g[nx], 0, atol=1e-10)


# -- fully connected --------------------------------------------------------


def test_fc_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    t = Tape()
    out = t.fully_connected(t.constant(x), t.constant(np.eye(4)), t.constant(np.zeros(4))).value
    np.testing.assert_array_equal(out, x)


def test_fc_zero_input():
    t = Tape()
    out = t.fully_connected(t.constant(np.zeros((2, 1, 2, 2))), t.constant(np.ones((4, 3))),
                            t.constant(np.array([1.0, 2.0, 3.0]))).value
    np.testing.assert_array_equal(out, [[1, 2, 3], [1, 2, 3]])


def test_fc_matches_naive_matmul():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((5, 2, 3, 2)), rng.standard_normal((12, 4)), rng.standard_normal(4)
    t = Tape()
    out = t.fully_connected(t.constant(x), t.constant(w), t.constant(b)).value
    assert np.max(np.abs(out - (naive_matmul(x.reshape(5, -1), w) + b))) < 1e-6


def test_fc_dimension_mismatch():
    t = Tape()
    with pytest.raises(ShapeError):
        t.fully_connected(t.constant(np.zeros((2, 5))), t.constant(np.zeros((4, 1))), t.constant(np.zeros(1)))


# -- backward ---------------------------------------------------------------


def test_sum_gradient_is_ones():
    t = Tape()
    x = t.variable(np.random.default_rng(0).standard_normal((2, 3, 2, 2)))
    g = t.backward(t.dot(t.sum_per_example(x), np.ones((2, 1))), [x])
    np.testing.assert_array_equal(g[x], np.ones((2, 3, 2, 2)))


def test_backward_only_returns_grad_requiring_leaves():
    t = Tape()
    x = t.variable(np.ones((1, 1, 2, 2)))
    w = t.constant(np.ones((1, 1, 1, 1)))
    b = t.variable(np.zeros(1))
    g = t.backward(t.dot(t.conv2d(x, w, b), np.ones((1, 1, 2, 2))))
    assert set(g) == {x, b}


def test_backward_rejects_foreign_node():
    t1, t2 = Tape(), Tape()
    x = t1.variable(np.ones(3))
    out = t1.dot(x, np.ones(3))
    with pytest.raises(TapeError):
        t2.backward(out)


def test_backward_linearity():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    a, c = 0.7, -1.9
    wa, wb = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4))

    def grads(alpha, beta):
        t = Tape()
        x = t.variable(x0)
        f = t.dot(t.relu(t.conv2d(x, t.constant(w), t.constant(np.zeros(3)), 1, 1)), wa)
        g = t.dot(t.batchnorm(x, t.constant(np.ones(2)), t.constant(np.zeros(2))), wb)
        return t.backward(t.combine(f, g, alpha, beta), [x])[x]

    np.testing.assert_allclose(grads(a, c), a * grads(1, 0) + c * grads(0, 1), atol=1e-12)


def test_determinism():
    rng = np.random.default_rng(8)
    x, w = rng.standard_normal((2, 2, 6, 6)).astype(np.float32), rng.standard_normal((3, 2, 3, 3)).astype(np.float32)

    def run():
        t = Tape()
        nx, nw = t.variable(x), t.variable(w)
        out = t.batchnorm(t.conv2d(nx, nw, t.constant(np.zeros(3, np.float32)), 2, 1),
                          t.constant(np.ones(3, np.float32)), t.constant(np.zeros(3, np.float32)))
        g = t.backward(t.dot(t.relu(out), np.ones(out.value.shape, np.float32)), [nx, nw])
        return out.value, g[nx], g[nw]

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_concat_flat_roundtrip_gradient():
    t = Tape()
    a, b = t.variable(np.ones((2, 1, 2, 2))), t.variable(np.ones((2, 3)))
    out = t.concat_flat([a, b])
    assert out.value.shape == (2, 7)
    wts = np.arange(14.0).reshape(2, 7)
    g = t.backward(t.dot(out, wts), [a, b])
    np.testing.assert_array_equal(g[a].reshape(2, -1), wts[:, :4])
    np.testing.assert_array_equal(g[b], wts[:, 4:])
