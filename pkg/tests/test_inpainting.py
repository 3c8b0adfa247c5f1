import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgcd.inpainting import (MASK_KINDS, evaluate_inpainting, gen_mask, inpaint, mean_fill, train_conditional,
                             unmasked_mean)
from mgcd.langevin import LangevinConfig
from mgcd.pyramid import masked_pyramid
from mgcd.textures import stripes
from mgcd.trainer import TrainConfig, init_state, train, train_step


def small_config(**kw):
    base = dict(method="multigrid", batch_size=4, iterations=2, d=2, channel_scale=0.02,
                langevin=LangevinConfig(steps=3, step_size=0.3))
    base.update(kw)
    return TrainConfig(**base)


def data(n=12, side=4, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 1, side, side)).astype(np.float32)


def trained(method="multigrid", side=8, iterations=1):
    return train(data(8, side), small_config(method=method, iterations=iterations))


# -- masks ------------------------------------------------------------------


def test_square_mask_pixel_count():
    m = gen_mask("square", 64, 64, np.random.default_rng(0), size=32)
    assert m.data.shape == (1, 1, 64, 64)
    assert m.count == 1024
    rows, cols = np.nonzero(m.data[0, 0])
    assert rows.max() - rows.min() == 31 and cols.max() - cols.min() == 31


def test_square_mask_position_varies():
    corners = {tuple(np.argwhere(gen_mask("square", 16, 16, np.random.default_rng(s), size=8).data[0, 0])[0])
               for s in range(20)}
    assert len(corners) > 5


def test_pepper_fraction():
    for seed in range(5):
        assert abs(gen_mask("pepper", 64, 64, np.random.default_rng(seed)).fraction - 0.60) <= 0.03


def test_doodle_fraction():
    for seed in range(5):
        assert 0.20 <= gen_mask("doodle", 64, 64, np.random.default_rng(seed)).fraction <= 0.30


@pytest.mark.parametrize("kind", MASK_KINDS)
def test_mask_is_binary_and_seeded(kind):
    a = gen_mask(kind, 32, 32, np.random.default_rng(3))
    b = gen_mask(kind, 32, 32, np.random.default_rng(3))
    assert set(np.unique(a.data)) <= {0.0, 1.0}
    assert a.data.tobytes() == b.data.tobytes()


def test_mask_errors():
    with pytest.raises(ValueError):
        gen_mask("square", 16, 16, np.random.default_rng(0), size=17)
    with pytest.raises(ValueError):
        gen_mask("blob", 16, 16, np.random.default_rng(0))


def test_single_pixel_mask_has_one_free_coordinate_per_grid():
    m = np.zeros((1, 1, 16, 16))
    m[0, 0, 5, 9] = 1
    _, masks = masked_pyramid(np.zeros((1, 1, 16, 16)), m, 4)
    assert [int(level.sum()) for level in masks] == [1, 1, 1]


# -- baselines and metrics --------------------------------------------------


def test_mean_fill_and_unmasked_mean():
    img = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    m = np.zeros((1, 1, 4, 4), np.float32)
    m[0, 0, :2] = 1
    assert unmasked_mean(img, m)[0, 0, 0, 0] == pytest.approx(np.arange(8, 16).mean())
    out = mean_fill(img, m)
    np.testing.assert_array_equal(out[0, 0, 2:], img[0, 0, 2:])
    np.testing.assert_allclose(out[0, 0, :2], 11.5)
    with pytest.raises(ValueError):
        unmasked_mean(img, np.ones_like(m))


def test_perfect_reconstruction_metrics():
    x = data(3, 8)
    m = np.ones((3, 1, 8, 8))
    rep = evaluate_inpainting(x, x.copy(), m, "square")
    assert rep.error == 0 and np.all(rep.errors == 0)
    assert rep.psnr == np.inf and np.all(np.isinf(rep.psnrs))


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1).filter(lambda c: abs(c) > 1e-3))
def test_constant_offset_metrics(c):
    x = data(2, 8)
    m = np.zeros((2, 1, 8, 8))
    m[:, :, 2:6, 2:6] = 1
    y = x + c * m
    rep = evaluate_inpainting(x, y, m)
    assert rep.error == pytest.approx(abs(c), rel=1e-5)
    assert rep.psnr == pytest.approx(10 * np.log10(4 / c ** 2), rel=1e-4)
    assert rep.n_masked == 32


def test_metrics_ignore_unmasked_pixels():
    x = data(2, 8)
    m = np.zeros((2, 1, 8, 8))
    m[:, :, :4] = 1
    y = x.copy()
    y[:, :, 4:] += 5.0
    assert evaluate_inpainting(x, y, m).error == 0


def test_metrics_errors():
    x = data(2, 8)
    with pytest.raises(ValueError):
        evaluate_inpainting(x, x[:1], np.ones((2, 1, 8, 8)))
    m = np.zeros((2, 1, 8, 8))
    m[0, 0, 0, 0] = 1
    with pytest.raises(ValueError, match="masked pixel"):
        evaluate_inpainting(x, x, m)


# -- inpainting -------------------------------------------------------------


def test_untrained_state_rejected():
    state = init_state(small_config(), (1, 8, 8))
    with pytest.raises(ValueError, match="untrained"):
        inpaint(state, data(2, 8), np.ones((1, 1, 8, 8)))


def test_empty_mask_returns_input():
    state = trained()
    x = data(3, 8)
    assert inpaint(state, x, np.zeros((8, 8))).tobytes() == x.tobytes()


@pytest.mark.parametrize("method", ["multigrid", "singlegrid"])
def test_unmasked_pixels_bit_identical(method):
    state = trained(method)
    rng = np.random.default_rng(1)
    x = data(3, 8, seed=2)
    for kind in MASK_KINDS:
        m = gen_mask(kind, 8, 8, rng, width=2).data
        out = inpaint(state, x, m, rng=rng)
        keep = ~np.broadcast_to(m.astype(bool), x.shape)
        assert out[keep].tobytes() == x[keep].tobytes()
        assert np.all(np.isfinite(out))


def test_mask_shape_may_differ_from_training_mask():
    state = train_conditional(data(8, 8), small_config(iterations=1), mask_size=4)
    m = gen_mask("square", 8, 8, np.random.default_rng(0), size=(2, 6)).data
    out = inpaint(state, data(2, 8), m)
    assert out.shape == (2, 1, 8, 8)


# -- conditional learning ---------------------------------------------------


def test_train_conditional_validation():
    with pytest.raises(ValueError):
        train_conditional(data(8, 4), small_config())
    with pytest.raises(ValueError):
        train_conditional(data(8, 4), small_config(method="persistent"), mask_size=2)


def test_full_mask_reduces_to_unconditional_training():
    x = data(8, 4)
    a = train(x, small_config(iterations=2))
    b = train_conditional(x, small_config(iterations=2), mask_size=4)
    for pa, pb in zip(a.params, b.params):
        for k in pa.tensors:
            assert pa.tensors[k].tobytes() == pb.tensors[k].tobytes()


def test_empty_mask_gives_zero_gradient():
    state = init_state(small_config(mask_size=0), (1, 4, 4))
    grads = train_step(state, data(8, 4))
    assert all(g.l1_norm() == 0 for g in grads)


def test_conditional_training_on_stripes_runs():
    x = stripes(16, 8, np.random.default_rng(0))
    state = train_conditional(x, small_config(iterations=2, batch_size=8), mask_size=4)
    assert state.t == 2
