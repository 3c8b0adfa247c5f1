import math

import numpy as np
import pytest

from mgcd.langevin import LangevinConfig
from mgcd.network import Conv, NetworkSpec, SumHead, grad_params
from mgcd.pyramid import build_pyramid, upscale
from mgcd.trainer import (TrainConfig, TrainingDivergence, batch_indices, init_state, learning_rate,
                          random_square_masks, synthesize, train, train_step, update_params, value_gap)

RHO = lambda delta: 1 - delta ** 2 / 2  # noqa: E731


def small_config(**kw):
    base = dict(method="multigrid", batch_size=4, iterations=2, d=2, channel_scale=0.02,
                langevin=LangevinConfig(steps=3, step_size=0.3))
    base.update(kw)
    return TrainConfig(**base)


def data(n=12, side=4, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 1, side, side)).astype(np.float32)


def silence_heads(state):
    """Zero the final layer so that df/dY == 0 everywhere."""
    for p in state.params:
        for k in p.tensors:
            if k.startswith(f"{p.spec.head_index}."):
                p.tensors[k][...] = 0


def linear_spec(side):
    return NetworkSpec((Conv(1, 1, 1, 0), SumHead()), (1, side, side))


# -- schedule and configuration ---------------------------------------------


def test_learning_rate_anchor_and_decay():
    assert learning_rate(0.3, 0) == 0.3
    assert learning_rate(0.3, 9) == 0.3
    assert learning_rate(0.3, 10) == pytest.approx(0.3 / (1 + math.log(2)))
    rates = [learning_rate(0.3, t) for t in range(0, 500, 10)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


def test_config_validation():
    for bad in (dict(method="gibbs"), dict(batch_size=0), dict(iterations=0), dict(lr=0.0), dict(d=1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_paper_configuration_constructs():
    cfg = TrainConfig(method="multigrid", batch_size=100, lr=0.3, d=4, langevin=LangevinConfig(30, 0.3))
    assert cfg.chain_steps(3) == 90
    assert learning_rate(cfg.lr, 0) == 0.3


def test_budget_parity():
    cfg = small_config(method="singlegrid")
    assert cfg.chain_steps(3) == 3 * cfg.langevin.steps
    with pytest.raises(ValueError, match="budget parity"):
        init_state(small_config(method="singlegrid", single_steps=5), (1, 4, 4))
    init_state(small_config(method="singlegrid", single_steps=5, budget_parity=False), (1, 4, 4))


def test_method_network_layout():
    multi = init_state(small_config(), (1, 16, 16))
    assert [p.spec.input_shape for p in multi.params] == [(1, 2, 2), (1, 4, 4), (1, 8, 8), (1, 16, 16)]
    single = init_state(small_config(method="singlegrid"), (1, 16, 16))
    assert [p.spec.input_shape for p in single.params] == [(1, 16, 16)]


def test_batch_indices_cover_each_epoch():
    cfg = small_config(batch_size=5)
    seen = np.concatenate([batch_indices(cfg, 20, t) for t in range(4)])
    assert sorted(seen) == list(range(20))
    assert not np.array_equal(batch_indices(cfg, 20, 0), batch_indices(cfg, 20, 4))


def test_random_square_masks():
    m = random_square_masks(6, 16, 8, np.random.default_rng(0))
    assert m.shape == (6, 1, 16, 16)
    assert np.all(m.sum(axis=(1, 2, 3)) == 64)


# -- synthesis oracles (silent networks, zero-noise hook) -------------------


def test_multigrid_bases_are_observed_means():
    cfg = small_config(langevin=LangevinConfig(steps=4, step_size=0.3, zero_noise=True))
    Y = data(4, 8)
    state = init_state(cfg, (1, 8, 8))
    silence_heads(state)
    syn = synthesize(state, Y, np.arange(4))
    expected = build_pyramid(Y, 2).levels[0]
    for s, level in enumerate(syn, start=1):
        expected = upscale(expected, 2) * RHO(0.3) ** 4
        np.testing.assert_allclose(level, expected, rtol=1e-5, atol=1e-7)


def test_singlegrid_starts_from_upscaled_mean():
    cfg = small_config(method="singlegrid", langevin=LangevinConfig(steps=2, step_size=0.3, zero_noise=True))
    Y = data(4, 8)
    state = init_state(cfg, (1, 8, 8))
    silence_heads(state)
    (syn,) = synthesize(state, Y, np.arange(4))
    mean = Y.mean(axis=(2, 3), keepdims=True)
    np.testing.assert_allclose(syn, np.broadcast_to(mean, Y.shape) * RHO(0.3) ** 6, rtol=1e-5, atol=1e-7)


def test_cd1_closed_form():
    cfg = small_config(method="cd1", cd1_steps=5, langevin=LangevinConfig(steps=3, step_size=0.2, zero_noise=True))
    Y = data(4, 4)
    state = init_state(cfg, (1, 4, 4))
    silence_heads(state)
    (syn,) = synthesize(state, Y, np.arange(4))
    np.testing.assert_allclose(syn, Y * RHO(0.2) ** 5, rtol=1e-5)


def test_persistent_store_splice():
    cfg = small_config(method="persistent", langevin=LangevinConfig(steps=2, step_size=0.3, zero_noise=True))
    Y = data(10, 4)
    state = init_state(cfg, (1, 4, 4), dataset=Y)
    silence_heads(state)
    idx = np.array([1, 4, 7])
    synthesize(state, Y[idx], idx)
    factor = RHO(0.3) ** cfg.chain_steps(state.S)
    expected = Y.copy()
    expected[idx] *= factor
    np.testing.assert_allclose(state.persistent, expected, rtol=1e-5)
    with pytest.raises(IndexError):
        synthesize(state, Y[:1], np.array([10]))


# -- parameter updates ------------------------------------------------------


def test_zero_gradient_leaves_params_unchanged():
    state = init_state(small_config(), (1, 4, 4))
    before = [{k: v.copy() for k, v in p.tensors.items()} for p in state.params]
    update_params(state, [{k: np.zeros_like(v) for k, v in p.tensors.items()} for p in state.params])
    for p, b in zip(state.params, before):
        for k in b:
            assert p.tensors[k].tobytes() == b[k].tobytes()


def test_update_is_scaled_ascent_and_grids_are_isolated():
    state = init_state(small_config(lr=0.2), (1, 4, 4))
    state.t = 25
    before = [{k: v.copy() for k, v in p.tensors.items()} for p in state.params]
    grads = [{k: np.zeros_like(v) for k, v in p.tensors.items()} for p in state.params]
    key = next(iter(grads[1]))
    grads[1][key] = np.ones_like(grads[1][key])
    update_params(state, grads)
    gamma = 0.2 / (1 + math.log(3))
    np.testing.assert_allclose(state.params[1].tensors[key], before[1][key] + gamma, rtol=1e-6)
    for k in before[0]:
        assert state.params[0].tensors[k].tobytes() == before[0][k].tobytes()


def test_non_finite_gradient_raises():
    state = init_state(small_config(), (1, 4, 4))
    grads = [{k: np.zeros_like(v) for k, v in p.tensors.items()} for p in state.params]
    key = next(iter(grads[0]))
    grads[0][key][...] = np.nan
    with pytest.raises(TrainingDivergence, match="iteration 0"):
        update_params(state, grads)


def test_identical_batches_give_zero_gradient_and_gap():
    state = init_state(small_config(), (1, 4, 4))
    Y = data(6, 4)
    g = grad_params(state.params[-1], Y, Y.copy())
    assert g.l1_norm() == 0
    assert value_gap(state.params[-1], state.config.reference, Y, Y.copy()) == 0


def test_single_iteration_records_history_per_grid():
    state = init_state(small_config(iterations=1), (1, 4, 4))
    grads = train_step(state, data(12, 4))
    assert state.t == 1
    assert len(grads) == len(state.params) == 2
    rows = list(state.history)
    assert [r["grid"] for r in rows] == [1, 2]
    assert all(np.isfinite(r["grad_l1"]) for r in rows)


def test_eval_mode_refreshes_running_stats():
    cfg = small_config(langevin=LangevinConfig(steps=2, bn_mode="eval"))
    state = init_state(cfg, (1, 4, 4))
    stats = {i: s.mean.copy() for i, s in state.params[-1].stats.items()}
    train_step(state, data(12, 4))
    assert any(not np.array_equal(stats[i], s.mean) for i, s in state.params[-1].stats.items())


def test_training_is_deterministic():
    Y = data(12, 4)
    a = train(Y, small_config(iterations=3))
    b = train(Y, small_config(iterations=3))
    for pa, pb in zip(a.params, b.params):
        for k in pa.tensors:
            assert pa.tensors[k].tobytes() == pb.tensors[k].tobytes()


def test_conditional_training_requires_supported_method():
    with pytest.raises(ValueError, match="conditional"):
        train(data(8, 4), small_config(method="cd1", mask_size=2, iterations=1))
    state = train(data(8, 4), small_config(mask_size=2, iterations=1))
    assert state.t == 1


# -- learning on a linear score ----------------------------------------------


def test_cd_gradient_sign():
    """With data shifted to +0.5 and a silent model, the first step raises the linear weight."""
    Y = (0.5 + np.random.default_rng(0).standard_normal((64, 1, 2, 2))).astype(np.float32)
    cfg = TrainConfig(method="multigrid", batch_size=64, iterations=1, d=2, specs=(linear_spec(2),),
                      langevin=LangevinConfig(10, 0.3))
    state = init_state(cfg, (1, 2, 2))
    state.params[0].tensors["0.weight"][...] = 0
    train_step(state, Y)
    assert state.params[0].tensors["0.weight"].item() > 0


def test_linear_score_moves_toward_mle():
    rng = np.random.default_rng(1)
    Y = (0.5 + rng.standard_normal((4000, 1, 2, 2))).astype(np.float32)
    cfg = TrainConfig(method="multigrid", batch_size=500, iterations=300, d=2, specs=(linear_spec(2),),
                      langevin=LangevinConfig(30, 0.3))
    state = train(Y, cfg)
    assert state.params[0].tensors["0.weight"].item() == pytest.approx(0.5, abs=0.1)


def test_fixed_point_of_learning():
    """Exact model samples at the MLE give a learning gradient of zero in expectation."""
    rng = np.random.default_rng(5)
    cfg = TrainConfig(method="multigrid", batch_size=8, d=2, specs=(linear_spec(2),))
    params = init_state(cfg, (1, 2, 2)).params[0]
    params.tensors["0.weight"][...] = 0.5
    n = 200_000
    obs = (0.5 + rng.standard_normal((n, 1, 2, 2))).astype(np.float32)
    syn = (0.5 + rng.standard_normal((n, 1, 2, 2))).astype(np.float32)  # p_theta = N(theta, 1) per pixel
    g = grad_params(params, obs, syn)
    se = np.sqrt(2 * 4 / n)  # difference of two means of a sum over 4 unit-variance pixels
    assert abs(g.grads["0.weight"].item()) < 3 * se
    assert g.grads["0.bias"].item() == 0


def test_method_isolation_on_observed_side():
    """Methods differ only in synthesis: observed scores and running statistics match bit for bit."""
    Y = data(16, 16)
    scores, stats = [], []
    for method in ("singlegrid", "cd1", "persistent"):
        cfg = small_config(method=method, d=4, langevin=LangevinConfig(steps=2))
        state = init_state(cfg, (1, 16, 16), dataset=Y)
        (g,) = train_step(state, Y)
        scores.append(g.obs_scores.tobytes())
        stats.append([s.mean.tobytes() + s.var.tobytes() for s in state.params[0].stats.values()])
    assert scores[0] == scores[1] == scores[2]
    assert stats[0] == stats[1] == stats[2]
