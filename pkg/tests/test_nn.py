"""Network core checks: forward oracle, softmax/CE values, backprop vs
central differences, SGD decay, frozen-buffer protection."""

import mpmath
import numpy as np
import pytest

from rpf import nn
from rpf.rng import substream


def tiny_state(seed=7, activation="relu"):
    f = nn.init_mlp(4, (5, 3), seed, activation=activation)
    h = nn.HeadParams(
        substream(seed, "test", "head").normal(size=(4, 3)) * 0.3, np.zeros(4))
    f0 = f.frozen_copy()
    return nn.ModelState(f=f, h=h, f0=f0)


# ---------------------------------------------------------------- forward

def test_forward_matches_extended_precision_oracle():
    # Straight-line re-evaluation of the same arithmetic at 50 digits.
    params = nn.init_mlp(3, (4, 2), seed=11, activation="tanh")
    x = substream(11, "test", "x").normal(size=(5, 3))
    got = nn.mlp_forward(params, x)

    mpmath.mp.dps = 50
    expect = np.empty_like(got)
    for r in range(x.shape[0]):
        a = [mpmath.mpf(v) for v in x[r]]
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            z = []
            for o in range(w.shape[0]):
                acc = mpmath.mpf(b[o])
                for j in range(w.shape[1]):
                    acc += mpmath.mpf(w[o, j]) * a[j]
                z.append(acc)
            a = z if i == len(params.weights) - 1 else [mpmath.tanh(v) for v in z]
        expect[r] = [float(v) for v in a]
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


def test_forward_last_layer_is_linear():
    params = nn.init_mlp(3, (4, 2), seed=1, activation="relu")
    x = -np.ones((1, 3)) * 50.0
    feats = nn.mlp_forward(params, x)
    # relu after the last layer would clip these to zero
    assert (feats < 0).any() or (feats > 0).any()


def test_forward_rejects_wrong_width():
    params = nn.init_mlp(4, (3,), seed=0)
    with pytest.raises(nn.ShapeError):
        nn.mlp_forward(params, np.zeros((2, 5)))


# ---------------------------------------------------------------- init

def test_init_mlp_bounds_and_determinism():
    a = nn.init_mlp(9, (7, 4), seed=3)
    b = nn.init_mlp(9, (7, 4), seed=3)
    c = nn.init_mlp(9, (7, 4), seed=4)
    for w, fan_in in zip(a.weights, (9, 7)):
        s = np.sqrt(1.0 / fan_in)
        assert np.abs(w).max() <= s
    assert all((bias == 0).all() for bias in a.biases)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()


def test_init_head_bounds():
    h = nn.init_head(5, 16, seed=2)
    assert np.abs(h.weight).max() <= np.sqrt(1.0 / 16)
    assert (h.bias == 0).all()


# ---------------------------------------------------------------- softmax / CE

def test_softmax_known_value():
    p = nn.softmax(np.array([1.0, 2.0, 3.0]))
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(p, e / e.sum(), atol=1e-15)
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_shift_invariance_and_stability():
    z = np.array([[1000.0, 0.0], [3.0, 4.0]])
    p = nn.softmax(z)
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p[0], [1.0, 0.0], atol=1e-300)
    np.testing.assert_allclose(nn.softmax(z + 123.456), p, atol=1e-12)


def test_cross_entropy_uniform_logits():
    logits = np.zeros((4, 6))
    labels = np.array([0, 1, 2, 5])
    assert abs(nn.cross_entropy(logits, labels) - np.log(6)) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_log_softmax_rejects_nan():
    with pytest.raises(ValueError):
        nn.log_softmax(np.array([np.nan, 0.0]))


# ---------------------------------------------------------------- gradients

def ce_loss_through_net(state, x, y):
    feats = nn.mlp_forward(state.f, x)
    return nn.cross_entropy(nn.head_forward(state.h, feats), y)


def analytic_ce_grads(state, x, y):
    feats, cache = nn.mlp_forward_cached(state.f, x)
    logits = nn.head_forward(state.h, feats)
    d_logits = nn.softmax_ce_grad(logits, y)
    d_hw, d_hb, d_feats = nn.head_backward(state.h, feats, d_logits)
    d_ws, d_bs = nn.mlp_backward(state.f, cache, d_feats)
    return nn.GradSet(d_ws, d_bs, d_hw, d_hb)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_backprop_matches_central_differences(activation):
    state = tiny_state(seed=5, activation=activation)
    x = substream(5, "test", "fd_x").normal(size=(6, 4))
    y = np.array([0, 1, 2, 3, 0, 1])
    grads = analytic_ce_grads(state, x, y)

    eps = 1e-6
    params = [*state.f.weights, *state.f.biases, state.h.weight, state.h.bias]
    for p, g in zip(params, grads.buffers()):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for k in range(flat_p.size):
            orig = flat_p[k]
            flat_p[k] = orig + eps
            up = ce_loss_through_net(state, x, y)
            flat_p[k] = orig - eps
            dn = ce_loss_through_net(state, x, y)
            flat_p[k] = orig
            num = (up - dn) / (2 * eps)
            denom = max(abs(num), abs(flat_g[k]))
            rel = 0.0 if denom < 1e-10 else abs(num - flat_g[k]) / denom
            assert rel < 1e-5, f"param entry {k}: analytic {flat_g[k]} vs fd {num}"


def test_softmax_ce_grad_rows_sum_to_zero():
    z = substream(9, "test", "z").normal(size=(8, 5))
    y = substream(9, "test", "y").integers(0, 5, size=8)
    g = nn.softmax_ce_grad(z, y)
    np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-14)


# ---------------------------------------------------------------- sgd

def test_sgd_step_and_decay():
    state = tiny_state()
    opt = nn.OptimizerState(learning_rate=0.5, decay_epoch=24, decay_factor=0.1)
    assert opt.effective_lr == 0.5
    opt.epoch = 23
    assert opt.effective_lr == 0.5
    opt.epoch = 24
    assert abs(opt.effective_lr - 0.05) < 1e-15
    opt.epoch = 29
    assert abs(opt.effective_lr - 0.05) < 1e-15

    grads = nn.GradSet.zeros_like(state)
    grads.h_bias[:] = 1.0
    before = state.h.bias.copy()
    opt.epoch = 0
    nn.sgd_step(state, grads, opt)
    np.testing.assert_allclose(state.h.bias, before - 0.5, atol=0)


def test_sgd_never_touches_frozen():
    state = tiny_state()
    sum_before = state.f0.checksum()
    grads = nn.GradSet.zeros_like(state)
    for b in grads.buffers():
        b[:] = 3.0
    nn.sgd_step(state, grads, nn.OptimizerState(learning_rate=0.1))
    assert state.f0.checksum() == sum_before
    with pytest.raises(ValueError):
        state.f0.weights[0][0, 0] = 99.0


def test_frozen_head_snapshot():
    state = tiny_state()
    state.set_probe_snapshot(state.h)
    with pytest.raises(ValueError):
        state.h_lp.weight[0, 0] = 1.0
    # trainable head stays writable
    state.h.weight[0, 0] += 1.0


# ---------------------------------------------------------------- shapes

def test_head_forward_rejects_wrong_width():
    h = nn.init_head(3, 8, seed=1)
    with pytest.raises(nn.ShapeError):
        nn.head_forward(h, np.zeros((2, 7)))


def test_mlp_params_validation():
    with pytest.raises(nn.ShapeError):
        nn.MlpParams([np.zeros((3, 4))], [np.zeros(2)])
    with pytest.raises(ValueError):
        nn.MlpParams([np.full((2, 2), np.nan)], [np.zeros(2)])
