import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroplatoon.dynamics import build_platoon_model, step_platoon_error
from neuroplatoon.losses import (
    LyapunovHyper,
    ShapingWeights,
    control_loss,
    controller_batch,
    loss_dec,
    loss_pos,
    lyapunov_loss,
    lyapunov_loss_grad,
)
from neuroplatoon.nn import MlpParams, forward, init_mlp, saturate_output


def l1_net(dim):
    w0 = np.vstack([np.eye(dim), -np.eye(dim)])
    return MlpParams([w0, np.ones((1, 2 * dim))], [np.zeros(2 * dim), np.zeros(1)], zero_bias=True)


def const_net(c):
    return MlpParams([np.zeros((1, 2))], [np.array([float(c)])])


def pair(n, seed=0, width=8):
    rng = np.random.default_rng(seed)
    V = init_mlp([2 * n, width, width, 1], rng, zero_bias=True)
    pi = saturate_output(init_mlp([2, width, width, 1], rng, anchor_origin=True), 3.0)
    return V, pi


def test_hyper_validation():
    with pytest.raises(ValueError):
        LyapunovHyper(eps1=0)
    with pytest.raises(ValueError):
        LyapunovHyper(eps2=1.0)
    assert LyapunovHyper().decrease_factor == pytest.approx(1.01)
    assert LyapunovHyper(strict=True).decrease_factor == pytest.approx(0.99)
    with pytest.raises(ValueError):
        ShapingWeights(threshold=0)
    with pytest.raises(ValueError):
        ShapingWeights(horizon=0)


def test_loss_pos_examples():
    V = l1_net(2)
    assert loss_pos(V, np.zeros(2), 0.05) == 0.0
    assert loss_pos(V, np.array([1.0, 1.0]), 0.5) == pytest.approx(-0.8)
    # eps1 above the 0.9 slope makes every nonzero point a violation
    assert loss_pos(V, np.array([0.3, -0.2]), 1.0) > 0


def test_loss_dec_hand_example():
    V = l1_net(2)
    model = build_platoon_model(1, 0.1, [0.75])
    value = loss_dec(V, const_net(0.0), model, np.array([0.0, 1.0]), 0.01)
    assert value == pytest.approx(0.9 * 1.1 - 1.01 * 0.9 * 1.0, abs=1e-12)
    assert value == pytest.approx(0.081, abs=1e-12)


def test_loss_dec_strict_variant():
    V = l1_net(2)
    model = build_platoon_model(1, 0.1, [0.75])
    value = loss_dec(V, const_net(0.0), model, np.array([0.0, 1.0]), 0.01, strict=True)
    assert value == pytest.approx(0.9 * 1.1 - 0.99 * 0.9, abs=1e-12)


def test_losses_vanish_at_origin():
    for n in (1, 2, 3):
        V, pi = pair(n, n)
        model = build_platoon_model(n)
        x = np.zeros(2 * n)
        assert loss_pos(V, x, 0.05) == 0.0
        assert loss_dec(V, pi, model, x, 0.01) == 0.0
        assert lyapunov_loss(V, pi, model, x, LyapunovHyper()) == 0.0


def test_loss_dimension_mismatch():
    V, pi = pair(2)
    with pytest.raises(ValueError):
        loss_pos(V, np.zeros(3), 0.05)
    with pytest.raises(ValueError):
        loss_dec(V, pi, build_platoon_model(1), np.zeros(2), 0.01)


def test_lyapunov_loss_hinge_arithmetic():
    # V = 0.9|x|_1 and eps1 = 1 give loss_pos = 0.1|x|_1; with pi = 0 and ev = 0 the state holds, so dec < 0
    V = l1_net(2)
    model = build_platoon_model(1)
    x = np.array([5.0, 0.0])
    h = LyapunovHyper(eps1=1.0)
    assert loss_pos(V, x, 1.0) == pytest.approx(0.5)
    assert loss_dec(V, const_net(0.0), model, x, 0.01) < 0
    assert lyapunov_loss(V, const_net(0.0), model, x, h) == pytest.approx(0.5)


def test_controller_is_applied_blockwise():
    _, pi = pair(1, 3)
    x = np.random.default_rng(0).normal(size=(5, 6))
    u = controller_batch(pi, x, 3)
    for i in range(3):
        np.testing.assert_array_equal(u[:, i], forward(pi, x[:, 2 * i : 2 * i + 2])[0][:, 0])


def _fd(f, params, h=1e-6):
    out = []
    for a in params:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g.ravel())
    return np.concatenate(out)


def _params(net):
    return [a for pair_ in zip(net.weights, net.biases) for a in pair_]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_lyapunov_loss_gradient_matches_finite_differences(n):
    V, pi = pair(n, 10 + n)
    model = build_platoon_model(n)
    hyper = LyapunovHyper(eps1=0.5)
    x = np.random.default_rng(n).uniform(-1, 1, size=(40, 2 * n))
    mean, per, gV, gpi = lyapunov_loss_grad(V, pi, model, x, hyper)
    assert mean > 0
    np.testing.assert_allclose(per, lyapunov_loss(V, pi, model, x, hyper), rtol=0, atol=1e-14)
    f = lambda: float(np.mean(lyapunov_loss(V, pi, model, x, hyper)))  # noqa: E731
    fd_v = _fd(f, _params(V))
    assert np.linalg.norm(gV.flat() - fd_v) / np.linalg.norm(fd_v) < 1e-4
    fd_pi = _fd(f, _params(pi))
    trainable = np.concatenate([np.full(a.size, not pi.frozen[i // 2]) for i, a in enumerate(_params(pi))])
    rel = np.linalg.norm(gpi.flat()[trainable] - fd_pi[trainable]) / np.linalg.norm(fd_pi[trainable])
    assert rel < 1e-4


@pytest.mark.parametrize("n,h", [(1, 3), (2, 5), (3, 4)])
def test_control_loss_gradient_matches_finite_differences(n, h):
    _, pi = pair(n, 20 + n)
    model = build_platoon_model(n, 0.1, [0.75] * n)
    w = ShapingWeights(horizon=h)
    x0 = np.random.default_rng(h).uniform(-0.8, 0.8, size=(6, 2 * n))
    _, _, g = control_loss(pi, model, x0, w, with_grad=True)
    fd = _fd(lambda: control_loss(pi, model, x0, w)[0], _params(pi))
    trainable = np.concatenate([np.full(a.size, not pi.frozen[i // 2]) for i, a in enumerate(_params(pi))])
    rel = np.linalg.norm(g.flat()[trainable] - fd[trainable]) / np.linalg.norm(fd[trainable])
    assert rel < 1e-3


def test_control_loss_zero_at_equilibrium():
    _, pi = pair(2, 4)
    total, terms = control_loss(pi, build_platoon_model(2), np.zeros(4), ShapingWeights())
    assert total == 0.0 and set(terms) == {"safe", "comf", "stab"}


def test_control_loss_safety_hinge_value():
    # zero controller, zero relative speed: the gap stays at 0.20 m for one step
    model = build_platoon_model(1, 0.1, [0.75])
    w = ShapingWeights(horizon=1, safety=10.0, action=0.0, slew=0.0, stability=0.0)
    x0 = np.array([0.20 - 0.75, 0.0])
    total, terms = control_loss(const_net(0.0), model, x0, w)
    assert terms["safe"] == pytest.approx(10.0 * 0.05**2)
    assert total == pytest.approx(0.025)


def test_control_loss_constant_input_comfort_terms():
    c, H, n = 0.7, 6, 2
    model = build_platoon_model(n)
    w = ShapingWeights(horizon=H, safety=0.0, stability=0.0, action=1.0, slew=1.0)
    _, terms = control_loss(const_net(c), model, np.zeros(2 * n), w)
    # slew only charges the first step (from the implicit zero before the rollout)
    assert terms["comf"] == pytest.approx(n * (H * c * c + c * c))


def test_control_loss_rollout_matches_dynamics():
    _, pi = pair(2, 8)
    model = build_platoon_model(2)
    x = np.random.default_rng(1).uniform(-0.5, 0.5, size=4)
    w = ShapingWeights(horizon=1, safety=0.0, action=0.0, slew=0.0, stability=1.0)
    xn = step_platoon_error(model, x, controller_batch(pi, x, 2))
    grow = np.maximum(np.hypot(xn[0::2], xn[1::2]) - np.hypot(x[0::2], x[1::2]), 0).sum()
    assert control_loss(pi, model, x, w)[1]["stab"] == pytest.approx(grow, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_hinge_losses_are_nonnegative(seed, n):
    V, pi = pair(n, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(32, 2 * n))
    assert np.all(lyapunov_loss(V, pi, build_platoon_model(n), x, LyapunovHyper()) >= 0)
    total, terms = control_loss(pi, build_platoon_model(n), x, ShapingWeights(horizon=3))
    assert total >= 0 and min(terms.values()) >= 0
