import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fae._validation import ContractError
from fae.corruption import CorruptionConfig
from fae.network import NetworkConfig, ParamVector, dense_autoencoder
from fae.training import (TrainSchedule, TrainState, adam_step, gradient, loss_and_gradient,
                          loss_dae, loss_fae, loss_weighted, mask_weights, substream, train,
                          write_loss_csv)
from helpers import affine_net, dense_net, identity_net, rel_err


def test_dae_examples(rng):
    x = rng.random(6)
    p = identity_net(6)
    assert loss_dae(p, x, x) == 0.0
    e = np.zeros(6)
    e[0] = 0.3
    assert loss_dae(p, x + e, x) == pytest.approx(0.09, abs=1e-15)


def test_dae_matches_recomputation(rng):
    p = dense_net(6, (4,))
    x_hat, x = rng.random(6), rng.random(6)
    r = p.forward(x_hat) - x
    assert loss_dae(p, x_hat, x) == pytest.approx(sum(v * v for v in r), rel=1e-14)


def test_fae_reduces_to_dae_at_zero_noise(rng):
    p = dense_net(6, (4,))
    x_hat, x = rng.random(6), rng.random(6)
    assert loss_fae(p, x_hat, x, np.zeros(6)) == loss_dae(p, x_hat, x)


@given(st.integers(0, 10 ** 6))
def test_fae_identity_net_ignores_noise(seed):
    rng = np.random.default_rng(seed)
    x_hat, x = rng.random(5), rng.random(5)
    eps = rng.standard_normal(5)
    p = identity_net(5)
    assert loss_fae(p, x_hat, x, eps) == pytest.approx(np.sum((x_hat - x) ** 2), rel=1e-12,
                                                         abs=1e-15)


def test_fae_affine_closed_form(rng):
    A, b = rng.standard_normal((5, 5)), rng.standard_normal(5)
    p = affine_net(A, b)
    x_hat, x, eps = rng.random(5), rng.random(5), rng.standard_normal(5)
    r = A @ x_hat + b - x
    expected = np.sum((r + (A - np.eye(5)) @ eps) ** 2)
    assert loss_fae(p, x_hat, x, eps) == pytest.approx(expected, rel=1e-12)


def test_weighted_loss_examples(rng):
    p = identity_net(8)
    x = rng.random(8)
    x_hat = x + 0.1
    # empty corrupted region: complement term only
    assert loss_weighted(p, x_hat, x, np.zeros(8), 0.5) == pytest.approx(0.5 / 8 * 8 * 0.01)
    M = (rng.random(8) > 0.5).astype(float)
    M[0], M[1] = 1.0, 0.0
    r2 = 0.01 * np.ones(8)
    expected = (1 / (8 - M.sum())) * np.sum((1 - M) ** 2 * r2)
    assert loss_weighted(p, x_hat, x, M, 0.0) == pytest.approx(expected)
    # uniform half mask, offset delta: total 0.5 delta^2
    assert loss_weighted(p, x_hat, x, np.full(8, 0.5), 0.5) == pytest.approx(0.5 * 0.01)


def test_weighted_loss_lambda_range():
    with pytest.raises(ContractError):
        mask_weights(np.zeros(4), 1, 1.5)


def test_mask_weights_broadcast_over_channels():
    w = mask_weights(np.array([[1.0, 0.0]]), 3, 0.5)
    assert np.allclose(w, [0.5 / 3] * 3 + [0.5 / 3] * 3)


def test_gradient_scalar_hand_derivative():
    cfg = NetworkConfig((1, 1, 1), ({"type": "dense", "units": 1},
                                    {"type": "act", "fn": "identity"}))
    p = ParamVector(ParamVector.initialize(cfg, np.random.default_rng(0)).network,
                    np.array([1.7, 0.0]))
    v, t = 0.8, 0.5
    g = gradient(p, [[v]], [[t]], reduction="sum")
    assert g[0] == pytest.approx(2 * (1.7 * v - t) * v, rel=1e-14)


def test_gradient_zero_at_exact_solution(rng):
    X = rng.random((4, 5))
    assert np.all(gradient(identity_net(5), X, X) == 0.0)


def _fd_grad(p, X, T, kind="mse", masks=None, h=1e-5):
    out = np.zeros_like(p.theta)
    for i in range(len(p.theta)):
        e = np.zeros_like(p.theta)
        e[i] = h
        lp = loss_and_gradient(p.copy(p.theta + e), X, T, kind, masks)[0]
        lm = loss_and_gradient(p.copy(p.theta - e), X, T, kind, masks)[0]
        out[i] = (lp - lm) / (2 * h)
    return out


@pytest.mark.parametrize("act,final", [("tanh", "identity"), ("sigmoid", "sigmoid")])
def test_gradient_matches_finite_differences(act, final, rng):
    p = dense_net(10, (6,), act, final, seed=5)
    X, T = rng.random((3, 10)), rng.random((3, 10))
    assert rel_err(gradient(p, X, T), _fd_grad(p, X, T)) < 1e-5


def test_weighted_gradient_matches_finite_differences(rng):
    p = dense_net(6, (4,), seed=1)
    X, T = rng.random((2, 6)), rng.random((2, 6))
    masks = [rng.random(6), np.zeros(6)]
    g = loss_and_gradient(p, X, T, "weighted", masks)[1]
    assert rel_err(g, _fd_grad(p, X, T, "weighted", masks)) < 1e-5


def test_relu_gradient_away_from_kinks(rng):
    p = dense_net(6, (5,), "relu", seed=2)
    X, T = rng.random((2, 6)), rng.random((2, 6))
    # skip probes whose pre-activations sit near zero
    W, b = p.theta[:30].reshape(6, 5), p.theta[30:35]
    assert np.min(np.abs(X @ W + b)) > 1e-4
    assert rel_err(gradient(p, X, T), _fd_grad(p, X, T)) < 1e-5


def test_gradient_contracts():
    p = identity_net(3)
    with pytest.raises(ContractError):
        gradient(p, np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ContractError):
        gradient(p, np.zeros((2, 3)), np.zeros((1, 3)))
    with pytest.raises(ContractError):
        gradient(p, np.zeros((1, 3)), np.zeros((1, 3)), kind="weighted")


def test_adam_zero_gradient_keeps_params():
    p = identity_net(3)
    s = adam_step(TrainState.start(p, lr=0.1), np.zeros_like(p.theta))
    assert np.array_equal(s.params.theta, p.theta)
    assert s.step == 1


def test_adam_zero_gradient_decays_moments():
    p = identity_net(3)
    s = TrainState(p, np.ones_like(p.theta), np.ones_like(p.theta), 4, 0.1)
    s2 = adam_step(s, np.zeros_like(p.theta))
    assert np.allclose(s2.m, 0.9) and np.allclose(s2.v, 0.999)
    assert s2.step == 5


def test_adam_first_step_by_hand():
    p = identity_net(2)
    g = np.linspace(-2.0, 3.0, len(p.theta))
    s = adam_step(TrainState.start(p, lr=0.01), g)
    # m_hat = g, v_hat = g^2 after bias correction
    expected = p.theta - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(s.params.theta, expected, rtol=0, atol=1e-15)
    assert s.step == 1


def test_adam_pure_and_repeatable(rng):
    p = identity_net(3)
    s = TrainState.start(p)
    g = rng.standard_normal(len(p.theta))
    a, b = adam_step(s, g), adam_step(s, g)
    assert np.array_equal(a.params.theta, b.params.theta)
    assert np.array_equal(s.params.theta, p.theta) and not s.m.any()
    with pytest.raises(ContractError):
        adam_step(s, g[:-1])


def test_substreams_independent_and_stable():
    a = substream(3, "data").random(4)
    assert np.array_equal(a, substream(3, "data").random(4))
    assert not np.array_equal(a, substream(3, "init").random(4))


def _tiny(seed=0, steps=0, loss="fae", log_every=10):
    imgs = [np.full((16, 16, 1), 0.6)]
    cfg = dense_autoencoder((16, 16, 1), hidden=(8,))
    sched = TrainSchedule(steps=steps, batch_size=2, lr=1e-2, loss=loss, seed=seed,
                          log_every=log_every)
    return train(imgs, cfg, CorruptionConfig(), sched)


def test_zero_steps_returns_initialization():
    p, hist = _tiny(steps=0)
    init = ParamVector.initialize(dense_autoencoder((16, 16, 1), hidden=(8,)),
                                  substream(0, "init"))
    assert np.array_equal(p.theta, init.theta) and hist == []


def test_constant_dataset_is_learned():
    # the constant target is reachable through the output bias alone
    imgs = [np.full((16, 16, 1), 0.6)]
    cfg = dense_autoencoder((16, 16, 1), hidden=(8,))
    sched = TrainSchedule(steps=2000, batch_size=4, lr=1e-2, loss="dae", log_every=100)
    p, hist = train(imgs, cfg, CorruptionConfig(clean_prob=1.0), sched)
    x = imgs[0].ravel()
    assert np.sum((p.forward(x) - x) ** 2) < 1e-3 * x.size
    assert hist[-1][1] < 1e-3


def test_training_deterministic():
    a, ha = _tiny(seed=4, steps=30)
    b, hb = _tiny(seed=4, steps=30)
    assert np.array_equal(a.theta, b.theta) and ha == hb
    c, _ = _tiny(seed=5, steps=30)
    assert not np.array_equal(a.theta, c.theta)


def test_dae_schedule_has_no_noise():
    _, hist = _tiny(steps=20, loss="dae")
    assert all(row[2] == 0.0 for row in hist)


def test_loss_log_and_csv(tmp_path):
    _, hist = _tiny(steps=25, log_every=10)
    assert [h[0] for h in hist] == [10, 20, 25]
    write_loss_csv(tmp_path / "loss.csv", hist)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,sigma_mean" and len(lines) == 4


def test_train_requires_images():
    with pytest.raises(ContractError):
        train([], dense_autoencoder((16, 16, 1)))
    with pytest.raises(ContractError):
        TrainSchedule(loss="l1")
