import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fae._validation import ContractError, NumericalError
from fae.network import (Network, NetworkConfig, ParamVector, conv_autoencoder,
                         dense_autoencoder, fd_laplacian, forward, jacobian, laplacian,
                         load_checkpoint, save_checkpoint)
from helpers import affine_net, dense_net, fd_jacobian, identity_net, rel_err


def test_identity_dense_layer_returns_input(rng):
    x = rng.random(7)
    assert np.array_equal(forward(identity_net(7), x), x)


def test_sigmoid_of_constant_bias():
    cfg = NetworkConfig((4, 1, 1), ({"type": "dense", "units": 4},
                                    {"type": "act", "fn": "sigmoid"}))
    p = ParamVector.initialize(cfg, np.random.default_rng(0))
    p = p.copy(np.concatenate([np.zeros(16), np.full(4, 0.3)]))
    out = p.forward(np.random.default_rng(1).random(4))
    assert np.allclose(out, 0.574442516811659, atol=1e-12)


def test_forward_deterministic_and_batched(rng):
    p = dense_net(6, (5,))
    X = rng.random((3, 6))
    assert np.array_equal(p.forward(X), p.forward(X))
    assert np.allclose(p.forward(X)[1], p.forward(X[1]))


def test_forward_rejects_wrong_length():
    with pytest.raises(ContractError):
        identity_net(4).forward(np.zeros(5))


def test_nonfinite_intermediate_names_layer():
    p = identity_net(3)
    with pytest.raises(NumericalError, match="layer 0"):
        p.forward(np.array([np.inf, 0.0, 0.0]))


def test_sigmoid_output_in_unit_interval(rng):
    p = dense_net(5, (4,), final="sigmoid")
    out = p.forward(rng.standard_normal((20, 5)) * 10)
    assert np.all((out > 0) & (out < 1))


def test_builders_keep_dimension():
    for cfg in (dense_autoencoder((4, 4, 1)), conv_autoencoder((8, 8, 3)),
                conv_autoencoder((8, 8, 1), downsample=1)):
        net = Network(cfg)
        assert net.dim == cfg.dim
        assert np.prod(net.out_shape) == cfg.dim
    assert [l["units"] for l in dense_autoencoder((4, 4, 1)).layers
            if l["type"] == "dense"] == [8, 4, 8, 16]


def test_mismatched_output_rejected():
    cfg = NetworkConfig((4, 1, 1), ({"type": "dense", "units": 3},))
    with pytest.raises(ContractError):
        Network(cfg)


def test_init_scale(rng):
    p = ParamVector.initialize(dense_autoencoder((8, 8, 1), hidden=(16,)), rng)
    W = p.theta[:64 * 16]
    limit = np.sqrt(6 / (64 + 16))
    assert np.abs(W).max() <= limit
    assert np.abs(W).max() > 0.9 * limit


def test_identity_jacobian_and_affine_jacobian(rng):
    assert np.array_equal(jacobian(identity_net(5), rng.random(5)), np.eye(5))
    A, b = rng.standard_normal((5, 5)), rng.standard_normal(5)
    assert np.allclose(jacobian(affine_net(A, b), rng.random(5)), A, atol=1e-14)
    assert np.allclose(laplacian(affine_net(A, b), rng.random(5)), 0.0, atol=1e-6)


@pytest.mark.parametrize("act,final", [("tanh", "identity"), ("sigmoid", "sigmoid"),
                                       ("tanh", "tanh")])
def test_jacobian_matches_finite_differences(act, final):
    p = dense_net(10, (8, 6), act, final, seed=3)
    x = np.random.default_rng(4).standard_normal(10)
    assert rel_err(p.jacobian(x), fd_jacobian(p.forward, x)) < 1e-5


def test_conv_jacobian_matches_finite_differences():
    cfg = conv_autoencoder((6, 6, 2), filters=3, depth=3, downsample=1)
    p = ParamVector.initialize(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).random(72)
    assert rel_err(p.jacobian(x), fd_jacobian(p.forward, x)) < 1e-5


def test_jacobian_cap():
    p = ParamVector.initialize(dense_autoencoder((40, 40, 1), hidden=(2,)),
                               np.random.default_rng(0))
    with pytest.raises(ContractError):
        p.jacobian(np.zeros(1600))
    with pytest.raises(ContractError):
        p.laplacian(np.zeros(1600))


def test_laplacian_of_square_map_is_two():
    x = np.random.default_rng(0).standard_normal(6)
    lap = fd_laplacian(lambda X: X * X, x)
    assert np.allclose(lap, 2.0, atol=1e-8)


def _hessian_trace_oracle(fn, x, h=1e-3):
    # nested central differences, every entry of every output Hessian
    d = len(x)
    H = np.zeros((d, d, len(fn(x[None])[0])))
    for i in range(d):
        for j in range(d):
            ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
            H[i, j] = (fn((x + ei + ej)[None])[0] - fn((x + ei - ej)[None])[0]
                       - fn((x - ei + ej)[None])[0] + fn((x - ei - ej)[None])[0]) / (4 * h * h)
    return np.trace(H)


def test_laplacian_matches_full_hessian_oracle():
    p = dense_net(5, (7,), "tanh", "sigmoid", seed=2)
    x = np.random.default_rng(3).standard_normal(5)
    assert np.max(np.abs(p.laplacian(x) - _hessian_trace_oracle(p.forward, x))) < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    p = ParamVector.initialize(conv_autoencoder((8, 8, 1), filters=2), rng)
    save_checkpoint(tmp_path / "m.ckpt", p)
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(p.theta, q.theta)
    assert q.network.config == p.network.config
    x = rng.random(64)
    assert np.array_equal(p.forward(x), q.forward(x))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"FAECKPT\x00"


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"notackpt" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")


@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 1000))
def test_config_json_round_trip(d, h, seed):
    cfg = dense_autoencoder((d, 1, 1), hidden=(h,))
    assert NetworkConfig.from_json(cfg.to_json()) == cfg
