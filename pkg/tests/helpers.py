"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from fae.network import NetworkConfig, ParamVector


def dense_net(d, hidden, act="tanh", final="identity", seed=0):
    layers = []
    for u in hidden:
        layers += [{"type": "dense", "units": u}, {"type": "act", "fn": act}]
    layers += [{"type": "dense", "units": d}, {"type": "act", "fn": final}]
    return ParamVector.initialize(NetworkConfig((d, 1, 1), tuple(layers)),
                                  np.random.default_rng(seed))


def identity_net(d):
    cfg = NetworkConfig((d, 1, 1), ({"type": "dense", "units": d},
                                    {"type": "act", "fn": "identity"}))
    p = ParamVector.initialize(cfg, np.random.default_rng(0))
    return p.copy(np.concatenate([np.eye(d).ravel(), np.zeros(d)]))


def affine_net(A, b):
    d = len(b)
    p = identity_net(d)
    return p.copy(np.concatenate([np.asarray(A, float).T.ravel(), np.asarray(b, float)]))


def fd_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.array(cols).T


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
