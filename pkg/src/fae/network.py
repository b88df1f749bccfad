"""Small differentiable reconstruction networks in plain numpy.

A network maps flat vectors of length ``d = h * w * c`` (row-major,
channel-interleaved) to vectors of the same length. Layers carry exact
reverse-mode derivatives, which also give the input Jacobian; the
component-wise Laplacian is taken by central second differences.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import ContractError, NumericalError

_ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu")


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Dense:
    kind = "dense"

    def __init__(self, in_shape, units):
        self.in_shape = tuple(in_shape)
        self.fan_in = int(np.prod(in_shape))
        self.units = int(units)
        self.out_shape = (self.units,)
        self.shapes = [(self.fan_in, self.units), (self.units,)]

    def init(self, rng):
        limit = np.sqrt(6.0 / (self.fan_in + self.units))
        w = rng.uniform(-limit, limit, size=self.shapes[0])
        return [w, np.zeros(self.units)]

    def forward(self, p, x):
        xf = x.reshape(len(x), -1)
        return xf @ p[0] + p[1], xf

    def backward(self, p, cache, g, need_params=True):
        gx = (g @ p[0].T).reshape((len(g),) + self.in_shape)
        if not need_params:
            return gx, None
        return gx, [cache.T @ g, g.sum(axis=0)]

    def describe(self):
        return {"type": "dense", "units": self.units}


class Activation:
    kind = "act"
    shapes = []

    def __init__(self, in_shape, fn):
        if fn not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {fn!r}")
        self.in_shape = self.out_shape = tuple(in_shape)
        self.fn = fn

    def init(self, rng):
        return []

    def forward(self, p, x):
        if self.fn == "identity":
            return x, None
        if self.fn == "tanh":
            y = np.tanh(x)
        elif self.fn == "sigmoid":
            y = sigmoid(x)
        else:
            y = np.maximum(x, 0.0)
        return y, y

    def backward(self, p, y, g, need_params=True):
        if self.fn == "identity":
            gx = g
        elif self.fn == "tanh":
            gx = g * (1.0 - y * y)
        elif self.fn == "sigmoid":
            gx = g * y * (1.0 - y)
        else:
            gx = g * (y > 0.0)
        return gx, []

    def describe(self):
        return {"type": "act", "fn": self.fn}


def _im2col(xp, k, stride):
    # xp: (n, H, W, c) already padded -> (n*Ho*Wo, k*k*c)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    return cols, (n, ho, wo)


class Conv:
    """2-D convolution (cross-correlation) with zero padding, NHWC layout."""

    kind = "conv"

    def __init__(self, in_shape, filters, kernel=3, stride=1, pad=None):
        if len(in_shape) != 3:
            raise ContractError("conv layer needs an (h, w, c) input")
        self.in_shape = tuple(in_shape)
        self.filters, self.k, self.stride = int(filters), int(kernel), int(stride)
        self.pad = self.k // 2 if pad is None else int(pad)
        h, w, c = in_shape
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ContractError("conv output would be empty")
        self.out_shape = (ho, wo, self.filters)
        self.shapes = [(self.k, self.k, c, self.filters), (self.filters,)]

    def init(self, rng):
        c = self.in_shape[2]
        fan_in = self.k * self.k * c
        fan_out = self.k * self.k * self.filters
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return [rng.uniform(-limit, limit, size=self.shapes[0]), np.zeros(self.filters)]

    def forward(self, p, x):
        P = self.pad
        xp = np.pad(x, ((0, 0), (P, P), (P, P), (0, 0))) if P else x
        cols, (n, ho, wo) = _im2col(xp, self.k, self.stride)
        y = cols @ p[0].reshape(-1, self.filters) + p[1]
        return y.reshape(n, ho, wo, self.filters), cols

    def backward(self, p, cols, g, need_params=True):
        n = len(g)
        k, s, P = self.k, self.stride, self.pad
        h, w, c = self.in_shape
        ho, wo = g.shape[1:3]
        if s > 1:
            gd = np.zeros((n, (ho - 1) * s + 1, (wo - 1) * s + 1, self.filters))
            gd[:, ::s, ::s] = g
        else:
            gd = g
        hp, wp = h + 2 * P, w + 2 * P
        extra_h = hp - (gd.shape[1] + k - 1)
        extra_w = wp - (gd.shape[2] + k - 1)
        gp = np.pad(gd, ((0, 0), (k - 1, k - 1 + extra_h), (k - 1, k - 1 + extra_w), (0, 0)))
        wflip = p[0][::-1, ::-1].transpose(0, 1, 3, 2)  # (k, k, filters, c)
        gcols, _ = _im2col(gp, k, 1)
        gxp = (gcols @ wflip.reshape(-1, c)).reshape(n, hp, wp, c)
        gx = gxp[:, P:P + h, P:P + w] if P else gxp
        if not need_params:
            return gx, None
        gflat = g.reshape(-1, self.filters)
        gw = (cols.T @ gflat).reshape(self.shapes[0])
        return gx, [gw, gflat.sum(axis=0)]

    def describe(self):
        return {"type": "conv", "filters": self.filters, "kernel": self.k,
                "stride": self.stride, "pad": self.pad}


class Upsample:
    """Nearest-neighbor upsampling by an integer factor."""

    kind = "upsample"
    shapes = []

    def __init__(self, in_shape, factor=2):
        if len(in_shape) != 3:
            raise ContractError("upsample layer needs an (h, w, c) input")
        self.in_shape = tuple(in_shape)
        self.f = int(factor)
        h, w, c = in_shape
        self.out_shape = (h * self.f, w * self.f, c)

    def init(self, rng):
        return []

    def forward(self, p, x):
        return x.repeat(self.f, axis=1).repeat(self.f, axis=2), None

    def backward(self, p, cache, g, need_params=True):
        n, H, W, c = g.shape
        f = self.f
        return g.reshape(n, H // f, f, W // f, f, c).sum(axis=(2, 4)), []

    def describe(self):
        return {"type": "upsample", "factor": self.f}


class Reshape:
    kind = "reshape"
    shapes = []

    def __init__(self, in_shape, shape):
        if int(np.prod(in_shape)) != int(np.prod(shape)):
            raise ContractError(f"cannot reshape {in_shape} to {shape}")
        self.in_shape, self.out_shape = tuple(in_shape), tuple(shape)

    def init(self, rng):
        return []

    def forward(self, p, x):
        return x.reshape((len(x),) + self.out_shape), None

    def backward(self, p, cache, g, need_params=True):
        return g.reshape((len(g),) + self.in_shape), []

    def describe(self):
        return {"type": "reshape", "shape": list(self.out_shape)}


def _build_layer(in_shape, spec):
    spec = dict(spec)
    kind = spec.pop("type")
    if kind == "dense":
        return Dense(in_shape, spec["units"])
    if kind == "act":
        return Activation(in_shape, spec["fn"])
    if kind == "conv":
        return Conv(in_shape, spec["filters"], spec.get("kernel", 3),
                    spec.get("stride", 1), spec.get("pad"))
    if kind == "upsample":
        return Upsample(in_shape, spec.get("factor", 2))
    if kind == "reshape":
        return Reshape(in_shape, spec["shape"])
    raise ContractError(f"unknown layer type {kind!r}")


@dataclass(frozen=True)
class NetworkConfig:
    """Input shape ``(h, w, c)`` and an ordered list of layer dicts.

    Layer dicts: ``{"type": "dense", "units": n}``,
    ``{"type": "conv", "filters": f, "kernel": k, "stride": s, "pad": p}``,
    ``{"type": "act", "fn": "tanh"}``, ``{"type": "upsample", "factor": 2}``.
    """

    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    def to_json(self):
        return json.dumps({"input_shape": list(self.input_shape),
                           "layers": [dict(l) for l in self.layers]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(tuple(obj["input_shape"]), tuple(obj["layers"]))


def dense_autoencoder(input_shape, hidden=None, activation="tanh",
                      final_activation="identity"):
    """Bottleneck MLP ``d -> d/2 -> d/4 -> d/2 -> d`` (or custom ``hidden`` sizes)."""
    d = int(np.prod(input_shape))
    if hidden is None:
        hidden = (max(d // 2, 1), max(d // 4, 1), max(d // 2, 1))
    layers = []
    for units in hidden:
        layers += [{"type": "dense", "units": int(units)}, {"type": "act", "fn": activation}]
    layers += [{"type": "dense", "units": d}, {"type": "act", "fn": final_activation}]
    return NetworkConfig(tuple(input_shape), tuple(layers))


def conv_autoencoder(input_shape, filters=8, kernel=3, depth=3, activation="tanh",
                     final_activation="identity", downsample=0):
    """Fully convolutional net: ``depth`` conv layers of ``filters`` channels.

    With ``downsample > 0`` the first that many hidden convolutions use
    stride 2 and are mirrored by nearest upsampling before the output layer.
    """
    c = input_shape[2]
    layers = []
    for i in range(depth - 1):
        stride = 2 if i < downsample else 1
        layers += [{"type": "conv", "filters": filters, "kernel": kernel, "stride": stride,
                    "pad": kernel // 2},
                   {"type": "act", "fn": activation}]
    for _ in range(downsample):
        layers += [{"type": "upsample", "factor": 2},
                   {"type": "conv", "filters": filters, "kernel": kernel, "pad": kernel // 2},
                   {"type": "act", "fn": activation}]
    layers += [{"type": "conv", "filters": c, "kernel": kernel, "pad": kernel // 2},
               {"type": "act", "fn": final_activation}]
    return NetworkConfig(tuple(input_shape), tuple(layers))


class Network:
    """Compiled layer stack with a flat parameter layout."""

    def __init__(self, config):
        self.config = config
        shape = tuple(config.input_shape)
        self.layers = []
        self.offsets = []  # per layer: list of (start, stop, shape)
        pos = 0
        for spec in config.layers:
            layer = _build_layer(shape, spec)
            slots = []
            for s in layer.shapes:
                size = int(np.prod(s))
                slots.append((pos, pos + size, s))
                pos += size
            self.layers.append(layer)
            self.offsets.append(slots)
            shape = layer.out_shape
        self.n_params = pos
        self.dim = config.dim
        if int(np.prod(shape)) != self.dim:
            raise ContractError(
                f"network output size {int(np.prod(shape))} != input size {self.dim}")
        self.out_shape = shape

    def init_params(self, rng):
        theta = np.empty(self.n_params)
        for layer, slots in zip(self.layers, self.offsets):
            for (a, b, s), arr in zip(slots, layer.init(rng)):
                theta[a:b] = arr.ravel()
        return theta

    def _unpack(self, theta):
        return [[theta[a:b].reshape(s) for a, b, s in slots] for slots in self.offsets]

    def forward(self, theta, X, keep_cache=False):
        """Evaluate on a batch ``X`` of shape (n, d); returns (n, d)."""
        ps = self._unpack(theta)
        h = X.reshape((len(X),) + tuple(self.config.input_shape))
        caches = []
        for i, (layer, p) in enumerate(zip(self.layers, ps)):
            with np.errstate(invalid="ignore", over="ignore"):
                h, cache = layer.forward(p, h)
            if not np.all(np.isfinite(h)):
                raise NumericalError(f"non-finite output at layer {i} ({layer.kind})")
            if keep_cache:
                caches.append(cache)
        out = h.reshape(len(X), -1)
        return (out, caches) if keep_cache else out

    def backward(self, theta, caches, G, need_params=True):
        """Pull back output cotangents ``G`` (n, d).

        Returns ``(grad_theta, grad_input)``; ``grad_theta`` sums over the batch.
        """
        ps = self._unpack(theta)
        g = G.reshape((len(G),) + self.out_shape)
        grad = np.zeros(self.n_params) if need_params else None
        for layer, p, cache, slots in zip(reversed(self.layers), reversed(ps),
                                          reversed(caches), reversed(self.offsets)):
            g, gp = layer.backward(p, cache, g, need_params)
            if need_params:
                for (a, b, _), arr in zip(slots, gp):
                    grad[a:b] = arr.ravel()
        return grad, g.reshape(len(G), -1)


_MAGIC = b"FAECKPT\x00"
_VERSION = 1


@dataclass
class ParamVector:
    """Flat weights ``theta`` together with the network they parameterize."""

    network: Network
    theta: np.ndarray
    max_jacobian_dim: int = 1024

    @classmethod
    def initialize(cls, config, rng):
        net = Network(config)
        return cls(net, net.init_params(rng))

    @property
    def dim(self):
        return self.network.dim

    def copy(self, theta=None):
        return ParamVector(self.network, self.theta.copy() if theta is None else theta,
                           self.max_jacobian_dim)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            if len(x) != self.dim:
                raise ContractError(f"expected input of length {self.dim}, got {len(x)}")
            return self.network.forward(self.theta, x[None])[0]
        flat = x.reshape(len(x), -1)
        if flat.shape[1] != self.dim:
            raise ContractError(f"expected inputs of length {self.dim}, got {x.shape}")
        return self.network.forward(self.theta, flat)

    __call__ = forward

    def jacobian(self, x):
        d = self.dim
        if d > self.max_jacobian_dim:
            raise ContractError(
                f"jacobian of dimension {d} exceeds cap {self.max_jacobian_dim}")
        x = np.asarray(x, dtype=np.float64).reshape(d)
        _, caches = self.network.forward(self.theta, np.tile(x, (d, 1)), keep_cache=True)
        _, rows = self.network.backward(self.theta, caches, np.eye(d), need_params=False)
        return rows

    def laplacian(self, x, step=1e-3):
        if self.dim > self.max_jacobian_dim:
            raise ContractError(
                f"laplacian of dimension {self.dim} exceeds cap {self.max_jacobian_dim}")
        return fd_laplacian(self.forward, x, step)


def fd_laplacian(fn, x, step=1e-3):
    """Component-wise Laplacian by central second differences along each axis.

    One Richardson level: ``(4 D(h/2) - D(h)) / 3``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = len(x)
    f0 = fn(x[None])[0]

    def second_diff(h):
        E = np.eye(d) * h
        fp = fn(x + E)
        fm = fn(x - E)
        return ((fp + fm).sum(axis=0) - 2.0 * d * f0) / (h * h)

    return (4.0 * second_diff(step / 2.0) - second_diff(step)) / 3.0


def forward(params, x):
    """Evaluate ``f_theta`` on one vector (d,) or a batch (n, d)."""
    return params.forward(x)


def jacobian(params, x):
    """(d, d) input Jacobian ``J[k, i] = d f_k / d x_i``."""
    return params.jacobian(x)


def laplacian(params, x, step=1e-3):
    """Vector of Hessian traces, one per output component."""
    return params.laplacian(x, step)


def save_checkpoint(path, params):
    """Versioned binary checkpoint: magic, version, JSON architecture, float64 weights."""
    desc = params.network.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", len(params.theta)))
        fh.write(np.asarray(params.theta, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n_desc = struct.unpack_from("<II", raw, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = NetworkConfig.from_json(raw[pos:pos + n_desc].decode("utf-8"))
    pos += n_desc
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    theta = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
    net = Network(config)
    if net.n_params != n:
        raise ValueError(f"{path}: expected {net.n_params} weights, found {n}")
    return ParamVector(net, theta)
