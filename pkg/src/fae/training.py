"""Reconstruction losses, exact gradients, Adam and the training loop."""

import csv
import zlib
from dataclasses import dataclass, replace

import numpy as np

from ._validation import ContractError, NumericalError
from .corruption import CorruptionConfig, make_training_pair
from .network import ParamVector

LOSS_KINDS = ("fae", "dae", "weighted")


class TrainingDivergence(RuntimeError):
    pass


def substream(seed, name):
    """Independent generator for the named purpose ("data", "init", ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _flat(a):
    return np.asarray(a, dtype=np.float64).reshape(-1)


def loss_dae(params, x_hat, x):
    """``||f(x_hat) - x||^2`` (sum of squares)."""
    r = params.forward(_flat(x_hat)) - _flat(x)
    return float(r @ r)


def loss_fae(params, x_hat, x, eps):
    """``||f(x_hat + eps) - (x + eps)||^2``."""
    eps = _flat(eps)
    r = params.forward(_flat(x_hat) + eps) - (_flat(x) + eps)
    return float(r @ r)


def mask_weights(mask, channels, lam):
    """Per-element weights of the region-weighted loss.

    ``(1 - lam) Mbar^2 / |Mbar|_1 + lam M^2 / |M|_1`` with the mask broadcast
    over channels; a region with zero norm contributes nothing.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError("lambda must lie in [0, 1]")
    m = np.repeat(np.asarray(mask, dtype=np.float64).reshape(-1, 1), channels, axis=1).ravel()
    mbar = 1.0 - m
    w = np.zeros_like(m)
    n_bar, n_m = mbar.sum(), m.sum()
    if n_bar > 0:
        w += (1.0 - lam) * mbar * mbar / n_bar
    if n_m > 0:
        w += lam * m * m / n_m
    return w


def loss_weighted(params, x_hat, x, mask, lam=0.5):
    x_hat = _flat(x_hat)
    channels = x_hat.size // np.asarray(mask).size
    r = params.forward(x_hat) - _flat(x)
    return float(mask_weights(mask, channels, lam) @ (r * r))


def loss_and_gradient(params, inputs, targets, kind="mse", masks=None, lam=0.5,
                      reduction="mean"):
    """Mean batch loss and its exact gradient with respect to ``theta``.

    ``kind="mse"`` is the squared error used by both the plain and the
    noise-augmented objective (the noise lives in the pairs); ``"weighted"``
    uses the region-weighted loss with ``masks``. With ``reduction="mean"``
    squared errors are divided by ``d``; ``"sum"`` keeps the plain sum.
    """
    if len(inputs) == 0:
        raise ContractError("empty batch")
    X = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    T = np.asarray(targets, dtype=np.float64).reshape(len(targets), -1)
    if X.shape != T.shape:
        raise ContractError(f"inputs {X.shape} and targets {T.shape} differ")
    n, d = X.shape
    net = params.network
    out, caches = net.forward(params.theta, X, keep_cache=True)
    R = out - T
    if kind == "weighted":
        if masks is None:
            raise ContractError("weighted loss needs masks")
        W = np.stack([mask_weights(m, d // np.asarray(m).size, lam) for m in masks])
    elif kind == "mse":
        W = np.full((1, d), 1.0 / d if reduction == "mean" else 1.0)
    else:
        raise ContractError(f"unknown loss kind {kind!r}")
    loss = float(np.sum(W * R * R) / n)
    grad, _ = net.backward(params.theta, caches, 2.0 * W * R / n)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError("non-finite loss or gradient")
    return loss, grad


def gradient(params, inputs, targets, kind="mse", masks=None, lam=0.5, reduction="mean"):
    """Exact reverse-mode gradient of the mean batch loss."""
    return loss_and_gradient(params, inputs, targets, kind, masks, lam, reduction)[1]


@dataclass(frozen=True)
class TrainState:
    params: ParamVector
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    seed: int = 0

    @classmethod
    def start(cls, params, lr=1e-3, seed=0):
        z = np.zeros_like(params.theta)
        return cls(params, z, z.copy(), 0, lr, seed)


def _adam_inplace(theta, m, v, grad, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    # updates theta, m, v in place; scratch buffers keep allocations per step low
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    scratch = np.multiply(grad, grad)
    scratch *= 1.0 - beta2
    v += scratch
    np.sqrt(v, out=scratch)
    scratch *= 1.0 / np.sqrt(1.0 - beta2 ** t)
    scratch += eps
    np.divide(m, scratch, out=scratch)
    scratch *= lr / (1.0 - beta1 ** t)
    theta -= scratch


def adam_step(state, grad, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns a new state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ContractError("gradient length does not match parameters")
    theta, m, v = state.params.theta.copy(), state.m.copy(), state.v.copy()
    t = state.step + 1
    _adam_inplace(theta, m, v, grad, t, state.lr, beta1, beta2, eps)
    return replace(state, params=state.params.copy(theta), m=m, v=v, step=t)


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    loss: str = "fae"
    weight_lambda: float = 0.5
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ContractError(f"loss must be one of {LOSS_KINDS}")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ContractError("invalid schedule")


def train(images, net_config, corruption=None, schedule=None, callback=None,
          init=None):
    """Fit a reconstruction network on normal images with corrupted pairs.

    Each step draws ``batch_size`` training pairs (shared noise on input and
    target for ``loss="fae"``, no noise for ``"dae"``), takes the exact
    gradient and an Adam step. ``callback(step, params, loss, sigma_mean)`` is
    called every ``log_every`` steps and after the last one.

    Returns ``(params, history)`` where ``history`` holds
    ``(step, loss, sigma_mean)`` rows averaged over each logging window.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ContractError("need at least one training image")
    corruption = corruption or CorruptionConfig()
    schedule = schedule or TrainSchedule()
    if schedule.loss == "dae":
        corruption = corruption.replace(noise_max=0.0)
    params = init if init is not None else ParamVector.initialize(
        net_config, substream(schedule.seed, "init"))
    params = params.copy()
    m, v = np.zeros_like(params.theta), np.zeros_like(params.theta)
    data_rng = substream(schedule.seed, "data")
    kind = "weighted" if schedule.loss == "weighted" else "mse"
    history = []
    win_loss, win_sigma, win_n = 0.0, 0.0, 0
    for step in range(1, schedule.steps + 1):
        pairs = [make_training_pair(images[data_rng.integers(len(images))], corruption,
                                    data_rng) for _ in range(schedule.batch_size)]
        try:
            loss, grad = loss_and_gradient(
                params, [p.input for p in pairs], [p.target for p in pairs], kind,
                [p.mask for p in pairs], schedule.weight_lambda)
        except NumericalError as exc:
            raise TrainingDivergence(f"training diverged at step {step}: {exc}") from None
        _adam_inplace(params.theta, m, v, grad, step, schedule.lr)
        win_loss += loss
        win_sigma += float(np.mean([p.sigma for p in pairs]))
        win_n += 1
        if step % schedule.log_every == 0 or step == schedule.steps:
            row = (step, win_loss / win_n, win_sigma / win_n)
            history.append(row)
            win_loss, win_sigma, win_n = 0.0, 0.0, 0
            if callback is not None:
                callback(step, params.copy(), row[1], row[2])
    return params, history


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "sigma_mean"])
        for step, loss, sig in history:
            writer.writerow([step, repr(float(loss)), repr(float(sig))])
