"""Input validation helpers shared by the public functions."""

import numpy as np


class ContractError(ValueError):
    """Raised when arguments violate a documented precondition."""


class NumericalError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


def check_image(x, name="image", allow_2d=True):
    """Return ``x`` as a float64 array of shape (h, w, c).

    2-D input is promoted to a single channel.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and allow_2d:
        x = x[:, :, None]
    if x.ndim != 3:
        raise ContractError(f"{name} must have shape (h, w, c), got {x.shape}")
    if x.shape[2] not in (1, 3):
        raise ContractError(f"{name} must have 1 or 3 channels, got {x.shape[2]}")
    return x


def check_mask(m, shape=None, name="mask"):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ContractError(f"{name} must have shape (h, w), got {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ContractError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ContractError(f"{name} values must lie in [0, 1]")
    return m


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ContractError(
            f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def as_rng(seed):
    """Coerce ``seed`` (None, int or Generator) into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
