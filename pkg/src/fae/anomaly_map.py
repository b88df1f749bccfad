"""Difference maps, iterated mean-filter smoothing and score reduction.

All maps are (h, w) float arrays; higher values mean more anomalous.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import ContractError, check_image, check_same_shape

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
GMS_C = 0.0026
DELTA_KINDS = ("mse", "ssim", "gms")


@dataclass(frozen=True)
class SmoothingSpec:
    k: int = 7
    n: int = 2

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ContractError(f"kernel size must be odd and >= 1, got {self.k}")
        if self.n < 0:
            raise ContractError(f"repetition count must be >= 0, got {self.n}")


def _pair(a, b):
    a, b = check_image(a, "a"), check_image(b, "b")
    check_same_shape(a, b)
    return a, b


def delta_mse(a, b):
    """Channel mean of the squared difference."""
    a, b = _pair(a, b)
    return np.mean((a - b) ** 2, axis=2)


def _gauss(x, sigma, radius):
    return ndimage.gaussian_filter(x, sigma, mode="reflect", truncate=radius / sigma)


def delta_ssim(a, b, window=11, sigma=1.5):
    """``(1 - SSIM) / 2`` per pixel with Gaussian-weighted local statistics.

    Computed per channel at unit dynamic range, averaged over channels and
    clipped to [0, 1].
    """
    a, b = _pair(a, b)
    if window % 2 == 0 or window > min(a.shape[:2]):
        raise ContractError("window must be odd and no larger than the image")
    radius = window // 2
    out = np.zeros(a.shape[:2])
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = _gauss(x, sigma, radius), _gauss(y, sigma, radius)
        vx = _gauss(x * x, sigma, radius) - mx * mx
        vy = _gauss(y * y, sigma, radius) - my * my
        cxy = _gauss(x * y, sigma, radius) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
        out += num / den
    ssim = out / a.shape[2]
    return np.clip((1.0 - ssim) / 2.0, 0.0, 1.0)


PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
PREWITT_Y = PREWITT_X.T


def gradient_magnitude(img):
    """Prewitt gradient magnitude of the channel-mean image (reflect borders)."""
    g = img.mean(axis=2)
    gx = ndimage.correlate(g, PREWITT_X, mode="reflect")
    gy = ndimage.correlate(g, PREWITT_Y, mode="reflect")
    return np.sqrt(gx * gx + gy * gy)


def delta_gms(a, b, c=GMS_C):
    """``1 - GMS`` with ``GMS = (2 ga gb + c) / (ga^2 + gb^2 + c)``."""
    a, b = _pair(a, b)
    ga, gb = gradient_magnitude(a), gradient_magnitude(b)
    gms = (2 * ga * gb + c) / (ga * ga + gb * gb + c)
    return np.clip(1.0 - gms, 0.0, 1.0)


_DELTAS = {"mse": delta_mse, "ssim": delta_ssim, "gms": delta_gms}


def delta(kind, a, b):
    try:
        fn = _DELTAS[kind]
    except KeyError:
        raise ContractError(f"unknown difference kind {kind!r}") from None
    return fn(a, b)


def _box_sum(m, k, axis):
    r = k // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    p = np.pad(m, pad, mode="symmetric")
    n = m.shape[axis]
    out = np.zeros_like(m)
    for off in range(k):
        out += np.take(p, np.arange(off, off + n), axis=axis)
    return out


def mean_filter(m, spec):
    """Apply the k x k box filter (entries 1/k^2) ``spec.n`` times, reflect padding."""
    out = np.array(m, dtype=np.float64)
    if out.ndim != 2:
        raise ContractError(f"map must be 2-D, got {out.shape}")
    if spec.k > 1 and spec.k // 2 > min(out.shape):
        raise ContractError("kernel larger than map")
    for _ in range(spec.n):
        out = _box_sum(_box_sum(out, spec.k, 0), spec.k, 1) / (spec.k * spec.k)
    return out


def reconstruct(params, x_hat):
    """Network output for one image, reshaped like the input."""
    x_hat = check_image(x_hat, "x_hat")
    y = params.forward(x_hat.reshape(-1))
    if y.size != x_hat.size:
        raise ContractError("network output size does not match the image")
    return y.reshape(x_hat.shape)


def anomap(x_hat, params, kind="mse", spec=SmoothingSpec()):
    """Smoothed difference between ``x_hat`` and its reconstruction."""
    x_hat = check_image(x_hat, "x_hat")
    return mean_filter(delta(kind, x_hat, reconstruct(params, x_hat)), spec)


def image_score(m, reduction="sum"):
    if reduction == "sum":
        return float(np.sum(m))
    if reduction == "max":
        return float(np.max(m))
    raise ContractError(f"unknown reduction {reduction!r}")


def segment(m, threshold):
    """Binary mask: 1 where the map exceeds ``threshold``."""
    if not np.isfinite(threshold):
        raise ContractError("threshold must be finite")
    return (np.asarray(m) > threshold).astype(np.float64)
