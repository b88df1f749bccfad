"""Procedural corruption model producing (corrupted, clean, mask) training pairs.

Occlusions vary along shape (elastically deformed ellipses plus thin curves),
texture (procedural patterns or patches of user images) and opacity (opaque
or partially transparent). Symmetric Gaussian noise is drawn on top so that
input and target share one noise realization.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ._validation import ContractError, check_image, check_mask
from .imageio import list_pnm, read_pnm


class CorruptionError(RuntimeError):
    """A mask could not be generated within the configured bounds."""


@dataclass(frozen=True)
class CorruptionConfig:
    """Parameters of the corruption model.

    Ranges are ``(low, high)`` tuples. Lengths and radii are fractions of
    ``min(h, w)``; elastic amplitude and curve thickness are in pixels.
    """

    area_min: float = 0.005
    area_max: float = 0.2
    ellipse_count: tuple = (1, 3)
    ellipse_radius: tuple = (0.04, 0.18)
    elastic_grid: int = 4
    elastic_amplitude: tuple = (0.0, 4.0)
    curve_prob: float = 0.5
    curve_count: tuple = (1, 2)
    curve_length: tuple = (0.2, 0.6)
    curve_thickness: tuple = (1, 3)
    opacity: tuple = (0.3, 0.9)
    opaque_prob: float = 0.5
    noise_max: float = 0.1
    clean_prob: float = 0.1
    texture: str = "procedural"
    texture_kinds: tuple = ("noise", "stripes", "blotches")
    octave_weights: tuple = (1.0, 0.5, 0.25)
    noise_cell: tuple = (4.0, 16.0)
    stripe_period: tuple = (3.0, 12.0)
    max_retries: int = 32

    def __post_init__(self):
        if not 0.0 < self.area_min <= self.area_max < 1.0:
            raise ContractError("area bounds must satisfy 0 < min <= max < 1")
        lo, hi = self.opacity
        if not 0.0 < lo <= hi <= 1.0:
            raise ContractError("opacity range must lie within (0, 1]")
        if self.noise_max < 0.0:
            raise ContractError("noise_max must be non-negative")
        for name in ("curve_prob", "opaque_prob", "clean_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must be a probability")
        if self.elastic_grid < 2:
            raise ContractError("elastic_grid must be >= 2")
        if self.max_retries < 1:
            raise ContractError("max_retries must be >= 1")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class TrainingPair:
    input: np.ndarray   # corrupted image plus noise
    target: np.ndarray  # clean image plus the same noise
    mask: np.ndarray    # continuous corruption mask, (h, w)
    sigma: float
    clean: np.ndarray = field(repr=False, default=None)
    corrupted: np.ndarray = field(repr=False, default=None)


def _check_size(h, w):
    if h < 16 or w < 16:
        raise ContractError(f"mask size must be at least 16x16, got {h}x{w}")


def rasterize_ellipse(h, w, center, radii, angle=0.0):
    """Binary mask of pixel centers inside a rotated ellipse."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (dy * c + dx * s) / radii[0]
    v = (-dy * s + dx * c) / radii[1]
    return (u * u + v * v <= 1.0).astype(np.float64)


def displacement_field(rng, h, w, grid, amplitude):
    """Smooth random displacement: Gaussian values on a grid, bilinearly upsampled.

    Returns ``(dy, dx)`` arrays of shape (h, w) in pixels.
    """
    coarse = rng.standard_normal((2, grid, grid)) * amplitude
    gy = np.linspace(0.0, grid - 1.0, h)
    gx = np.linspace(0.0, grid - 1.0, w)
    coords = np.stack(np.meshgrid(gy, gx, indexing="ij"))
    dy = ndimage.map_coordinates(coarse[0], coords, order=1, mode="nearest")
    dx = ndimage.map_coordinates(coarse[1], coords, order=1, mode="nearest")
    return dy, dx


def elastic_warp(mask, dy, dx):
    """Nearest-neighbor resampling of ``mask`` at the displaced coordinates."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sy = np.clip(np.rint(yy + dy).astype(int), 0, h - 1)
    sx = np.clip(np.rint(xx + dx).astype(int), 0, w - 1)
    return mask[sy, sx]


def _area_ok(mask, cfg, lower=True):
    frac = np.count_nonzero(mask) / mask.size
    if frac > cfg.area_max:
        return "area_max"
    if lower and frac < cfg.area_min:
        return "area_min"
    if frac == 0.0:
        return "area_min"
    return None


def generate_blob_mask(rng, h, w, cfg):
    """Union of random ellipses, elastically deformed; values in {0, 1}.

    Redraws until the corrupted-area fraction lies within
    ``[cfg.area_min, cfg.area_max]``.
    """
    _check_size(h, w)
    size = min(h, w)
    violated = None
    for _ in range(cfg.max_retries):
        shape = np.zeros((h, w))
        n = rng.integers(cfg.ellipse_count[0], cfg.ellipse_count[1] + 1)
        for _ in range(n):
            center = (rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w)
            radii = rng.uniform(*cfg.ellipse_radius, size=2) * size
            angle = rng.uniform(0.0, np.pi)
            shape = np.maximum(shape, rasterize_ellipse(h, w, center, radii, angle))
        amp = rng.uniform(*cfg.elastic_amplitude)
        dy, dx = displacement_field(rng, h, w, cfg.elastic_grid, amp)
        shape = elastic_warp(shape, dy, dx)
        violated = _area_ok(shape, cfg)
        if violated is None:
            return shape
    raise CorruptionError(
        f"blob mask violated {violated} after {cfg.max_retries} attempts")


def chaikin(points, iterations=2):
    """Corner-cutting smoothing of an open polyline."""
    p = np.asarray(points, dtype=np.float64)
    for _ in range(iterations):
        if len(p) < 3:
            break
        q = 0.75 * p[:-1] + 0.25 * p[1:]
        r = 0.25 * p[:-1] + 0.75 * p[1:]
        inner = np.empty((2 * len(q), 2))
        inner[0::2], inner[1::2] = q, r
        p = np.vstack([p[:1], inner, p[-1:]])
    return p


def draw_polyline(h, w, points):
    """1-pixel centerline: DDA sampling of each segment (Bresenham coverage)."""
    out = np.zeros((h, w), dtype=bool)
    p = np.asarray(points, dtype=np.float64)
    for a, b in zip(p[:-1], p[1:]):
        n = int(np.ceil(np.max(np.abs(b - a)))) + 1
        t = np.linspace(0.0, 1.0, n)
        ys = np.rint(a[0] + t * (b[0] - a[0])).astype(int)
        xs = np.rint(a[1] + t * (b[1] - a[1])).astype(int)
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        out[ys[keep], xs[keep]] = True
    return out


def stroke(centerline, thickness):
    """Thicken a boolean centerline to the pixels within (t - 1) / 2 of it."""
    if thickness <= 1:
        return centerline.astype(np.float64)
    dist = ndimage.distance_transform_edt(~centerline)
    return (dist <= (thickness - 1) / 2.0).astype(np.float64)


def generate_curve_mask(rng, h, w, cfg):
    """Thin smooth random curves, values in {0, 1}.

    Each curve is a random walk of control points with a slowly turning
    heading, smoothed by Chaikin corner cutting and stroked with an odd
    thickness drawn from ``cfg.curve_thickness``.
    """
    _check_size(h, w)
    size = min(h, w)
    violated = None
    for _ in range(cfg.max_retries):
        out = np.zeros((h, w))
        n = rng.integers(cfg.curve_count[0], cfg.curve_count[1] + 1)
        for _ in range(n):
            length = rng.uniform(*cfg.curve_length) * size
            k = int(rng.integers(4, 9))
            step = length / (k - 1)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            pts = [np.array([rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w])]
            for _ in range(k - 1):
                heading += rng.normal(0.0, 0.6)
                pts.append(pts[-1] + step * np.array([np.sin(heading), np.cos(heading)]))
            line = draw_polyline(h, w, chaikin(pts))
            t_lo, t_hi = cfg.curve_thickness
            thickness = int(rng.integers(t_lo, t_hi + 1))
            if thickness % 2 == 0:
                thickness += 1 if thickness < t_hi else -1
            out = np.maximum(out, stroke(line, max(thickness, 1)))
        violated = _area_ok(out, cfg, lower=False)
        if violated is None:
            return out
    raise CorruptionError(
        f"curve mask violated {violated} after {cfg.max_retries} attempts")


def _value_noise(rng, h, w, cell):
    gh = int(np.ceil(h / cell)) + 2
    gw = int(np.ceil(w / cell)) + 2
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    oy, ox = rng.uniform(0.0, 1.0, size=2)
    coords = np.stack(np.meshgrid(np.arange(h) / cell + oy, np.arange(w) / cell + ox,
                                  indexing="ij"))
    return ndimage.map_coordinates(coarse, coords, order=1, mode="nearest")


def _procedural_pattern(rng, h, w, cfg):
    kind = cfg.texture_kinds[rng.integers(len(cfg.texture_kinds))]
    if kind == "noise":
        cell = rng.uniform(*cfg.noise_cell)
        pattern = np.zeros((h, w))
        for i, wt in enumerate(cfg.octave_weights):
            field_ = _value_noise(rng, h, w, max(cell / 2 ** i, 1.0))
            pattern += wt * field_
        dc = max(cfg.octave_weights, default=0.0) * rng.uniform(-0.4, 0.4)
        return pattern * 0.5 + dc
    if kind == "stripes":
        period = rng.uniform(*cfg.stripe_period)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        arg = 2.0 * np.pi * (yy * np.sin(theta) + xx * np.cos(theta)) / period + phase
        amp = rng.uniform(0.2, 0.5)
        return amp * np.sin(arg) + rng.uniform(-0.3, 0.3)
    if kind == "blotches":
        pattern = np.full((h, w), rng.uniform(-0.4, 0.4))
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(3, 9))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(0.05, 0.25) * min(h, w)
            pattern += rng.uniform(-0.5, 0.5) * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        return pattern
    raise ContractError(f"unknown texture kind {kind!r}")


def sample_texture(rng, h, w, cfg, channels=1):
    """Texture image in [0, 1] of shape (h, w, channels).

    ``cfg.texture == "procedural"`` synthesizes value noise, stripes or
    blotches; otherwise it names a directory of PGM/PPM files from which a
    random patch is cropped (wrapping when the source is smaller).
    """
    if cfg.texture == "procedural":
        pattern = _procedural_pattern(rng, h, w, cfg)
        if channels == 1:
            img = 0.5 + pattern[:, :, None]
        else:
            gains = rng.uniform(0.6, 1.4, size=channels)
            img = 0.5 + pattern[:, :, None] * gains
        return np.clip(img, 0.0, 1.0)
    try:
        files = list_pnm(cfg.texture)
    except OSError as exc:
        raise ContractError(f"texture directory {cfg.texture!r}: {exc}") from None
    if not files:
        raise ContractError(f"texture directory {cfg.texture!r} has no PGM/PPM files")
    src = read_pnm(files[rng.integers(len(files))])
    y0, x0 = rng.integers(src.shape[0]), rng.integers(src.shape[1])
    rows = np.arange(y0, y0 + h) % src.shape[0]
    cols = np.arange(x0, x0 + w) % src.shape[1]
    patch = src[np.ix_(rows, cols)]
    if patch.shape[2] != channels:
        patch = (np.repeat(patch, channels, axis=2) if channels == 3
                 else patch.mean(axis=2, keepdims=True))
    return np.clip(patch, 0.0, 1.0)


def compose_corruption(x, shape, texture, opacity):
    """Blend ``texture`` into ``x`` under ``opacity * shape``.

    Returns ``(x_hat, M)`` with ``x_hat = (1 - M) x + M texture`` per channel
    and ``M = opacity * shape``.
    """
    x = check_image(x, "x")
    shape = check_mask(shape, x.shape[:2], "shape")
    texture = check_image(texture, "texture")
    if texture.shape[:2] != x.shape[:2] or texture.shape[2] not in (1, x.shape[2]):
        raise ContractError(f"texture shape {texture.shape} incompatible with {x.shape}")
    if not 0.0 < opacity <= 1.0:
        raise ContractError("opacity must lie in (0, 1]")
    m = opacity * shape
    mc = m[:, :, None]
    x_hat = (1.0 - mc) * x + mc * texture
    return np.clip(x_hat, 0.0, 1.0), m


def corrupt(x, cfg, rng):
    """One corruption draw: ``(x_hat, M)``; never corruption-free."""
    x = check_image(x, "x")
    h, w, c = x.shape
    shape = generate_blob_mask(rng, h, w, cfg)
    if rng.random() < cfg.curve_prob:
        for _ in range(cfg.max_retries):
            combined = np.maximum(shape, generate_curve_mask(rng, h, w, cfg))
            if np.count_nonzero(combined) / combined.size <= cfg.area_max:
                shape = combined
                break
    texture = sample_texture(rng, h, w, cfg, channels=c)
    if rng.random() < cfg.opaque_prob:
        alpha = 1.0
    else:
        alpha = rng.uniform(*cfg.opacity)
    return compose_corruption(x, shape, texture, alpha)


def make_training_pair(x, cfg, rng):
    """Draw a corrupted pair and add one shared noise field to both sides.

    With probability ``cfg.clean_prob`` the pair is corruption-free. The
    noise level is ``sigma ~ Uniform(0, cfg.noise_max)``; training tensors are
    not clipped after the noise is added.
    """
    x = check_image(x, "x")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ContractError("x must lie in [0, 1]")
    if rng.random() < cfg.clean_prob:
        x_hat, m = x, np.zeros(x.shape[:2])
    else:
        x_hat, m = corrupt(x, cfg, rng)
    sigma = rng.uniform(0.0, cfg.noise_max) if cfg.noise_max > 0 else 0.0
    eps = sigma * rng.standard_normal(x.shape)
    return TrainingPair(x_hat + eps, x + eps, m, float(sigma), clean=x, corrupted=x_hat)
