"""Image corruption engine: 15 severity-parameterized transforms plus
resolution downscaling, the randomized diversification applied to student
inputs during distillation.

Every transform is a pure function of (image, severity, generator state),
preserves image dimensions, and emits uint8 in [0, 255]. Severity tables
hold 5 parameter sets per kind ordered mild to harsh; they are tuned for
96 x 96 rasters (kernel radii and amplitudes scale with resolution, so the
usual 224-px tables would be disproportionate here). The low end is kept
gentle on purpose: severity 1-2 draws should stay close to clean so a
detector trained on the severity mix does not forget the clean domain. Frost and snow are
procedural (seeded octave noise and blob overlays) so the package carries
no texture assets, and block-codec is an 8x8 block-DCT quantization round
trip standing in for a real lossy codec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .imgio import resize_bilinear, to_float, to_uint8

__all__ = [
    "CORRUPTION_KINDS",
    "DiversifyDraw",
    "apply_corruption",
    "downscale",
    "sample_diversify",
    "replay_diversify",
]

CORRUPTION_KINDS = (
    "gaussian-noise",
    "shot-noise",
    "impulse-noise",
    "defocus-blur",
    "glass-blur",
    "motion-blur",
    "zoom-blur",
    "snow",
    "frost",
    "fog",
    "brightness",
    "contrast",
    "elastic",
    "pixelate",
    "block-codec",
)

SCALE_RATIO_RANGE = (0.6, 1.0)


@dataclass(frozen=True)
class DiversifyDraw:
    """Record of one diversification: corruption kind x severity plus the
    downscale ratio, and the child seed that reproduces the exact pixels."""

    kind: str
    severity: int
    scale_ratio: float
    seed: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind '{self.kind}'")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity {self.severity} outside 1..5")
        lo, hi = SCALE_RATIO_RANGE
        if not lo <= self.scale_ratio <= hi:
            raise ValueError(f"scale ratio {self.scale_ratio} outside [{lo}, {hi}]")


# ---------------------------------------------------------------------------
# noise helpers


def _octave_noise(rng: np.random.Generator, h: int, w: int, base: int = 4, octaves: int = 4) -> np.ndarray:
    """Smooth multi-scale noise in [0,1]: summed upsampled uniform grids."""
    acc = np.zeros((h, w), dtype=np.float32)
    amp, total = 1.0, 0.0
    size = base
    for _ in range(octaves):
        grid = rng.random((min(size, h), min(size, w)), dtype=np.float32)
        acc += amp * resize_bilinear(grid, h, w)
        total += amp
        amp *= 0.55
        size *= 2
    acc /= total
    lo, hi = acc.min(), acc.max()
    if hi > lo:
        acc = (acc - lo) / (hi - lo)
    return acc


def _disk_kernel(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (yy * yy + xx * xx <= radius * radius).astype(np.float32)
    k = ndimage.gaussian_filter(k, sigma=0.5)
    return k / k.sum()


def _line_kernel(length: int, angle: float) -> np.ndarray:
    r = length // 2
    k = np.zeros((2 * r + 1, 2 * r + 1), dtype=np.float32)
    ts = np.linspace(-r, r, 4 * length)
    ys = np.clip(np.rint(r + ts * np.sin(angle)).astype(int), 0, 2 * r)
    xs = np.clip(np.rint(r + ts * np.cos(angle)).astype(int), 0, 2 * r)
    k[ys, xs] = 1.0
    return k / k.sum()


def _conv_rgb(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(3):
        out[:, :, c] = ndimage.convolve(img[:, :, c], kernel, mode="reflect")
    return out


# ---------------------------------------------------------------------------
# the 15 transforms (float32 [0,1] in, float32 out; clipping happens once at
# the end of apply_corruption)


def _gaussian_noise(img, sev, rng):
    sigma = (0.03, 0.07, 0.18, 0.26, 0.38)[sev]
    return img + rng.normal(0.0, sigma, img.shape).astype(np.float32)


def _shot_noise(img, sev, rng):
    lam = (150.0, 60.0, 12.0, 5.0, 3.0)[sev]
    return rng.poisson(np.clip(img, 0, 1) * lam).astype(np.float32) / lam


def _impulse_noise(img, sev, rng):
    amount = (0.01, 0.03, 0.09, 0.17, 0.27)[sev]
    out = img.copy()
    u = rng.random(img.shape, dtype=np.float32)
    out[u < amount / 2] = 0.0
    out[u > 1.0 - amount / 2] = 1.0
    return out


def _defocus_blur(img, sev, rng):
    radius = (0.8, 1.5, 3.0, 4.0, 5.5)[sev]
    return _conv_rgb(img, _disk_kernel(radius))


def _glass_blur(img, sev, rng):
    sigma, delta, iters = ((0.2, 1, 1), (0.35, 1, 1), (0.55, 2, 1), (0.65, 2, 2), (0.8, 3, 2))[sev]
    h, w = img.shape[:2]
    out = np.stack([ndimage.gaussian_filter(img[:, :, c], sigma) for c in range(3)], axis=2)
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(iters):
        dy = rng.integers(-delta, delta + 1, (h, w))
        dx = rng.integers(-delta, delta + 1, (h, w))
        out = out[np.clip(ys + dy, 0, h - 1), np.clip(xs + dx, 0, w - 1)]
    return np.stack([ndimage.gaussian_filter(out[:, :, c], sigma) for c in range(3)], axis=2)


def _motion_blur(img, sev, rng):
    length = (3, 5, 7, 9, 13)[sev]
    angle = rng.uniform(0.0, np.pi)
    return _conv_rgb(img, _line_kernel(length, angle))


def _zoom_blur(img, sev, rng):
    zmax = (1.03, 1.06, 1.16, 1.21, 1.27)[sev]
    h, w = img.shape[:2]
    acc = img.astype(np.float32).copy()
    n = 1
    for z in np.arange(1.02, zmax, 0.02):
        zh, zw = max(int(round(h * z)), h + 1), max(int(round(w * z)), w + 1)
        big = resize_bilinear(img, zh, zw)
        oy, ox = (zh - h) // 2, (zw - w) // 2
        acc += big[oy : oy + h, ox : ox + w]
        n += 1
    return acc / n


def _snow(img, sev, rng):
    density, sigma, veil = (
        (0.002, 0.5, 0.02),
        (0.004, 0.6, 0.05),
        (0.014, 0.8, 0.12),
        (0.022, 0.9, 0.16),
        (0.034, 1.0, 0.22),
    )[sev]
    h, w = img.shape[:2]
    flakes = (rng.random((h, w), dtype=np.float32) < density).astype(np.float32)
    flakes = ndimage.gaussian_filter(flakes, sigma)
    peak = flakes.max()
    if peak > 0:
        flakes = np.clip(flakes / peak, 0.0, 1.0)
    out = img * (1.0 - veil) + veil  # whitening veil
    return out + flakes[:, :, None] * (1.0 - out)


def _frost(img, sev, rng):
    w_img, w_frost = ((0.96, 0.08), (0.92, 0.18), (0.8, 0.38), (0.74, 0.48), (0.65, 0.58))[sev]
    h, w = img.shape[:2]
    field = _octave_noise(rng, h, w, base=6, octaves=4)
    ridges = 1.0 - np.abs(2.0 * field - 1.0)  # vein-like crystalline pattern
    tex = np.stack([0.75 + 0.25 * ridges, 0.78 + 0.22 * ridges, 0.85 + 0.15 * ridges], axis=2)
    return img * w_img + tex * w_frost


def _fog(img, sev, rng):
    t_max = (0.15, 0.3, 0.54, 0.66, 0.78)[sev]
    h, w = img.shape[:2]
    t = _octave_noise(rng, h, w, base=3, octaves=4) * t_max
    return img * (1.0 - t[:, :, None]) + 0.92 * t[:, :, None]


def _brightness(img, sev, rng):
    # Additive in lightness, so even an all-black image gets strictly brighter.
    b = (0.05, 0.1, 0.26, 0.34, 0.42)[sev]
    return img + b


def _contrast(img, sev, rng):
    c = (0.8, 0.6, 0.35, 0.25, 0.15)[sev]
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * c + mean


def _elastic(img, sev, rng):
    amp, sigma = ((0.8, 6.0), (1.5, 6.0), (3.5, 4.5), (4.5, 4.0), (6.0, 3.5))[sev]
    h, w = img.shape[:2]
    fields = []
    for _ in range(2):
        d = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, (h, w)), sigma)
        peak = np.abs(d).max()
        fields.append(d * (amp / peak) if peak > 0 else d)
    dy, dx = fields
    ys, xs = np.mgrid[0:h, 0:w]
    coords = [ys + dy, xs + dx]
    out = np.empty_like(img)
    for c in range(3):
        out[:, :, c] = ndimage.map_coordinates(img[:, :, c], coords, order=1, mode="reflect")
    return out


def _pixelate(img, sev, rng):
    f = (0.75, 0.55, 0.35, 0.28, 0.22)[sev]
    h, w = img.shape[:2]
    sh, sw = max(1, int(round(h * f))), max(1, int(round(w * f)))
    small = resize_bilinear(img, sh, sw)
    ys = np.minimum((np.arange(h) * sh) // h, sh - 1)
    xs = np.minimum((np.arange(w) * sw) // w, sw - 1)
    return small[ys[:, None], xs[None, :]]


def _block_codec(img, sev, rng):
    q = (1.0, 2.0, 9.0, 15.0, 24.0)[sev]
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    x = img * 255.0 - 128.0
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    hh, ww = x.shape[:2]
    u = np.arange(8, dtype=np.float32)
    qtable = 1.0 + (u[:, None] + u[None, :] + 1.0) * q
    blocks = x.transpose(2, 0, 1).reshape(3, hh // 8, 8, ww // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = dctn(blocks, axes=(3, 4), norm="ortho")
    coef = np.round(coef / qtable) * qtable
    rec = idctn(coef, axes=(3, 4), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(3, hh, ww).transpose(1, 2, 0)
    return (rec[:h, :w] + 128.0) / 255.0


_TRANSFORMS = {
    "gaussian-noise": _gaussian_noise,
    "shot-noise": _shot_noise,
    "impulse-noise": _impulse_noise,
    "defocus-blur": _defocus_blur,
    "glass-blur": _glass_blur,
    "motion-blur": _motion_blur,
    "zoom-blur": _zoom_blur,
    "snow": _snow,
    "frost": _frost,
    "fog": _fog,
    "brightness": _brightness,
    "contrast": _contrast,
    "elastic": _elastic,
    "pixelate": _pixelate,
    "block-codec": _block_codec,
}

assert set(_TRANSFORMS) == set(CORRUPTION_KINDS) and len(CORRUPTION_KINDS) == 15


def apply_corruption(img: np.ndarray, kind: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a uint8 H x W x 3 image; dimensions are preserved.

    Deterministic given (img, kind, severity, rng state). Kinds that need
    no randomness still accept the generator for a uniform signature.
    """
    if kind not in _TRANSFORMS:
        raise ValueError(f"unknown corruption kind '{kind}'")
    if severity not in (1, 2, 3, 4, 5):
        raise ValueError(f"severity {severity} outside 1..5")
    if img.size == 0:
        raise ValueError("empty image")
    out = _TRANSFORMS[kind](to_float(img), severity - 1, rng)
    return to_uint8(out)


def downscale(img: np.ndarray, ratio: float) -> np.ndarray:
    """Shrink by `ratio`: output dims round(dim * ratio), floor 1, bilinear."""
    if not ratio > 0:
        raise ValueError(f"downscale ratio must be positive, got {ratio}")
    if ratio > 1:
        raise ValueError(f"downscale ratio must be <= 1, got {ratio}")
    h, w = img.shape[:2]
    oh, ow = max(1, int(round(h * ratio))), max(1, int(round(w * ratio)))
    if (oh, ow) == (h, w):
        return img.copy()
    return to_uint8(resize_bilinear(to_float(img), oh, ow))


def _child_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_diversify(
    img: np.ndarray, rng: np.random.Generator, rescale: bool = True
) -> tuple[np.ndarray, DiversifyDraw]:
    """Draw kind (uniform over 15), severity (uniform 1..5) and downscale
    ratio (uniform [0.6, 1.0]), apply corruption then downscale, and return
    the image with the replayable draw record.

    `rescale=False` (the corruption-only training mode) still consumes the
    ratio draw, so the corruption stream is identical either way, but pins
    the recorded ratio to 1.0 and skips the downscale.
    """
    seed = int(rng.integers(0, 2**64, dtype=np.uint64))
    child = _child_generator(seed)
    kind = CORRUPTION_KINDS[int(child.integers(0, len(CORRUPTION_KINDS)))]
    severity = int(child.integers(1, 6))
    lo, hi = SCALE_RATIO_RANGE
    ratio = float(lo + (hi - lo) * child.random()) if rescale else 1.0
    out = apply_corruption(img, kind, severity, child)
    out = downscale(out, ratio)
    return out, DiversifyDraw(kind=kind, severity=severity, scale_ratio=ratio, seed=seed)


def replay_diversify(img: np.ndarray, draw: DiversifyDraw) -> np.ndarray:
    """Reproduce the exact image of a recorded draw from its seed."""
    child = _child_generator(draw.seed)
    child.integers(0, len(CORRUPTION_KINDS))
    child.integers(1, 6)
    child.random()
    out = apply_corruption(img, draw.kind, draw.severity, child)
    return downscale(out, draw.scale_ratio)
