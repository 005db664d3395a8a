"""Raster image helpers: binary PPM/PGM files and float resampling.

Images move through the pipeline as H x W x 3 uint8 arrays; processing
stages convert to float32 in [0, 1] and back. The bilinear resampler here
is the plain-numpy twin of the differentiable kernel (same half-pixel
convention) for code that never needs gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "read_ppm",
    "write_ppm",
    "read_pgm",
    "write_pgm",
    "to_float",
    "to_uint8",
    "resize_bilinear",
]


def write_ppm(path, img: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as binary P6."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"P6 needs an HxWx3 array, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Write an H x W uint8 array as binary P5."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"P5 needs an HxW array, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} header")
    # Header is three whitespace-separated tokens after the magic, with
    # optional '#' comment lines; a single whitespace byte ends the header.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace separating header from raster
    try:
        w, h, maxval = (int(t) for t in fields)
    except ValueError as e:
        raise ValueError(f"{path}: bad header field: {e}") from None
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * channels
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ValueError(f"{path}: expected {need} raster bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [0,1]."""
    return img.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float [0,1] -> uint8 with clipping and round-to-nearest."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _axis_coords(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float32) + np.float32(0.5)) * np.float32(n_in / n_out) - np.float32(0.5)
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of an [H,W] or [H,W,C] float array.

    Lerp form keeps constant images constant and the same-size case an
    exact identity, matching the differentiable kernel.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid output size {out_h}x{out_w}")
    h, w = img.shape[:2]
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    rows = img[y0] + fy * (img[y1] - img[y0])
    return rows[:, x0] + fx * (rows[:, x1] - rows[:, x0])
