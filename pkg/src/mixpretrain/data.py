"""Datasets, image I/O, and deterministic augmentation.

The synthetic corpus draws four shape classes (disk, square, cross, stripes)
whose color, position, and foreground coverage are sampled from identical
distributions, so trivial global statistics carry little class signal and a
probe has to rely on learned structure.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .seeding import rng_for

CLASS_NAMES = ("disk", "square", "cross", "stripes")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, E, E) float32 in [0, 1]
    labels: np.ndarray | None
    edge: int
    class_names: tuple[str, ...] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


def split_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic interleaved 80/20 split by index."""
    idx = np.arange(n)
    test = idx[idx % 5 == 4]
    train = idx[idx % 5 != 4]
    return train, test


# ---------------------------------------------------------------------------
# Synthetic shapes.


def _draw_shape(label: int, edge: int, rng: np.random.Generator) -> np.ndarray:
    e = float(edge)
    ys, xs = np.mgrid[0:edge, 0:edge].astype(np.float32)

    bg = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
    while True:
        fg = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
        if np.linalg.norm(fg - bg) >= 0.45:
            break
    coverage = rng.uniform(0.06, 0.22)
    cx = rng.uniform(0.3, 0.7) * e
    cy = rng.uniform(0.3, 0.7) * e

    if label == 0:  # disk
        r = e * np.sqrt(coverage / np.pi)
        dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        alpha = np.clip(r + 0.5 - dist, 0.0, 1.0)
    elif label == 1:  # square
        half = e * np.sqrt(coverage) / 2.0
        dist = np.maximum(np.abs(xs - cx), np.abs(ys - cy))
        alpha = np.clip(half + 0.5 - dist, 0.0, 1.0)
    elif label == 2:  # cross: two centered bars spanning most of the frame
        arm = 0.8 * e / 2.0
        thick = arm - np.sqrt(max(arm * arm - coverage * e * e, 1.0))
        _in = lambda d, lim: np.clip(lim + 0.5 - np.abs(d), 0.0, 1.0)
        horiz = _in(ys - cy, thick / 2.0) * _in(xs - cx, arm)
        vert = _in(xs - cx, thick / 2.0) * _in(ys - cy, arm)
        alpha = np.clip(horiz + vert, 0.0, 1.0)
    else:  # stripes: a few parallel bars across the full frame, duty = coverage
        period = e / float(rng.integers(2, 5))
        phase = rng.uniform(0, period)
        coord = xs if rng.random() < 0.5 else ys
        frac = np.mod(coord - phase, period) / period
        alpha = np.clip(np.minimum(frac, coverage - frac) * period + 0.5, 0.0, 1.0)

    # Class-independent low-frequency shading keeps local-contrast statistics
    # from being a shortcut for any single class.
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    shade = gx * (xs / e - 0.5) + gy * (ys / e - 0.5)

    img = bg[:, None, None] * (1.0 - alpha) + fg[:, None, None] * alpha
    img = img + shade[None]
    img = img + rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(count: int, edge: int, seed: int) -> Dataset:
    """Procedural 4-class corpus; labels cycle so classes stay balanced."""
    images = np.empty((count, 3, edge, edge), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % len(CLASS_NAMES)
        images[i] = _draw_shape(label, edge, rng_for(seed, "data", i))
        labels[i] = label
    return Dataset(images, labels, edge, CLASS_NAMES)


# ---------------------------------------------------------------------------
# Binary PPM (P6) in and out.


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos:pos + 1].isspace():
            pos += 1
        elif buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_ppm(path: str) -> np.ndarray:
    """Read one binary 8-bit P6 file into a (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {magic!r})")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        max_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    raw = buf[pos:pos + need]
    if len(raw) != need:
        raise DataError(f"{path}: pixel payload truncated ({len(raw)} of {need} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary 8-bit P6."""
    c, h, w = image.shape
    if c != 3:
        raise DataError(f"PPM wants 3 channels, got {c}")
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def load_ppm(directory: str) -> Dataset:
    """Load all .ppm files from a directory, lexicographic by filename."""
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".ppm"))
    if not names:
        raise DataError(f"no .ppm files in {directory}")
    images = []
    edge = None
    for name in names:
        img = read_ppm(os.path.join(directory, name))
        if edge is None:
            edge = img.shape[1]
        if img.shape[1] != edge or img.shape[2] != edge or img.shape[1] != img.shape[2]:
            raise DataError(f"{name}: dimensions {img.shape[1:]} differ from first file ({edge}x{edge})")
        images.append(img)
    return Dataset(np.stack(images), None, edge)


# ---------------------------------------------------------------------------
# Resizing and augmentation.


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) image (half-pixel centers)."""
    c, h, w = image.shape
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def random_resized_crop_flip(
    image: np.ndarray,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.67, 1.0),
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
) -> np.ndarray:
    """Random area crop resized back to the input frame, plus random h-flip."""
    c, h, w = image.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(*scale) * area
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            oy = int(rng.integers(0, h - ch + 1))
            ox = int(rng.integers(0, w - cw + 1))
            crop = image[:, oy:oy + ch, ox:ox + cw]
            break
    else:
        crop = image
    out = bilinear_resize(crop, h, w) if crop.shape[1:] != (h, w) else crop.copy()
    if rng.random() < 0.5:
        out = out[:, :, ::-1].copy()
    return out
