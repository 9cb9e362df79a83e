"""Frequency-domain softness scoring for 2-D images.

The score integrates squared spectral magnitude around the largest circle
that fits inside the centered DFT plane: sum over n_theta equally spaced
angles of v(theta)^2 * r * (2*pi/n_theta), where v is the bilinearly
interpolated magnitude at radius r = floor(min(H, W)/2) - 1. Smooth
(soft-kernel) images put little energy at high spatial frequency, so lower
scores mean softer. The image mean is removed before the transform; the
score is therefore exactly invariant to constant offsets and exactly zero
for constant images.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SoftnessScore:
    value: float
    radius: float
    n_theta: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("softness score cannot be negative")


def softness_score(image: np.ndarray, n_theta: int = 720) -> SoftnessScore:
    """Spectral energy on the maximal inscribed circle of the centered DFT."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ImageFormatError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    if min(h, w) < 8:
        raise ImageFormatError(f"image too small to score: {h}x{w} (min dimension 8)")
    r = min(h, w) // 2 - 1

    spectrum = np.fft.fftshift(np.fft.fft2(image - image.mean()))
    mag = np.abs(spectrum)
    cy, cx = h // 2, w // 2

    theta = np.arange(n_theta) * (2.0 * np.pi / n_theta)
    ys = cy + r * np.sin(theta)
    xs = cx + r * np.cos(theta)

    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 2)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 2)
    fy = ys - y0
    fx = xs - x0
    v = (
        mag[y0, x0] * (1 - fy) * (1 - fx)
        + mag[y0, x0 + 1] * (1 - fy) * fx
        + mag[y0 + 1, x0] * fy * (1 - fx)
        + mag[y0 + 1, x0 + 1] * fy * fx
    )
    value = float(np.sum(v * v) * r * (2.0 * np.pi / n_theta))
    return SoftnessScore(value=value, radius=float(r), n_theta=n_theta)


def select_softest(images) -> int:
    """Index of the lowest-scoring image; ties go to the lowest index."""
    images = list(images)
    if not images:
        raise ValueError("select_softest needs at least one image")
    shape = np.asarray(images[0]).shape
    best_idx, best_val = 0, None
    for i, img in enumerate(images):
        img = np.asarray(img)
        if img.shape != shape:
            raise ImageFormatError(f"image {i} has shape {img.shape}, expected {shape}")
        val = softness_score(img).value
        if best_val is None or val < best_val:
            best_idx, best_val = i, val
    return best_idx


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM (P5) reader; returns float image in [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a P5 PGM file")

    # header = magic, width, height, maxval as whitespace/comment-separated tokens
    tokens = []
    pos = 2
    while len(tokens) < 3:
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
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric PGM header fields {tokens}")
    if maxval <= 0 or maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    expected = width * height
    body = data[pos : pos + expected]
    if len(body) != expected:
        raise ImageFormatError(f"{path}: expected {expected} pixels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval
