"""Glyph images: procedural digit-like templates and PGM / IDX file readers."""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MalformedStreamError
from .flow_sim import TEST, TRAIN, Glyph, IntensityImage

# Stroke templates in a [-1, 1] box, y pointing down.  Each entry is a list of
# polylines.  Shapes are loosely digit-like; what matters is that classes
# differ in stroke layout.
def _arc(cx, cy, rx, ry, a0, a1, n=12):
    return [(cx + rx * math.cos(math.radians(a)), cy + ry * math.sin(math.radians(a)))
            for a in np.linspace(a0, a1, n)]


TEMPLATES: dict[int, list] = {
    0: [_arc(0, 0, 0.6, 0.9, 0, 360, 20)],
    1: [[(-0.3, -0.6), (0.1, -0.95), (0.1, 0.95)]],
    2: [_arc(0, -0.4, 0.6, 0.5, 180, 360) + [(-0.6, 0.95), (0.65, 0.95)]],
    3: [_arc(0, -0.45, 0.55, 0.45, 200, 450), _arc(0, 0.45, 0.6, 0.5, 270, 520)],
    4: [[(0.3, 0.95), (0.3, -0.95), (-0.65, 0.35), (0.7, 0.35)]],
    5: [[(0.6, -0.95), (-0.5, -0.95), (-0.55, -0.05)] + _arc(0, 0.4, 0.6, 0.55, 235, 500)],
    6: [[(0.4, -0.95), (-0.5, 0.2)], _arc(0, 0.4, 0.55, 0.55, 0, 360, 16)],
    7: [[(-0.65, -0.95), (0.65, -0.95), (-0.1, 0.95)]],
    8: [_arc(0, -0.5, 0.45, 0.42, 0, 360, 16), _arc(0, 0.45, 0.58, 0.5, 0, 360, 16)],
    9: [_arc(0, -0.4, 0.55, 0.55, 0, 360, 16), [(0.55, -0.4), (0.3, 0.95)]],
}


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0, 1)
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def render_strokes(polylines, size: int = 34, half_extent: float = 6.5, thickness: float = 1.6,
                   transform=None) -> np.ndarray:
    """Antialiased strokes; template box [-1,1]^2 maps to +-half_extent px around the canvas center."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.full((size, size), np.inf)
    for line in polylines:
        pts = [(c + half_extent * x, c + half_extent * y) for x, y in line]
        if transform is not None:
            pts = [transform(x, y) for x, y in pts]
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(xx, yy, a, b))
    return np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)


def procedural_glyphs(n_classes: int = 10, n_train: int = 8, n_test: int = 4, seed: int = 0,
                      size: int = 34, jitter: float = 1.0) -> list:
    """Jittered instances of the built-in templates (small rotation, scale, shear, stroke width).

    Glyphs stay centered on the canvas so the image center is a consistent landmark.
    """
    if not 2 <= n_classes <= len(TEMPLATES):
        raise ValueError(f"n_classes must be in [2, {len(TEMPLATES)}]")
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2
    out = []
    for role, count in ((TRAIN, n_train), (TEST, n_test)):
        for _ in range(count):
            for label in range(n_classes):
                rot = math.radians(rng.uniform(-8, 8) * jitter)
                scale = 1 + rng.uniform(-0.08, 0.08) * jitter
                shear = rng.uniform(-0.12, 0.12) * jitter
                thick = 1.6 + rng.uniform(-0.3, 0.3) * jitter
                cr, sr = math.cos(rot), math.sin(rot)

                def tf(x, y, cr=cr, sr=sr, scale=scale, shear=shear):
                    u, v = x - c, y - c
                    u = u + shear * v
                    return c + scale * (cr * u - sr * v), c + scale * (sr * u + cr * v)

                img = render_strokes(TEMPLATES[label], size=size, thickness=thick, transform=tf)
                out.append(Glyph(IntensityImage(img), label, role))
    return out


# --- file formats ------------------------------------------------------------------

def read_pgm(path) -> IntensityImage:
    """8-bit binary PGM (P5), scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedStreamError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise MalformedStreamError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise MalformedStreamError("only 8-bit PGM is supported")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return IntensityImage(raster.reshape(h, w) / float(maxval))


def write_pgm(image: IntensityImage, path) -> None:
    px = np.clip(np.round(image.pixels * 255), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + px.tobytes())


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx_images(path) -> list:
    """MNIST-style IDX image file (magic 0x00000803, big-endian dims, uint8 pixels)."""
    data = Path(path).read_bytes()
    magic, n, rows, cols = struct.unpack_from(">IIII", data)
    if magic != IDX_IMAGES_MAGIC:
        raise MalformedStreamError(f"bad IDX image magic 0x{magic:08x}")
    if len(data) < 16 + n * rows * cols:
        raise MalformedStreamError("truncated IDX image file")
    arr = np.frombuffer(data, np.uint8, n * rows * cols, 16).reshape(n, rows, cols)
    return [IntensityImage(a / 255.0) for a in arr]


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, n = struct.unpack_from(">II", data)
    if magic != IDX_LABELS_MAGIC:
        raise MalformedStreamError(f"bad IDX label magic 0x{magic:08x}")
    return np.frombuffer(data, np.uint8, n, 8).astype(np.int64)


def write_idx_images(images: Sequence[IntensityImage], path) -> None:
    rows, cols = images[0].height, images[0].width
    px = np.stack([np.clip(np.round(im.pixels * 255), 0, 255) for im in images]).astype(np.uint8)
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(images), rows, cols) + px.tobytes())


def pad_to(image: IntensityImage, size: int) -> IntensityImage:
    """Center an image (e.g. a 28x28 MNIST digit) on a size x size canvas."""
    h, w = image.height, image.width
    if h > size or w > size:
        raise ValueError(f"image {w}x{h} larger than canvas {size}")
    out = np.zeros((size, size))
    y0, x0 = (size - h) // 2, (size - w) // 2
    out[y0:y0 + h, x0:x0 + w] = image.pixels
    return IntensityImage(out)
