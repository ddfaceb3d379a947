"""Discretized event volume with linear (triangular kernel) insertion.

V[b, y, x] = sum_i p_i k(x - x_i) k(y - y_i) k(b - t_i),  k(a) = max(0, 1 - |a|)

Each event touches at most the 8 lattice cells around it.  Cells outside the
grid are simply skipped (no renormalization).  Because the kernel is
piecewise linear the volume is differentiable in the event coordinates;
``volume_coordinate_gradients`` returns d<U, V>/dx_i and d<U, V>/dy_i for an
arbitrary upstream weighting U.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidEventError, MalformedStreamError, ShapeError
from .events import EventStream

SIGNED = "signed"
TWO_CHANNEL = "two-channel"

VOLUME_MAGIC = b"EVOL"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class VolumeSpec:
    B: int = 9
    H: int = 34
    W: int = 34
    polarity_mode: str = SIGNED

    def __post_init__(self):
        if self.B < 2 or self.H < 1 or self.W < 1:
            raise ValueError(f"invalid volume size B={self.B} H={self.H} W={self.W}")
        if self.polarity_mode not in (SIGNED, TWO_CHANNEL):
            raise ValueError(f"unknown polarity mode {self.polarity_mode!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        base = (self.B, self.H, self.W)
        return (2,) + base if self.polarity_mode == TWO_CHANNEL else base


@dataclass
class EventVolume:
    data: np.ndarray
    spec: VolumeSpec

    def __post_init__(self):
        if self.data.shape != self.spec.shape:
            raise ShapeError(f"volume data {self.data.shape} does not match spec {self.spec.shape}")


@dataclass
class CoordinateGradient:
    dx: np.ndarray
    dy: np.ndarray


def _corners(stream: EventStream, spec: VolumeSpec):
    """Yield (flat index, weight, dweight/dx, dweight/dy, valid) for each of the 8 corners.

    Kink convention: the kernel derivative is 0 where |a| is 0 or 1, so an
    on-lattice coordinate has zero gradient along that axis.
    """
    for name in ("x", "y", "t"):
        col = getattr(stream, name)
        if not np.isfinite(col).all():
            idx = int(np.flatnonzero(~np.isfinite(col))[0])
            raise InvalidEventError(f"event {idx}: non-finite {name}")
    x0 = np.floor(stream.x)
    y0 = np.floor(stream.y)
    t0 = np.floor(stream.t)
    fx, fy, ft = stream.x - x0, stream.y - y0, stream.t - t0
    x0, y0, t0 = x0.astype(np.int64), y0.astype(np.int64), t0.astype(np.int64)
    # derivative of the low-corner weight (1 - f) is -1, high-corner weight f is +1,
    # except at the kink f == 0 where both are taken as 0
    sx = (fx > 0).astype(np.float64)
    sy = (fy > 0).astype(np.float64)
    for dt in (0, 1):
        tb = t0 + dt
        wt = ft if dt else 1.0 - ft
        vt = (tb >= 0) & (tb < spec.B)
        for dy in (0, 1):
            yb = y0 + dy
            wy = fy if dy else 1.0 - fy
            gy = sy if dy else -sy
            vy = (yb >= 0) & (yb < spec.H)
            for dx in (0, 1):
                xb = x0 + dx
                wx = fx if dx else 1.0 - fx
                gx = sx if dx else -sx
                valid = vt & vy & (xb >= 0) & (xb < spec.W)
                flat = (tb * spec.H + yb) * spec.W + xb
                yield flat, wt * wy * wx, wt * wy * gx, wt * gy * wx, valid


def _channels(stream: EventStream, spec: VolumeSpec):
    """(channel offset into the flat volume, per-event weight) pairs."""
    p = stream.p.astype(np.float64)
    if spec.polarity_mode == SIGNED:
        return [(0, p)]
    n = spec.B * spec.H * spec.W
    return [(0, (p > 0).astype(np.float64)), (n, (p < 0).astype(np.float64))]


def build_volume(stream: EventStream, spec: VolumeSpec) -> EventVolume:
    """Insert events (timestamps already on [0, B-1]) into a dense grid."""
    size = int(np.prod(spec.shape))
    flat_out = np.zeros(size, dtype=np.float64)
    if len(stream):
        chans = _channels(stream, spec)
        idx_parts, w_parts = [], []
        for flat, w, _, _, valid in _corners(stream, spec):
            for offset, pw in chans:
                m = valid & (pw != 0)
                idx_parts.append(flat[m] + offset)
                w_parts.append((pw * w)[m])
        idx = np.concatenate(idx_parts)
        # bincount sums in a fixed order, so the result is deterministic
        flat_out += np.bincount(idx, weights=np.concatenate(w_parts), minlength=size)
    return EventVolume(flat_out.reshape(spec.shape), spec)


def volume_coordinate_gradients(stream: EventStream, spec: VolumeSpec, upstream) -> CoordinateGradient:
    """Per-event gradient of <upstream, build_volume(stream)> w.r.t. x_i and y_i."""
    u = np.asarray(upstream.data if isinstance(upstream, EventVolume) else upstream, dtype=np.float64)
    if u.shape != spec.shape:
        raise ShapeError(f"upstream {u.shape} does not match volume {spec.shape}")
    u = u.reshape(-1)
    gx = np.zeros(len(stream))
    gy = np.zeros(len(stream))
    if len(stream) == 0:
        return CoordinateGradient(gx, gy)
    chans = _channels(stream, spec)
    for flat, _, wgx, wgy, valid in _corners(stream, spec):
        safe = np.where(valid, flat, 0)
        for offset, pw in chans:
            uc = np.where(valid, u[safe + offset], 0.0) * pw
            gx += uc * wgx
            gy += uc * wgy
    return CoordinateGradient(gx, gy)


def encode_volume(volume: EventVolume) -> bytes:
    """EVOL header (magic, u32 B, H, W, little-endian) then float32 data.

    Two-channel volumes are written with the same header; the payload is
    twice as long and the reader infers the channel count from its length.
    """
    spec = volume.spec
    header = _HEADER.pack(VOLUME_MAGIC, spec.B, spec.H, spec.W)
    return header + volume.data.astype("<f4").tobytes()


def decode_volume(data: bytes) -> EventVolume:
    if len(data) < _HEADER.size:
        raise MalformedStreamError("volume shorter than its header")
    magic, B, H, W = _HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise MalformedStreamError(f"bad volume magic {magic!r}")
    payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    n = B * H * W
    if payload.size == n:
        spec = VolumeSpec(B, H, W, SIGNED)
    elif payload.size == 2 * n:
        spec = VolumeSpec(B, H, W, TWO_CHANNEL)
    else:
        raise MalformedStreamError(f"payload of {payload.size} floats does not fit {B}x{H}x{W}")
    return EventVolume(payload.astype(np.float64).reshape(spec.shape), spec)


def save_volume(volume: EventVolume, path) -> None:
    Path(path).write_bytes(encode_volume(volume))


def load_volume(path) -> EventVolume:
    return decode_volume(Path(path).read_bytes())
