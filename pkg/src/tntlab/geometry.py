"""Coordinate transforms on event streams.

All transforms act on (x, y) only; timestamps and polarities pass through.
``apply_tnt`` expects timestamps already scaled to [0, B-1] (see
``events.normalize_timestamps``) and divides pixel positions by time, which
turns a constant-flow shear into a pure translation by the flow vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import EventStream

DEFAULT_T_FLOOR = 0.5
DEFAULT_BINS = 9


@dataclass(frozen=True)
class FlowVector:
    """Constant optical flow, pixels per unit (normalized) time."""

    vx: float
    vy: float

    def __post_init__(self):
        if not (math.isfinite(self.vx) and math.isfinite(self.vy)):
            raise ValueError(f"flow components must be finite: ({self.vx}, {self.vy})")

    def __add__(self, other: "FlowVector") -> "FlowVector":
        return FlowVector(self.vx + other.vx, self.vy + other.vy)

    def __neg__(self) -> "FlowVector":
        return FlowVector(-self.vx, -self.vy)

    def __iter__(self):
        yield self.vx
        yield self.vy

    @property
    def magnitude(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class Landmark:
    lx: float
    ly: float

    def __post_init__(self):
        if not (math.isfinite(self.lx) and math.isfinite(self.ly)):
            raise ValueError(f"landmark must be finite: ({self.lx}, {self.ly})")

    def __iter__(self):
        yield self.lx
        yield self.ly

    def offset(self, dx: float, dy: float) -> "Landmark":
        return Landmark(self.lx + dx, self.ly + dy)


@dataclass(frozen=True)
class ClipBounds:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bounds must be at least 1x1, got {self.width}x{self.height}")


def _xy(v) -> tuple[float, float]:
    a, b = v
    return float(a), float(b)


def apply_shear(stream: EventStream, v) -> EventStream:
    """Constant-flow motion: (x, y, t) -> (x + vx*t, y + vy*t, t)."""
    vx, vy = _xy(v)
    return stream.replace(x=stream.x + vx * stream.t, y=stream.y + vy * stream.t)


def apply_tnt(stream: EventStream, t_floor: float = DEFAULT_T_FLOOR) -> tuple[EventStream, int]:
    """Temporal normalization transform (x, y, t) -> (x/t, y/t, t).

    Events with t < t_floor are dropped.  Returns the transformed stream and
    the number of dropped events.
    """
    if t_floor <= 0:
        raise ValueError("t_floor must be positive")
    keep = stream.t >= t_floor
    kept = stream.select(keep)
    out = kept.replace(x=kept.x / kept.t, y=kept.y / kept.t)
    return out, int(len(stream) - len(kept))


def translate(stream: EventStream, k) -> EventStream:
    kx, ky = _xy(k)
    return stream.replace(x=stream.x + kx, y=stream.y + ky)


def center_events(stream: EventStream, landmark) -> EventStream:
    lx, ly = _xy(landmark)
    return translate(stream, (-lx, -ly))


def recanonicalize(stream: EventStream, bounds: ClipBounds) -> tuple[EventStream, float]:
    """Move the transform origin to the canvas center and clip to [0,W)x[0,H).

    Returns the clipped stream (with sensor size set to the bounds) and the
    fraction of events dropped.
    """
    shifted = translate(stream, (bounds.width / 2, bounds.height / 2)).replace(
        width=bounds.width, height=bounds.height
    )
    keep = shifted.in_bounds()
    out = shifted.select(keep)
    frac = 0.0 if len(stream) == 0 else float(1.0 - keep.mean())
    return out, frac


def scale_and_clip(stream: EventStream, bounds: ClipBounds, landmark,
                   t_floor: float = DEFAULT_T_FLOOR) -> tuple[EventStream, dict]:
    """center -> TNT -> recanonicalize, for a stream already scaled to [0, B-1]."""
    tnt, n_floor = apply_tnt(center_events(stream, landmark), t_floor)
    out, frac = recanonicalize(tnt, bounds)
    return out, {"dropped_below_floor": n_floor, "clipped_fraction": frac}
