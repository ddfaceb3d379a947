"""Event data model, validation, codecs and timestamp normalization.

Streams are stored column-wise (one numpy array per field) so that every
transform downstream can be vectorized.  Polarity is always kept as
-1/+1; files that use 0/1 are remapped at the codec boundary.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .errors import (
    CorruptRecordError,
    DegenerateDurationError,
    EmptyStreamError,
    EncodeRangeError,
    InvalidEventError,
    MalformedStreamError,
)

logger = logging.getLogger(__name__)

AER_RECORD_BYTES = 5
AER_MAX_TIMESTAMP = 1 << 23
NMNIST_SIZE = 34


class Event(NamedTuple):
    x: float
    y: float
    t: float
    p: int


@dataclass(eq=False)
class EventStream:
    """Column-wise container for a set of events on a W x H sensor."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int8).reshape(-1)
        n = self.x.size
        if not (self.y.size == self.t.size == self.p.size == n):
            raise MalformedStreamError(
                f"column lengths differ: x={n} y={self.y.size} t={self.t.size} p={self.p.size}"
            )
        self.width = int(self.width)
        self.height = int(self.height)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(np.empty(0), np.empty(0), np.empty(0), np.empty(0, np.int8), width, height)

    @classmethod
    def from_events(cls, events: Iterable, width: int, height: int) -> "EventStream":
        rows = [tuple(e) for e in events]
        if not rows:
            return cls.empty(width, height)
        x, y, t, p = (np.array(col) for col in zip(*rows))
        return cls(x, y, t, p, width, height)

    def __len__(self) -> int:
        return int(self.x.size)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x, self.y, self.t, self.p):
            yield Event(float(x), float(y), float(t), int(p))

    def __getitem__(self, index) -> Event:
        return Event(float(self.x[index]), float(self.y[index]), float(self.t[index]), int(self.p[index]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    def replace(self, **columns) -> "EventStream":
        fields = dict(x=self.x, y=self.y, t=self.t, p=self.p, width=self.width, height=self.height)
        fields.update(columns)
        return EventStream(**fields)

    def select(self, mask) -> "EventStream":
        return EventStream(self.x[mask], self.y[mask], self.t[mask], self.p[mask], self.width, self.height)

    def in_bounds(self) -> np.ndarray:
        return (self.x >= 0) & (self.x < self.width) & (self.y >= 0) & (self.y < self.height)

    def concatenate(self, other: "EventStream") -> "EventStream":
        return EventStream(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.t, other.t]),
            np.concatenate([self.p, other.p]),
            self.width,
            self.height,
        )


@dataclass(frozen=True)
class TimeNormalization:
    """Affine map of raw timestamps onto [0, B-1]."""

    t1: float
    tN: float
    B: int

    def __post_init__(self):
        if not self.tN > self.t1:
            raise DegenerateDurationError(f"tN ({self.tN}) must exceed t1 ({self.t1})")
        if self.B < 2:
            raise ValueError(f"B must be >= 2, got {self.B}")

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return (self.B - 1) * (np.asarray(t, dtype=np.float64) - self.t1) / (self.tN - self.t1)


def normalize_timestamps(stream: EventStream, B: int) -> EventStream:
    """Rescale timestamps so the first event lands at 0 and the last at B-1."""
    if len(stream) == 0:
        raise EmptyStreamError("cannot normalize an empty stream")
    if np.any(np.diff(stream.t) < 0):
        raise InvalidEventError("stream must be sorted by timestamp; call validate() first")
    t1, tN = float(stream.t[0]), float(stream.t[-1])
    if tN == t1:
        raise DegenerateDurationError(f"all {len(stream)} events share timestamp {t1}")
    norm = TimeNormalization(t1, tN, B)
    t = norm(stream.t)
    # pin the endpoints against rounding
    t[0] = 0.0
    t[-1] = B - 1
    return stream.replace(t=t)


def validate(stream: EventStream) -> EventStream:
    """Sort by time (stable), remap {0,1} polarities and reject non-finite values.

    The number of events outside the sensor is logged, not treated as an error,
    because transformed streams legitimately leave the sensor until clipped.
    """
    for name in ("x", "y", "t"):
        col = getattr(stream, name)
        bad = ~np.isfinite(col)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise InvalidEventError(f"event {idx}: non-finite {name}={col[idx]}")
    p = stream.p.astype(np.int8)
    if np.isin(p, (0, 1)).all() and (p == 0).any():
        p = np.where(p == 0, -1, 1).astype(np.int8)
    if not np.isin(p, (-1, 1)).all():
        idx = int(np.flatnonzero(~np.isin(p, (-1, 1)))[0])
        raise InvalidEventError(f"event {idx}: polarity {p[idx]} not in {{-1, +1}}")
    order = np.argsort(stream.t, kind="stable")
    out = EventStream(stream.x[order], stream.y[order], stream.t[order], p[order], stream.width, stream.height)
    n_out = int((~out.in_bounds()).sum())
    if n_out:
        logger.info("%d of %d events lie outside the %dx%d sensor", n_out, len(out), out.width, out.height)
    return out


def count_out_of_bounds(stream: EventStream) -> int:
    return int((~stream.in_bounds()).sum())


# --- AER binary codec -------------------------------------------------------

def decode_aer(data: bytes, width: int = NMNIST_SIZE, height: int = NMNIST_SIZE) -> EventStream:
    """Decode 5-byte ATIS/N-MNIST address-event records.

    Layout per record: x, y, then a 24-bit big-endian word whose top bit is the
    polarity (1 -> +1, 0 -> -1) and whose low 23 bits are the timestamp in us.
    """
    if len(data) % AER_RECORD_BYTES:
        raise MalformedStreamError(f"byte length {len(data)} is not a multiple of {AER_RECORD_BYTES}")
    rec = np.frombuffer(bytes(data), dtype=np.uint8).reshape(-1, AER_RECORD_BYTES)
    x = rec[:, 0].astype(np.int64)
    y = rec[:, 1].astype(np.int64)
    p = np.where(rec[:, 2] >> 7, 1, -1).astype(np.int8)
    t = ((rec[:, 2].astype(np.int64) & 0x7F) << 16) | (rec[:, 3].astype(np.int64) << 8) | rec[:, 4]
    bad = (x >= width) | (y >= height)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise CorruptRecordError(idx, f"coordinate ({x[idx]}, {y[idx]}) outside {width}x{height} sensor")
    return EventStream(x, y, t, p, width, height)


def encode_aer(stream: EventStream) -> bytes:
    if len(stream) == 0:
        return b""
    for name, hi in (("x", 256), ("y", 256), ("t", AER_MAX_TIMESTAMP)):
        col = getattr(stream, name)
        bad = ~np.isfinite(col) | (col < 0) | (col >= hi) | (col != np.floor(col))
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise EncodeRangeError(f"event {idx}: {name}={col[idx]} not an integer in [0, {hi})")
    if not np.isin(stream.p, (-1, 1)).all():
        raise EncodeRangeError("polarities must be -1 or +1")
    t = stream.t.astype(np.int64)
    rec = np.empty((len(stream), AER_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = stream.x.astype(np.uint8)
    rec[:, 1] = stream.y.astype(np.uint8)
    rec[:, 2] = ((t >> 16) & 0x7F) | np.where(stream.p > 0, 0x80, 0)
    rec[:, 3] = (t >> 8) & 0xFF
    rec[:, 4] = t & 0xFF
    return rec.tobytes()


def read_aer(path, width: int = NMNIST_SIZE, height: int = NMNIST_SIZE) -> EventStream:
    return decode_aer(Path(path).read_bytes(), width, height)


# --- text codec ---------------------------------------------------------------

TEXT_HEADER = "x,y,t,p"


def _fmt(v: float) -> str:
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def encode_text(stream: EventStream, header: bool = True) -> str:
    buf = io.StringIO()
    if header:
        buf.write(TEXT_HEADER + "\n")
    for x, y, t, p in zip(stream.x, stream.y, stream.t, stream.p):
        buf.write(f"{_fmt(x)},{_fmt(y)},{_fmt(t)},{int(p)}\n")
    return buf.getvalue()


def decode_text(text: str, width: int, height: int) -> EventStream:
    """Parse "x,y,t_us,p" lines; a leading "x,y,t,p" header is optional."""
    xs, ys, ts, ps = [], [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.replace(" ", "") == TEXT_HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise MalformedStreamError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            x, y, t = (float(v) for v in parts[:3])
            p = int(parts[3])
        except ValueError as exc:
            raise MalformedStreamError(f"line {lineno}: {exc}") from None
        if p not in (-1, 1):
            raise MalformedStreamError(f"line {lineno}: polarity {p} not in {{-1, 1}}")
        if not all(math.isfinite(v) for v in (x, y, t)):
            raise InvalidEventError(f"line {lineno}: non-finite value")
        xs.append(x)
        ys.append(y)
        ts.append(t)
        ps.append(p)
    return EventStream(np.array(xs), np.array(ys), np.array(ts), np.array(ps, dtype=np.int8), width, height)


def write_text(stream: EventStream, path) -> None:
    Path(path).write_text(encode_text(stream), encoding="utf-8")


def read_text(path, width: int, height: int) -> EventStream:
    return decode_text(Path(path).read_text(encoding="utf-8"), width, height)
