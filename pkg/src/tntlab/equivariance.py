"""Numerical checks of how shear, TNT and landmark centering interact with convolution.

Streams handed to these functions live in landmark-centered coordinates
(origin at the object's landmark) with timestamps on [0, B-1].  Both the raw
and the TNT path go through ``recanonicalize`` so that the origin lands at
the canvas center; the raw path is therefore the raw volume of the same
object, just placed on the canvas.

Residuals are relative Frobenius norms, ||a - b|| / max(||a||, ||b||), over an
interior mask that excludes a spatial border of (kernel radius + |v| + 1)
cells.  The extra cell is the support of the linear insertion kernel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import UnreliableMeasurementError
from .events import EventStream
from .geometry import ClipBounds, apply_shear, apply_tnt, center_events, recanonicalize, translate
from .voxel import VolumeSpec, build_volume

EPS_DIV = 1e-12
MAX_CLIPPED = 0.5


@dataclass
class EquivarianceReport:
    residual_raw: float
    residual_tnt: float
    ratio: float
    interior_mask_fraction: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def interior_mask(shape, border: int) -> np.ndarray:
    """Boolean (B, H, W) mask that is False within ``border`` cells of the spatial edges."""
    mask = np.zeros(shape, dtype=bool)
    B, H, W = shape
    if 2 * border < H and 2 * border < W:
        mask[:, border:H - border, border:W - border] = True
    return mask


def relative_residual(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    da, db = a[mask], b[mask]
    scale = max(np.linalg.norm(da), np.linalg.norm(db))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(da - db) / scale)


def shift_grid(a: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """out[..., y, x] = a[..., y - dy, x - dx], bilinear for fractional shifts, zero outside."""
    H, W = a.shape[-2:]
    ix, fx = divmod(dx, 1.0)
    iy, fy = divmod(dy, 1.0)
    out = np.zeros_like(a)
    for ox, wx in ((int(ix), 1 - fx), (int(ix) + 1, fx)):
        for oy, wy in ((int(iy), 1 - fy), (int(iy) + 1, fy)):
            w = wx * wy
            if w == 0:
                continue
            src_y = slice(max(0, -oy), min(H, H - oy))
            src_x = slice(max(0, -ox), min(W, W - ox))
            dst_y = slice(max(0, oy), min(H, H + oy))
            dst_x = slice(max(0, ox), min(W, W + ox))
            if src_y.start >= src_y.stop or src_x.start >= src_x.stop:
                continue
            out[..., dst_y, dst_x] += w * a[..., src_y, src_x]
    return out


def shear_grid(a: np.ndarray, v) -> np.ndarray:
    """Apply the flow shear to a (B, H, W) grid: time slice b is translated by v*b."""
    vx, vy = v
    return np.stack([shift_grid(a[b], vx * b, vy * b) for b in range(a.shape[0])])


def activation(volume: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 3D correlation of a (B, H, W) volume with an odd-sized (kb, kh, kw) kernel."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 3 or any(s % 2 == 0 for s in k.shape):
        raise ValueError(f"kernel must be 3D with odd sizes, got {k.shape}")
    kb, kh, kw = k.shape
    B, H, W = volume.shape
    vp = np.pad(volume, ((kb // 2,) * 2, (kh // 2,) * 2, (kw // 2,) * 2))
    # accumulate tap by tap: memory stays O(volume) even for wide kernels
    out = np.zeros((B, H, W))
    for i, j, l in zip(*np.nonzero(k)):
        out += k[i, j, l] * vp[i:i + B, j:j + H, l:l + W]
    return out


def _border(kernel: np.ndarray, v) -> int:
    r = max(np.asarray(kernel).shape[1:]) // 2
    return int(r + math.ceil(max(abs(v[0]), abs(v[1]))) + 1)


def _place(stream: EventStream, spec: VolumeSpec):
    out, frac = recanonicalize(stream, ClipBounds(spec.W, spec.H))
    if frac > MAX_CLIPPED:
        raise UnreliableMeasurementError(f"{frac:.0%} of events fall outside the {spec.W}x{spec.H} canvas")
    return build_volume(out, spec).data


def _tnt_volume(stream: EventStream, spec: VolumeSpec, t_floor: float):
    tnt, _ = apply_tnt(stream, t_floor)
    return _place(tnt, spec)


def shear_noncommutation_residual(stream: EventStream, v, kernel, spec: VolumeSpec,
                                  mask_border: Optional[int] = None) -> float:
    """|| conv(vol(shear(s))) - shear(conv(vol(s))) || on the interior mask."""
    kernel = np.asarray(kernel, dtype=np.float64)
    a_sheared = activation(_place(apply_shear(stream, v), spec), kernel)
    a_ref = shear_grid(activation(_place(stream, spec), kernel), v)
    border = _border(kernel, v) if mask_border is None else mask_border
    return relative_residual(a_sheared, a_ref, interior_mask(a_ref.shape, border))


def tnt_equivariance_residual(stream: EventStream, v, kernel, spec: VolumeSpec,
                              t_floor: float = 0.5) -> EquivarianceReport:
    """Compare conv(vol(TNT(shear(s)))) with the TNT activation translated by v.

    Integer flows translate the grid exactly; fractional flows use bilinear
    translation of the activation and so carry interpolation error.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    vx, vy = (float(c) for c in v)
    a_moved = activation(_tnt_volume(apply_shear(stream, (vx, vy)), spec, t_floor), kernel)
    a_ref = shift_grid(activation(_tnt_volume(stream, spec, t_floor), kernel), vx, vy)
    border = _border(kernel, (vx, vy))
    mask = interior_mask(a_ref.shape, border)
    r_tnt = relative_residual(a_moved, a_ref, mask)
    r_raw = shear_noncommutation_residual(stream, (vx, vy), kernel, spec, border)
    return EquivarianceReport(
        residual_raw=r_raw,
        residual_tnt=r_tnt,
        ratio=r_raw / max(r_tnt, EPS_DIV),
        interior_mask_fraction=float(mask.mean()),
        config={"vx": vx, "vy": vy, "B": spec.B, "H": spec.H, "W": spec.W,
                "t_floor": t_floor, "n_events": len(stream), "border": border},
    )


def pipeline_features(stream: EventStream, landmark, kernel, spec: VolumeSpec, t_floor: float = 0.5) -> np.ndarray:
    """conv o voxelize o recanonicalize o TNT o center."""
    return activation(_tnt_volume(center_events(stream, landmark), spec, t_floor), np.asarray(kernel, dtype=np.float64))


def translation_invariance_residual(stream: EventStream, s_offset, c, kernel, spec: VolumeSpec,
                                    t_floor: float = 0.5) -> float:
    """Feature change when events and landmark move together by ``s_offset``."""
    sx, sy = (float(a) for a in s_offset)
    cx, cy = (float(a) for a in c)
    f_moved = pipeline_features(translate(stream, (sx, sy)), (cx + sx, cy + sy), kernel, spec, t_floor)
    f_ref = pipeline_features(stream, (cx, cy), kernel, spec, t_floor)
    mask = interior_mask(f_ref.shape, _border(kernel, (0, 0)))
    return relative_residual(f_moved, f_ref, mask)


# --- coordinate identities -----------------------------------------------------------

def _random_events(rng: np.random.Generator, n: int, B: int, t_floor: float, extent: float = 100.0) -> EventStream:
    # timestamps at or above the floor so no event is dropped by TNT
    t = np.sort(rng.uniform(t_floor, B - 1, n))
    return EventStream(rng.uniform(-extent, extent, n), rng.uniform(-extent, extent, n), t,
                       rng.choice(np.array([-1, 1], dtype=np.int8), n), 0, 0)


def shear_tnt_identity_error(n_cases: int = 10_000, seed: int = 0, B: int = 9, t_floor: float = 0.5,
                             group: int = 100) -> float:
    """max |TNT(shear(e, v)) - translate(TNT(e), v)| over random (event, flow) pairs.

    Events come in groups of ``group`` sharing one random flow.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for start in range(0, n_cases, group):
        s = _random_events(rng, min(group, n_cases - start), B, t_floor)
        v = tuple(rng.uniform(-10, 10, 2))
        lhs, _ = apply_tnt(apply_shear(s, v), t_floor)
        rhs, _ = apply_tnt(s, t_floor)
        rhs = translate(rhs, v)
        worst = max(worst, np.abs(lhs.x - rhs.x).max(), np.abs(lhs.y - rhs.y).max(), np.abs(lhs.t - rhs.t).max())
    return float(worst)


def centering_invariance_error(n_cases: int = 10_000, seed: int = 0, B: int = 9, t_floor: float = 0.5,
                               group: int = 100) -> float:
    """max |TNT(center(translate(e, s), c + s)) - TNT(center(e, c))| over random (event, offset, landmark)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for start in range(0, n_cases, group):
        e = _random_events(rng, min(group, n_cases - start), B, t_floor)
        off = rng.uniform(-50, 50, 2)
        c = rng.uniform(-50, 50, 2)
        lhs, _ = apply_tnt(center_events(translate(e, off), c + off), t_floor)
        rhs, _ = apply_tnt(center_events(e, c), t_floor)
        worst = max(worst, np.abs(lhs.x - rhs.x).max(), np.abs(lhs.y - rhs.y).max())
    return float(worst)


# --- random trials -----------------------------------------------------------------

def random_sparse_stream(rng: np.random.Generator, n_events: int, spec: VolumeSpec,
                         extent: float = 6.0, base_flow: float = 1.0) -> EventStream:
    """Landmark-centered events from points within +-extent px moving with a random base flow."""
    t = np.sort(rng.uniform(0, spec.B - 1, n_events))
    x0 = rng.uniform(-extent, extent, (n_events, 2))
    u = rng.uniform(-base_flow, base_flow, 2)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), n_events)
    return EventStream(x0[:, 0] + u[0] * t, x0[:, 1] + u[1] * t, t, p, spec.W, spec.H)


def integer_flows(magnitudes=(1, 2, 3)) -> list:
    out = []
    for m in magnitudes:
        out += [(m, 0), (-m, 0), (0, m), (0, -m)]
    return out


def run_trials(n_trials: int = 100, seed: int = 0, spec: VolumeSpec = VolumeSpec(9, 64, 64),
               magnitudes=(1, 2, 3), events=(50, 500), t_floor: float = 0.5) -> list:
    """Random sparse stream, integer flow and 3x3x3 kernel per trial; one report each."""
    flows = integer_flows(magnitudes)
    reports = []
    for i in range(n_trials):
        rng = np.random.default_rng([seed, i])
        n = int(rng.integers(events[0], events[1] + 1))
        stream = random_sparse_stream(rng, n, spec)
        v = flows[int(rng.integers(len(flows)))]
        kernel = rng.normal(size=(3, 3, 3))
        rep = tnt_equivariance_residual(stream, v, kernel, spec, t_floor)
        rep.config["seed"] = seed
        rep.config["trial"] = i
        reports.append(rep)
    return reports


def gaussian_kernel(rng: np.random.Generator, scale: int, sigma: float = 1.0, radius: float = 2.0) -> np.ndarray:
    """Smooth kernel defined in physical pixels, sampled at 1/scale spacing; 3 random time taps."""
    r = int(round(radius * scale))
    g = np.arange(-r, r + 1) / scale
    spatial = np.exp(-(g[:, None] ** 2 + g[None, :] ** 2) / (2 * sigma ** 2))
    taps = rng.normal(size=3)
    return taps[:, None, None] * spatial[None]


def refinement_residuals(stream: EventStream, v, spec: VolumeSpec, scales=(1, 2, 4), seed: int = 0,
                         t_floor: float = 0.5) -> list:
    """TNT residual for a fractional flow as the spatial grid is refined.

    At scale s coordinates, flow and canvas are multiplied by s and the kernel
    keeps its physical footprint.
    """
    out = []
    for s in scales:
        k = gaussian_kernel(np.random.default_rng(seed), s)
        sp = VolumeSpec(spec.B, spec.H * s, spec.W * s, spec.polarity_mode)
        scaled = stream.replace(x=stream.x * s, y=stream.y * s, width=sp.W, height=sp.H)
        rep = tnt_equivariance_residual(scaled, (v[0] * s, v[1] * s), k, sp, t_floor)
        out.append(rep.residual_tnt)
    return out


def write_reports(reports, json_path=None, csv_path=None, extra: Optional[dict] = None) -> None:
    """One JSON record per line, and a CSV summary (seed, vx, vy, residual_raw, residual_tnt, ratio)."""
    extra = extra or {}
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as f:
            for r in reports:
                f.write(json.dumps({**r.to_dict(), **extra}, sort_keys=True) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            if "config_hash" in extra:
                f.write(f"# config_hash={extra['config_hash']}\n")
            w = csv.writer(f)
            w.writerow(["seed", "vx", "vy", "residual_raw", "residual_tnt", "ratio"])
            for r in reports:
                c = r.config
                w.writerow([c.get("seed", ""), c["vx"], c["vy"], repr(r.residual_raw), repr(r.residual_tnt),
                            repr(r.ratio)])
