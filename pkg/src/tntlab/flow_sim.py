"""Planar constant-flow event simulator.

A static intensity image slides across the sensor with constant optical flow
v (pixels per second): the sensor sees I(x - vx*t, y - vy*t).  Each pixel
tracks log(max(I, eps)) at substep resolution and fires an event every time
the log intensity moves a full threshold C away from its reference level,
after which the reference advances by C.  Crossing times are linearly
interpolated inside the substep.  No noise, refractory period or threshold
mismatch is modelled.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetDegeneracyError, RunawayTrajectoryError
from .events import EventStream, read_text, write_text
from .geometry import FlowVector

US_PER_S = 1e6


@dataclass(frozen=True, eq=False)
class IntensityImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ValueError(f"image must be a non-empty 2D grid, got shape {px.shape}")
        if not np.isfinite(px).all() or (px < 0).any():
            raise ValueError("image pixels must be finite and non-negative")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SimConfig:
    threshold: float = 0.2
    flow: FlowVector = FlowVector(80.0, 0.0)  # px / s
    duration: float = 0.1  # s
    intensity_floor: float = 1e-3
    substeps_per_pixel: int = 8

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.intensity_floor > 0:
            raise ValueError("intensity floor must be positive")
        if self.substeps_per_pixel < 2:
            raise ValueError("substeps_per_pixel must be >= 2")

    def with_flow(self, flow: FlowVector) -> "SimConfig":
        return SimConfig(self.threshold, flow, self.duration, self.intensity_floor, self.substeps_per_pixel)


@dataclass(frozen=True)
class DirectionSweep:
    n_directions: int = 30
    speed: float = 80.0  # px / s

    def __post_init__(self):
        if self.n_directions < 1:
            raise ValueError("n_directions must be >= 1")
        if not self.speed > 0:
            raise ValueError("speed must be positive")

    def angles_deg(self) -> list[float]:
        return [360.0 * k / self.n_directions for k in range(self.n_directions)]

    def flows(self) -> list[FlowVector]:
        out = []
        for a in self.angles_deg():
            r = math.radians(a)
            out.append(FlowVector(self.speed * math.cos(r), self.speed * math.sin(r)))
        return out


def sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at pixel-center coordinates, clamping to the border."""
    H, W = img.shape
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def simulate_constant_flow(image: IntensityImage, cfg: SimConfig) -> EventStream:
    """Events (timestamps in microseconds) for ``image`` moving with ``cfg.flow``."""
    H, W = image.height, image.width
    vx, vy = cfg.flow.vx, cfg.flow.vy
    travel = math.hypot(vx, vy) * cfg.duration
    if travel > 4 * math.hypot(W, H):
        raise RunawayTrajectoryError(
            f"trajectory of {travel:.1f} px exceeds four image diagonals ({4 * math.hypot(W, H):.1f} px)"
        )
    n_steps = max(1, math.ceil(travel * cfg.substeps_per_pixel))
    times = np.linspace(0.0, cfg.duration, n_steps + 1)
    yy, xx = np.mgrid[0:H, 0:W]
    xx = xx.ravel().astype(np.float64)
    yy = yy.ravel().astype(np.float64)
    C, eps = cfg.threshold, cfg.intensity_floor

    def log_frame(t):
        return np.log(np.maximum(sample_bilinear(image.pixels, xx - vx * t, yy - vy * t), eps))

    L_prev = log_frame(0.0)
    ref0 = L_prev.copy()
    level = np.zeros(H * W, dtype=np.int64)  # reference = ref0 + level * C
    pix_parts, t_parts, p_parts = [], [], []
    for k in range(1, n_steps + 1):
        t_prev, t_now = times[k - 1], times[k]
        L = log_frame(t_now)
        ref = ref0 + level * C
        n_cross = np.floor(np.abs(L - ref) / C).astype(np.int64)
        hit = np.flatnonzero(n_cross)
        if hit.size:
            n = n_cross[hit]
            sign = np.sign(L[hit] - ref[hit]).astype(np.int64)
            pix = np.repeat(hit, n)
            # j = 1..n within each pixel's group
            j = np.arange(pix.size) - np.repeat(np.cumsum(n) - n, n) + 1
            s = np.repeat(sign, n)
            target = ref[pix] + s * j * C
            span = L[pix] - L_prev[pix]
            # a zero span only happens on exact-threshold ties; place those at the substep end
            safe = np.where(span == 0, 1.0, span)
            frac = np.where(span == 0, 1.0, np.clip((target - L_prev[pix]) / safe, 0.0, 1.0))
            pix_parts.append(pix)
            t_parts.append(t_prev + frac * (t_now - t_prev))
            p_parts.append(s)
            level[hit] += sign * n
        L_prev = L
    if not pix_parts:
        return EventStream.empty(W, H)
    pix = np.concatenate(pix_parts)
    t = np.concatenate(t_parts) * US_PER_S
    p = np.concatenate(p_parts)
    order = np.argsort(t, kind="stable")
    pix, t, p = pix[order], t[order], p[order]
    return EventStream(xx[pix], yy[pix], t, p.astype(np.int8), W, H)


def _simulate_one(args):
    image, cfg = args
    return simulate_constant_flow(image, cfg)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def generate_direction_sweep(image: IntensityImage, cfg: SimConfig, sweep: DirectionSweep,
                             jobs: int = 1) -> list[tuple[FlowVector, EventStream]]:
    """One stream per direction 360*k/n degrees, all at ``sweep.speed``."""
    flows = sweep.flows()
    streams = _map(_simulate_one, [(image, cfg.with_flow(f)) for f in flows], jobs)
    return list(zip(flows, streams))


# --- labeled glyph datasets ------------------------------------------------------

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True, eq=False)
class Glyph:
    image: IntensityImage
    label: int
    role: str = TRAIN  # which instance pool the glyph belongs to


@dataclass(eq=False)
class DatasetItem:
    stream: EventStream
    label: int
    direction_index: int
    direction_deg: float
    role: str
    glyph_index: int


@dataclass(eq=False)
class GlyphDataset:
    items: list
    n_classes: int
    n_directions: int
    width: int
    height: int
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def motions(self, name: str) -> list[int]:
        """Direction indices for a motion set: "1" is the first motion only, "all" is every direction."""
        if name == "1":
            return [0]
        if name == "all":
            return list(range(self.n_directions))
        raise ValueError(f"unknown motion set {name!r}; expected '1' or 'all'")

    def select(self, role: str, motions: str = "all") -> list:
        keep = set(self.motions(motions))
        return [it for it in self.items if it.role == role and it.direction_index in keep]

    def split_metadata(self) -> dict:
        return {name: self.motions(name) for name in ("1", "all")}


def render_glyph_dataset(glyphs: Optional[Sequence[Glyph]], cfg: SimConfig, sweep: DirectionSweep,
                         seed: int = 0, jobs: int = 1) -> GlyphDataset:
    """Simulate every glyph under every sweep direction.

    ``glyphs=None`` uses the built-in procedural templates, drawn with
    instance jitter from ``seed``.
    """
    if glyphs is None:
        from .glyphs import procedural_glyphs
        glyphs = procedural_glyphs(seed=seed)
    glyphs = list(glyphs)
    labels = sorted({g.label for g in glyphs})
    if len(labels) < 2:
        raise DatasetDegeneracyError(f"need at least 2 classes, got {labels}")
    shapes = {(g.image.width, g.image.height) for g in glyphs}
    if len(shapes) != 1:
        raise DatasetDegeneracyError(f"glyph images differ in size: {sorted(shapes)}")
    (W, H), = shapes
    flows = sweep.flows()
    angles = sweep.angles_deg()
    jobs_list = [(g.image, cfg.with_flow(f)) for g in glyphs for f in flows]
    streams = _map(_simulate_one, jobs_list, jobs)
    items = []
    for gi, g in enumerate(glyphs):
        for k in range(len(flows)):
            items.append(DatasetItem(streams[gi * len(flows) + k], int(g.label), k, angles[k], g.role, gi))
    n_classes = max(labels) + 1
    meta = {"sim": _sim_meta(cfg), "sweep": asdict(sweep)}
    return GlyphDataset(items, n_classes, len(flows), W, H, seed, meta)


def _sim_meta(cfg: SimConfig) -> dict:
    return {
        "threshold": cfg.threshold,
        "duration": cfg.duration,
        "intensity_floor": cfg.intensity_floor,
        "substeps_per_pixel": cfg.substeps_per_pixel,
    }


def write_dataset(dataset: GlyphDataset, root, extra: Optional[dict] = None) -> Path:
    """Streams as text event files plus a manifest.json listing (path, label, direction_deg, split)."""
    root = Path(root)
    (root / "streams").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, it in enumerate(dataset.items):
        rel = f"streams/{i:06d}.txt"
        write_text(it.stream, root / rel)
        entries.append({
            "path": rel,
            "label": it.label,
            "direction_deg": it.direction_deg,
            "direction_index": it.direction_index,
            "split": it.role,
            "glyph": it.glyph_index,
        })
    manifest = {
        "width": dataset.width,
        "height": dataset.height,
        "n_classes": dataset.n_classes,
        "n_directions": dataset.n_directions,
        "seed": dataset.seed,
        "motion_sets": dataset.split_metadata(),
        "meta": dataset.meta,
        "entries": entries,
    }
    if extra:
        manifest.update(extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_dataset(root) -> GlyphDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    W, H = manifest["width"], manifest["height"]
    items = []
    for e in manifest["entries"]:
        stream = read_text(root / e["path"], W, H)
        items.append(DatasetItem(stream, int(e["label"]), int(e["direction_index"]), float(e["direction_deg"]),
                                 e["split"], int(e.get("glyph", -1))))
    return GlyphDataset(items, int(manifest["n_classes"]), int(manifest["n_directions"]), W, H,
                        int(manifest.get("seed", 0)), manifest.get("meta", {}))
