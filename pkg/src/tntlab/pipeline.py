"""End-to-end classification pipeline.

raw events -> volume -> landmark -> center -> TNT -> volume -> classifier

plus the baseline that feeds the raw-event volume straight to the same
classifier.  Three variants are supported:

* ``baseline``     raw volume only
* ``tnt``          landmark from a heuristic (image center by default)
* ``tnt+regress``  landmark from a learned heatmap regressor, trained jointly
                   through the soft centroid, centering, TNT and voxelization
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import (
    EmptyEvidenceError,
    EmptyVolumeError,
    LabelError,
    NumericOverflowError,
    TrainingDivergenceError,
)
from .events import EventStream, normalize_timestamps
from .geometry import ClipBounds, Landmark, apply_tnt, center_events, recanonicalize, translate
from .voxel import SIGNED, EventVolume, VolumeSpec, build_volume, volume_coordinate_gradients

logger = logging.getLogger(__name__)

BASELINE = "baseline"
TNT = "tnt"
TNT_REGRESS = "tnt+regress"
VARIANTS = (BASELINE, TNT, TNT_REGRESS)

IMAGE_CENTER = "image-center"
EVENT_CENTROID = "event-centroid"
LEARNED = "learned-heatmap"


@dataclass
class PipelineConfig:
    variant: str = TNT
    bins: int = 9
    width: int = 34
    height: int = 34
    polarity_mode: str = SIGNED
    t_floor: float = 0.5
    landmark_mode: str = IMAGE_CENTER  # used by the tnt variant
    conv: str = nn.CONV2D
    hidden: int = 128
    lr: float = 0.01
    batch_size: int = 32
    iterations: int = 3000
    augment_px: int = 0  # random translation of the raw events
    input_shift_px: int = 0  # random translation of the classifier input volume
    regressor_width: int = 8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.landmark_mode not in (IMAGE_CENTER, EVENT_CENTROID):
            raise ValueError(f"landmark_mode must be {IMAGE_CENTER!r} or {EVENT_CENTROID!r}")
        if self.conv not in (nn.CONV2D, nn.CONV3D):
            raise ValueError(f"conv must be {nn.CONV2D!r} or {nn.CONV3D!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.augment_px < 0 or self.input_shift_px < 0:
            raise ValueError("batch_size >= 1 and non-negative iterations / augmentation ranges required")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")

    @property
    def volume_spec(self) -> VolumeSpec:
        return VolumeSpec(self.bins, self.height, self.width, self.polarity_mode)

    @property
    def bounds(self) -> ClipBounds:
        return ClipBounds(self.width, self.height)

    def input_shape(self) -> tuple:
        chans = 2 if self.polarity_mode != SIGNED else 1
        if self.conv == nn.CONV2D:
            return (chans * self.bins, self.height, self.width)
        return (chans, self.bins, self.height, self.width)


@dataclass
class LandmarkEstimator:
    mode: str = IMAGE_CENTER
    network: Optional[nn.Network] = None  # learned-heatmap mode only

    def __post_init__(self):
        if self.mode not in (IMAGE_CENTER, EVENT_CENTROID, LEARNED):
            raise ValueError(f"unknown landmark mode {self.mode!r}")
        if self.mode == LEARNED and self.network is None:
            raise ValueError("learned-heatmap mode needs a regressor network")


@dataclass
class EvalResult:
    accuracy: float
    per_class: list
    confusion: list
    split: str
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    cfg: PipelineConfig
    n_classes: int
    classifier: nn.Network
    regressor: Optional[nn.Network] = None

    def all_params(self) -> list:
        regs = list(self.regressor.params) if self.regressor is not None else []
        return regs + list(self.classifier.params)

    def with_params(self, params) -> "TrainedModel":
        k = len(self.regressor.params) if self.regressor is not None else 0
        reg = self.regressor.with_params(params[:k]) if self.regressor is not None else None
        return TrainedModel(self.cfg, self.n_classes, self.classifier.with_params(params[k:]), reg)


# --- landmarks -----------------------------------------------------------------

def soft_centroid(heatmap: np.ndarray):
    """Expected (x, y) pixel position under softmax(heatmap).  Returns (landmark xy, probabilities)."""
    H, W = heatmap.shape
    prob = nn.softmax(heatmap.reshape(-1)).reshape(H, W)
    ys, xs = np.mgrid[0:H, 0:W]
    return np.array([(prob * xs).sum(), (prob * ys).sum()]), prob


def soft_centroid_backward(prob: np.ndarray, landmark: np.ndarray, dl: np.ndarray) -> np.ndarray:
    """d loss / d heatmap given d loss / d (lx, ly)."""
    H, W = prob.shape
    ys, xs = np.mgrid[0:H, 0:W]
    return prob * (dl[0] * (xs - landmark[0]) + dl[1] * (ys - landmark[1]))


def network_input(volume_data: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Volume (B,H,W) or (2,B,H,W) -> network input layout for ``cfg.conv``."""
    if cfg.conv == nn.CONV2D:
        return volume_data.reshape((-1,) + volume_data.shape[-2:])
    return volume_data.reshape((-1,) + volume_data.shape[-3:])


def estimate_landmark(volume: EventVolume, estimator: LandmarkEstimator, cfg: Optional[PipelineConfig] = None) -> Landmark:
    """Landmark for a raw-event volume.

    image-center returns ((W-1)/2, (H-1)/2); event-centroid the centroid of
    per-pixel event magnitude; learned-heatmap the soft centroid of the
    regressor's heatmap.
    """
    H, W = volume.spec.H, volume.spec.W
    if estimator.mode == IMAGE_CENTER:
        return Landmark((W - 1) / 2, (H - 1) / 2)
    if estimator.mode == EVENT_CENTROID:
        mass = np.abs(volume.data).reshape(-1, H, W).sum(axis=0)
        total = mass.sum()
        if total <= 0:
            raise EmptyEvidenceError("volume contains no events to take a centroid of")
        ys, xs = np.mgrid[0:H, 0:W]
        return Landmark(float((mass * xs).sum() / total), float((mass * ys).sum() / total))
    cfg = cfg or PipelineConfig(bins=volume.spec.B, width=W, height=H, polarity_mode=volume.spec.polarity_mode)
    x = network_input(volume.data, PipelineConfig(**{**asdict(cfg), "conv": nn.CONV2D}))
    heat, _ = nn.forward(estimator.network, x[None])
    (lx, ly), _ = soft_centroid(heat[0, 0])
    return Landmark(float(lx), float(ly))


def heatmap_landmark(heatmap: np.ndarray) -> Landmark:
    (lx, ly), _ = soft_centroid(np.asarray(heatmap, dtype=np.float64))
    return Landmark(float(lx), float(ly))


# --- transforms ----------------------------------------------------------------

def prepare_stream(stream: EventStream, cfg: PipelineConfig) -> EventStream:
    """Raw stream (microseconds) -> timestamps on [0, B-1]."""
    return normalize_timestamps(stream, cfg.bins)


def tnt_events(stream: EventStream, landmark, cfg: PipelineConfig) -> EventStream:
    centered = center_events(stream, landmark)
    transformed, _ = apply_tnt(centered, cfg.t_floor)
    out, _ = recanonicalize(transformed, cfg.bounds)
    return out


def transform_stage(stream: EventStream, landmark, cfg: PipelineConfig) -> EventVolume:
    """Second event volume of the pipeline (or the raw volume for the baseline)."""
    spec = cfg.volume_spec
    if cfg.variant == BASELINE:
        return build_volume(stream, spec)
    out = tnt_events(stream, landmark, cfg)
    if len(out) == 0:
        raise EmptyVolumeError(f"all {len(stream)} events were dropped by the transform")
    return build_volume(out, spec)


def heuristic_features(stream: EventStream, cfg: PipelineConfig) -> np.ndarray:
    """Network input for the baseline / heuristic-tnt variants from a time-normalized stream."""
    if cfg.variant == BASELINE:
        vol = build_volume(stream, cfg.volume_spec)
    else:
        raw = build_volume(stream, cfg.volume_spec)
        lm = estimate_landmark(raw, LandmarkEstimator(cfg.landmark_mode))
        vol = transform_stage(stream, lm, cfg)
    return network_input(vol.data, cfg)


def shift_input(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate the last two (y, x) axes by integer (dx, dy) with zero fill."""
    out = np.zeros_like(x)
    H, W = x.shape[-2:]
    ys, yd = slice(max(0, -dy), min(H, H - dy)), slice(max(0, dy), min(H, H + dy))
    xs, xd = slice(max(0, -dx), min(W, W - dx)), slice(max(0, dx), min(W, W + dx))
    out[..., yd, xd] = x[..., ys, xs]
    return out


def _shift_batch(x: np.ndarray, rng: np.random.Generator, amount: int) -> np.ndarray:
    if amount <= 0:
        return x
    shifts = rng.integers(-amount, amount + 1, size=(len(x), 2))
    return np.stack([shift_input(xi, int(dx), int(dy)) for xi, (dx, dy) in zip(x, shifts)])


def _augment(stream: EventStream, rng: np.random.Generator, amount: int) -> EventStream:
    if amount <= 0:
        return stream
    dx, dy = rng.integers(-amount, amount + 1, size=2)
    return translate(stream, (float(dx), float(dy)))


# --- learned landmark path --------------------------------------------------------

def regress_forward(regressor: nn.Network, raw_streams: Sequence[EventStream], cfg: PipelineConfig):
    spec = VolumeSpec(cfg.bins, cfg.height, cfg.width, cfg.polarity_mode)
    x = np.stack([build_volume(s, spec).data.reshape((-1, cfg.height, cfg.width)) for s in raw_streams])
    heat, caches = nn.forward(regressor, x)
    landmarks, probs = [], []
    for h in heat[:, 0]:
        lm, prob = soft_centroid(h)
        landmarks.append(lm)
        probs.append(prob)
    return np.array(landmarks), probs, caches


def landmark_gradient(transformed: EventStream, dvolume: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """d loss / d (lx, ly) given d loss / d (second volume).

    The transformed coordinates are (x - lx)/t + W/2, so d/dlx = -(1/t) d/dx.
    """
    g = volume_coordinate_gradients(transformed, cfg.volume_spec, dvolume.reshape(cfg.volume_spec.shape))
    inv_t = 1.0 / transformed.t
    return np.array([-(g.dx * inv_t).sum(), -(g.dy * inv_t).sum()])


def landmark_loss_and_grad(stream: EventStream, label: int, landmark, classifier: nn.Network, cfg: PipelineConfig):
    """Classification loss for a fixed landmark and its derivative w.r.t. the landmark."""
    out = tnt_events(stream, landmark, cfg)
    vol = build_volume(out, cfg.volume_spec)
    loss, _, dx = nn.forward_backward(classifier, network_input(vol.data, cfg)[None], [label])
    return loss, landmark_gradient(out, dx[0], cfg)


# --- training / evaluation -----------------------------------------------------------

def init_model(cfg: PipelineConfig, n_classes: int, seed: int) -> TrainedModel:
    rng = np.random.default_rng(seed)
    regressor = None
    if cfg.variant == TNT_REGRESS:
        chans = cfg.bins * (2 if cfg.polarity_mode != SIGNED else 1)
        regressor = nn.build_landmark_regressor(chans, rng, cfg.regressor_width)
    classifier = nn.build_classifier(cfg.input_shape(), n_classes, rng, cfg.hidden, cfg.conv)
    return TrainedModel(cfg, n_classes, classifier, regressor)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        bad = labels[(labels < 0) | (labels >= n_classes)][0]
        raise LabelError(f"label {bad} outside [0, {n_classes})")
    return labels


def train(samples: Sequence, cfg: PipelineConfig, seed: int = 0, n_classes: Optional[int] = None,
          init: Optional[TrainedModel] = None):
    """Train on ``samples`` = sequence of (raw EventStream, label).

    Returns (TrainedModel, log) where log holds one dict per iteration with the
    batch loss and batch accuracy (train_acc).  Deterministic for a given seed.
    """
    streams = [prepare_stream(s, cfg) for s, _ in samples]
    labels = np.array([int(lbl) for _, lbl in samples], dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    labels = _check_labels(labels, n_classes)
    if len(np.unique(labels)) < 2:
        raise LabelError("training needs at least two classes")
    model = init if init is not None else init_model(cfg, n_classes, seed)
    rng = np.random.default_rng([seed, 1])
    cached = None
    if cfg.variant != TNT_REGRESS and cfg.augment_px == 0:
        cached = np.stack([heuristic_features(s, cfg) for s in streams])

    state = nn.TrainState(model.all_params(), cfg.lr, 0, seed)
    log = []
    order = np.empty(0, dtype=np.int64)
    for it in range(cfg.iterations):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(streams))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        model = model.with_params(state.params)
        try:
            if cfg.variant == TNT_REGRESS:
                batch = [_augment(streams[i], rng, cfg.augment_px) for i in idx]
                loss, grads, acc = _regress_step(model, batch, labels[idx])
            else:
                if cached is not None:
                    x = cached[idx]
                else:
                    x = np.stack([heuristic_features(_augment(streams[i], rng, cfg.augment_px), cfg) for i in idx])
                x = _shift_batch(x, rng, cfg.input_shift_px)
                logits, caches = nn.forward(model.classifier, x)
                loss, dlogits = nn.softmax_cross_entropy(logits, labels[idx])
                if np.isfinite(loss):
                    grads, _ = nn.backward(model.classifier, caches, dlogits, input_grad=False)
                acc = float(np.mean(np.argmax(logits, axis=1) == labels[idx]))
        except NumericOverflowError as exc:
            raise TrainingDivergenceError(it, float("nan")) from exc
        if not np.isfinite(loss):
            raise TrainingDivergenceError(it, loss)
        state = nn.sgd_step(state, grads)
        log.append({"iteration": it, "loss": float(loss), "train_acc": acc})
    return model.with_params(state.params), log


def _regress_step(model: TrainedModel, batch: Sequence[EventStream], labels: np.ndarray):
    cfg = model.cfg
    landmarks, probs, reg_caches = regress_forward(model.regressor, batch, cfg)
    transformed = [tnt_events(s, lm, cfg) for s, lm in zip(batch, landmarks)]
    x = np.stack([network_input(build_volume(t, cfg.volume_spec).data, cfg) for t in transformed])
    logits, caches = nn.forward(model.classifier, x)
    loss, dlogits = nn.softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        return loss, None, 0.0
    cls_grads, dx = nn.backward(model.classifier, caches, dlogits, input_grad=True)
    dheat = np.zeros((len(batch), 1, cfg.height, cfg.width))
    for i, (t, lm, prob) in enumerate(zip(transformed, landmarks, probs)):
        dl = landmark_gradient(t, dx[i], cfg)
        dheat[i, 0] = soft_centroid_backward(prob, lm, dl)
    reg_grads, _ = nn.backward(model.regressor, reg_caches, dheat, input_grad=False)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, list(reg_grads) + list(cls_grads), acc


def predict_labels(model: TrainedModel, streams: Sequence[EventStream], batch_size: int = 128) -> np.ndarray:
    """Predicted class per raw (microsecond) stream."""
    cfg = model.cfg
    preds = []
    for i in range(0, len(streams), batch_size):
        chunk = [prepare_stream(s, cfg) for s in streams[i:i + batch_size]]
        if cfg.variant == TNT_REGRESS:
            landmarks, _, _ = regress_forward(model.regressor, chunk, cfg)
            x = np.stack([network_input(build_volume(tnt_events(s, lm, cfg), cfg.volume_spec).data, cfg)
                          for s, lm in zip(chunk, landmarks)])
        else:
            x = np.stack([heuristic_features(s, cfg) for s in chunk])
        logits, _ = nn.forward(model.classifier, x)
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate(model: TrainedModel, samples: Sequence, split: str = "") -> EvalResult:
    """Accuracy, per-class accuracy and confusion counts; the model is not modified."""
    labels = _check_labels([int(lbl) for _, lbl in samples], model.n_classes)
    preds = predict_labels(model, [s for s, _ in samples])
    K = model.n_classes
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    totals = confusion.sum(axis=1)
    per_class = [float(confusion[k, k] / totals[k]) if totals[k] else None for k in range(K)]
    n = int(len(labels))
    acc = float(np.trace(confusion) / n) if n else 0.0
    return EvalResult(acc, per_class, confusion.tolist(), split, n)
