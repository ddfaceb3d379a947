"""Small dense-tensor network engine with manual backpropagation.

Layers follow the familiar forward/backward pairing: every ``*_forward``
returns ``(out, cache)`` and the matching ``*_backward`` consumes the
upstream derivative and the cache.  Convolutions are cross-correlations
(what deep learning frameworks call convolution) over 2 or 3 spatial axes.

Batched tensors are laid out as (N, C, *spatial).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MalformedStreamError, NumericOverflowError, ShapeError

CONV2D = "conv2d"
CONV3D = "conv3d"
FC = "fc"


# --- correlation ---------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _offset_slices(offs, stride, out_size):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_size)
    )


def conv_forward(x, w, b, stride=1, padding=0):
    """Batched cross-correlation.

    x: (N, C, *S), w: (O, C, *K), b: (O,) -> out (N, O, *S')
    """
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    N, C = x.shape[:2]
    O, K = w.shape[0], w.shape[2:]
    out_size = tuple(_out_size(n, k, stride, padding) for n, k in zip(x.shape[2:], K))
    if min(out_size) < 1:
        raise ShapeError(f"kernel {w.shape} does not fit input {x.shape} with padding {padding}")
    xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * nd)
    xt = xp.swapaxes(0, 1)  # (C, N, *S)
    # im2col with rows (c, *k) and columns (n, *out)
    cols = np.empty((C,) + tuple(K) + (N,) + out_size)
    for offs in np.ndindex(*K):
        cols[(slice(None),) + offs] = xt[_offset_slices(offs, stride, out_size)]
    cols = cols.reshape(C * int(np.prod(K)), -1)
    out = w.reshape(O, -1) @ cols  # (O, N * out)
    if b is not None:
        out += b[:, None]
    out = out.reshape((O, N) + out_size).swapaxes(0, 1)
    cache = (x.shape, xp.shape, cols, w, stride, padding)
    return np.ascontiguousarray(out), cache


def conv_backward(dout, cache, input_grad=True):
    x_shape, xp_shape, cols, w, stride, padding = cache
    nd = w.ndim - 2
    N, O = dout.shape[:2]
    out_size = dout.shape[2:]
    K = w.shape[2:]
    dmat = dout.swapaxes(0, 1).reshape(O, -1)
    db = dmat.sum(axis=1)
    dw = (dmat @ cols.T).reshape(w.shape)
    if not input_grad:
        return None, dw, db
    C = w.shape[1]
    dcols = (w.reshape(O, -1).T @ dmat).reshape((C,) + tuple(K) + (N,) + tuple(out_size))
    dxp = np.zeros((C, N) + tuple(xp_shape[2:]))
    for offs in np.ndindex(*K):
        dxp[_offset_slices(offs, stride, out_size)] += dcols[(slice(None),) + offs]
    dxp = dxp.swapaxes(0, 1)
    if padding:
        crop = (slice(None), slice(None)) + (slice(padding, -padding),) * nd
        dxp = dxp[crop]
    return np.ascontiguousarray(dxp), dw, db


def correlate(input, kernel, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate one (C, *S) tensor with an (O, C, *K) kernel bank.

    A kernel given without the output axis, shape (C, *K), yields a single
    output channel.  Output spatial size per axis is
    floor((n + 2*padding - k) / stride) + 1.
    """
    x = np.asarray(input, dtype=np.float64)
    w = np.asarray(kernel, dtype=np.float64)
    if w.ndim == x.ndim:
        w = w[None]
    if x.ndim not in (3, 4) or w.ndim != x.ndim + 1:
        raise ShapeError(f"expected (C, *S) input with 2 or 3 spatial axes and (O, C, *K) kernel; "
                         f"got input {x.shape}, kernel {np.shape(kernel)}")
    out, _ = conv_forward(x[None], w, None, stride, padding)
    return out[0]


# --- pooling / activations / dense ----------------------------------------------

def avg_pool_forward(x, size=2, stride=2):
    nd = x.ndim - 2
    if size < 1 or stride < 1:
        raise ShapeError(f"invalid pool size {size} / stride {stride}")
    out_size = [_out_size(n, size, stride, 0) for n in x.shape[2:]]
    if min(out_size) < 1:
        raise ShapeError(f"pool window {size} larger than input {x.shape}")
    out = np.zeros(x.shape[:2] + tuple(out_size))
    for offs in np.ndindex(*(size,) * nd):
        out += x[_offset_slices(offs, stride, out_size)]
    out /= size ** nd
    return out, (x.shape, size, stride)


def avg_pool_backward(dout, cache):
    x_shape, size, stride = cache
    nd = len(x_shape) - 2
    dx = np.zeros(x_shape)
    g = dout / size ** nd
    for offs in np.ndindex(*(size,) * nd):
        dx[_offset_slices(offs, stride, dout.shape[2:])] += g
    return dx


def avg_pool(input, size: int, stride: int) -> np.ndarray:
    """Windowed mean over the spatial axes of a (C, *S) tensor."""
    out, _ = avg_pool_forward(np.asarray(input, dtype=np.float64)[None], size, stride)
    return out[0]


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    # derivative at exactly 0 is taken as 0
    return dout * (cache > 0)


def fc_forward(x, w, b):
    out = x.reshape(x.shape[0], -1) @ w + b
    return out, (x, w)


def fc_backward(dout, cache):
    x, w = cache
    flat = x.reshape(x.shape[0], -1)
    return (dout @ w.T).reshape(x.shape), flat.T @ dout, dout.sum(axis=0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


# --- networks -------------------------------------------------------------------

@dataclass
class LayerParams:
    kind: str
    weights: np.ndarray
    biases: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w, b = self.weights, self.biases
        if self.kind == FC:
            ok = w.ndim == 2 and b.shape == (w.shape[1],)
        elif self.kind in (CONV2D, CONV3D):
            nd = 2 if self.kind == CONV2D else 3
            ok = w.ndim == nd + 2 and b.shape == (w.shape[0],)
        else:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if not ok:
            raise ShapeError(f"{self.kind} weights {w.shape} inconsistent with biases {b.shape}")


@dataclass(frozen=True)
class Op:
    """One step of a network: a parameter layer (by index) or a stateless op."""

    kind: str  # "param" | "relu" | "avgpool" | "flatten"
    index: int = -1
    size: int = 2
    stride: int = 2

    def label(self, params: Sequence[LayerParams]) -> str:
        if self.kind == "param":
            return f"{self.index}:{params[self.index].kind}"
        return self.kind


@dataclass
class Network:
    ops: tuple
    params: list

    def with_params(self, params) -> "Network":
        return Network(self.ops, list(params))


@dataclass
class TrainState:
    params: list
    lr: float = 0.01
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_conv(rng, kind, c_in, c_out, k, stride=1, padding=0) -> LayerParams:
    nd = 2 if kind == CONV2D else 3
    shape = (c_out, c_in) + (k,) * nd
    rf = k ** nd
    w = glorot_uniform(rng, shape, c_in * rf, c_out * rf)
    return LayerParams(kind, w, np.zeros(c_out), stride, padding)


def init_fc(rng, d_in, d_out) -> LayerParams:
    return LayerParams(FC, glorot_uniform(rng, (d_in, d_out), d_in, d_out), np.zeros(d_out))


def forward(network: Network, x: np.ndarray):
    """Run the network; returns (output, caches).  Raises on non-finite activations."""
    caches = []
    out = np.asarray(x, dtype=np.float64)
    for op in network.ops:
        if op.kind == "param":
            lp = network.params[op.index]
            if lp.kind == FC:
                out, cache = fc_forward(out, lp.weights, lp.biases)
            else:
                out, cache = conv_forward(out, lp.weights, lp.biases, lp.stride, lp.padding)
        elif op.kind == "relu":
            out, cache = relu_forward(out)
        elif op.kind == "avgpool":
            out, cache = avg_pool_forward(out, op.size, op.stride)
        elif op.kind == "flatten":
            out, cache = out.reshape(out.shape[0], -1), out.shape
        else:
            raise ShapeError(f"unknown op {op.kind!r}")
        if not np.isfinite(out).all():
            raise NumericOverflowError(op.label(network.params))
        caches.append(cache)
    return out, caches


def backward(network: Network, caches, dout, input_grad: bool = True):
    """Backpropagate ``dout``; returns ([(dW, db) per parameter layer], dinput).

    With ``input_grad=False`` the input gradient is skipped (returned as None).
    """
    grads: list = [None] * len(network.params)
    last = len(network.ops) - 1
    for i, (op, cache) in enumerate(zip(reversed(network.ops), reversed(caches))):
        if op.kind == "param":
            lp = network.params[op.index]
            if lp.kind == FC:
                dout, dw, db = fc_backward(dout, cache)
            else:
                dout, dw, db = conv_backward(dout, cache, input_grad or i != last)
            grads[op.index] = (dw, db)
        elif op.kind == "relu":
            dout = relu_backward(dout, cache)
        elif op.kind == "avgpool":
            dout = avg_pool_backward(dout, cache)
        elif op.kind == "flatten":
            dout = dout.reshape(cache)
    return grads, dout


def forward_backward(network: Network, inputs, labels, input_grad: bool = True):
    """Mean softmax cross-entropy over the batch, its parameter gradients and d loss / d inputs."""
    labels = np.asarray(labels, dtype=np.int64)
    logits, caches = forward(network, inputs)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError(f"labels must lie in [0, {logits.shape[1]})")
    loss, dlogits = softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise NumericOverflowError("loss", "non-finite loss")
    grads, dx = backward(network, caches, dlogits, input_grad)
    return loss, grads, dx


def predict(network: Network, inputs, batch_size: int = 256) -> np.ndarray:
    outs = []
    for i in range(0, len(inputs), batch_size):
        logits, _ = forward(network, inputs[i:i + batch_size])
        outs.append(logits)
    return np.concatenate(outs) if outs else np.empty((0,))


def sgd_step(state: TrainState, grads) -> TrainState:
    """Plain SGD: p <- p - lr * g.  Returns a new state; the input is not mutated."""
    if len(grads) != len(state.params):
        raise ShapeError(f"{len(grads)} gradients for {len(state.params)} layers")
    new = []
    for lp, (dw, db) in zip(state.params, grads):
        if dw.shape != lp.weights.shape or db.shape != lp.biases.shape:
            raise ShapeError(f"gradient {dw.shape}/{db.shape} vs parameter {lp.weights.shape}/{lp.biases.shape}")
        new.append(replace(lp, weights=lp.weights - state.lr * dw, biases=lp.biases - state.lr * db))
    return TrainState(new, state.lr, state.iteration + 1, state.seed)


# --- architectures ----------------------------------------------------------------

def build_classifier(in_shape, n_classes: int, rng: np.random.Generator, hidden: int = 128,
                     conv: str = CONV2D, widths=(16, 32)) -> Network:
    """Two conv+relu layers (first with stride 2), average pooling after each,
    then two fully connected layers.

    ``in_shape`` is (C, H, W) for 2D or (C, B, H, W) for 3D convolution.
    """
    nd = 2 if conv == CONV2D else 3
    if len(in_shape) != nd + 1:
        raise ShapeError(f"{conv} classifier needs a {nd + 1}-axis input shape, got {in_shape}")
    c1, c2 = widths
    params = [
        init_conv(rng, conv, in_shape[0], c1, 3, stride=2, padding=1),
        init_conv(rng, conv, c1, c2, 3, stride=1, padding=1),
    ]
    size = list(in_shape[1:])
    size = [_out_size(n, 3, 2, 1) for n in size]
    size = [_out_size(n, 2, 2, 0) for n in size]
    size = [_out_size(n, 2, 2, 0) for n in size]
    if min(size) < 1:
        raise ShapeError(f"input {in_shape} too small for the classifier")
    flat = c2 * int(np.prod(size))
    params += [init_fc(rng, flat, hidden), init_fc(rng, hidden, n_classes)]
    ops = (
        Op("param", 0), Op("relu"), Op("avgpool", size=2, stride=2),
        Op("param", 1), Op("relu"), Op("avgpool", size=2, stride=2),
        Op("flatten"),
        Op("param", 2), Op("relu"),
        Op("param", 3),
    )
    return Network(ops, params)


def build_landmark_regressor(in_channels: int, rng: np.random.Generator, width: int = 8) -> Network:
    """Three 3x3 conv+relu layers and a 1x1 conv producing a one-channel heatmap."""
    params = [
        init_conv(rng, CONV2D, in_channels, width, 3, padding=1),
        init_conv(rng, CONV2D, width, width, 3, padding=1),
        init_conv(rng, CONV2D, width, width, 3, padding=1),
        init_conv(rng, CONV2D, width, 1, 1),
    ]
    ops = (
        Op("param", 0), Op("relu"),
        Op("param", 1), Op("relu"),
        Op("param", 2), Op("relu"),
        Op("param", 3),
    )
    return Network(ops, params)


# --- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TNNW"
_KIND_CODES = {CONV2D: 2, CONV3D: 3, FC: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def encode_params(params: Sequence[LayerParams]) -> bytes:
    """"TNNW", u32 layer count, then per layer:
    u32 kind, u32 stride, u32 padding, u32 ndim, u32 dims..., f32 weights,
    u32 bias length, f32 biases.  All little-endian.
    """
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for lp in params:
        w = lp.weights
        out.append(struct.pack("<IIII", _KIND_CODES[lp.kind], lp.stride, lp.padding, w.ndim))
        out.append(struct.pack(f"<{w.ndim}I", *w.shape))
        out.append(w.astype("<f4").tobytes())
        out.append(struct.pack("<I", lp.biases.size))
        out.append(lp.biases.astype("<f4").tobytes())
    return b"".join(out)


def decode_params(data: bytes) -> list:
    if data[:4] != CHECKPOINT_MAGIC:
        raise MalformedStreamError(f"bad checkpoint magic {data[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        params = []
        for _ in range(count):
            kind, stride, padding, ndim = struct.unpack_from("<IIII", data, pos)
            pos += 16
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape))
            w = np.frombuffer(data, "<f4", n, pos).astype(np.float64).reshape(shape)
            pos += 4 * n
            (nb,) = struct.unpack_from("<I", data, pos)
            pos += 4
            b = np.frombuffer(data, "<f4", nb, pos).astype(np.float64)
            pos += 4 * nb
            params.append(LayerParams(_KIND_NAMES[kind], w, b, stride, padding))
    except (struct.error, ValueError, KeyError) as exc:
        raise MalformedStreamError(f"truncated or corrupt checkpoint: {exc}") from None
    return params


def save_params(params, path) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path) -> list:
    return decode_params(Path(path).read_bytes())
