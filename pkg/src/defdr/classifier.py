"""Two-layer CNN with hand-written backprop.

conv3x3(8) -> ReLU -> maxpool2 -> conv3x3(16) -> ReLU -> maxpool2 -> dense -> softmax

Everything runs in float64 on batches shaped ``(N, H, W, 3)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import LabeledDataset, Prng

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
CHECKPOINT_MAGIC = b"DFDR"
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierModel:
    w1: np.ndarray  # (3, 3, 3, 8)   kernel rows, kernel cols, in, out
    b1: np.ndarray  # (8,)
    w2: np.ndarray  # (3, 3, 8, 16)
    b2: np.ndarray  # (16,)
    w3: np.ndarray  # (16 * (side/4)**2, classes)
    b3: np.ndarray  # (classes,)

    def __post_init__(self):
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")
            setattr(self, name, arr)

    @property
    def class_count(self) -> int:
        return self.w3.shape[1]

    @property
    def image_side(self) -> int:
        return int(round(np.sqrt(self.w3.shape[0] / 16))) * 4

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(*(p.copy() for p in self.params()))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def zeros_model(image_side: int = 32, class_count: int = 5) -> ClassifierModel:
    d = 16 * (image_side // 4) ** 2
    return ClassifierModel(
        np.zeros((3, 3, 3, 8)), np.zeros(8), np.zeros((3, 3, 8, 16)), np.zeros(16),
        np.zeros((d, class_count)), np.zeros(class_count),
    )


def init_model(image_side: int, class_count: int, prng: Prng) -> ClassifierModel:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    if image_side % 4:
        raise ValueError("image_side must be divisible by 4")
    m = zeros_model(image_side, class_count)
    for name in ("w1", "w2", "w3"):
        w = getattr(m, name)
        fan_in = int(np.prod(w.shape[:-1]))
        setattr(m, name, prng.normal(w.shape, scale=np.sqrt(2.0 / fan_in)))
    return m


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * c)
    out = cols @ w.reshape(9 * c, -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv_backward(dout, cols, w, need_params=True, need_input=True):
    o = w.shape[-1]
    dw = db = dx = None
    if need_params:
        d2 = dout.reshape(-1, o)
        dw = (cols.T @ d2).reshape(w.shape)
        db = d2.sum(axis=0)
    if need_input:
        # transposed convolution == convolution with the flipped, in/out-swapped kernel
        flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx, _ = _conv_forward(dout, flipped, 0.0)
    return dx, dw, db


def _pool_forward(x):
    views = (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))
    # ties route to the first maximum in (0,0),(0,1),(1,0),(1,1) scan order
    taken = views[0] == out
    winners = [taken]
    for v in views[1:3]:
        win = (v == out) & ~taken
        taken = taken | win
        winners.append(win)
    winners.append(~taken)
    return out, winners


def _pool_backward(dout, winners, x_shape):
    dx = np.empty(x_shape)
    dx[:, 0::2, 0::2] = dout * winners[0]
    dx[:, 0::2, 1::2] = dout * winners[1]
    dx[:, 1::2, 0::2] = dout * winners[2]
    dx[:, 1::2, 1::2] = dout * winners[3]
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    side = model.image_side
    if x.ndim != 4 or x.shape[1:] != (side, side, 3):
        raise ValueError(f"model expects ({side}, {side}, 3) images, got {x.shape[1:]}")
    return x


def _forward(model, x):
    z1, cols1 = _conv_forward(x, model.w1, model.b1)
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, model.w2, model.b2)
    a2 = np.maximum(z2, 0.0)
    p2, idx2 = _pool_forward(a2)
    flat = p2.reshape(len(x), -1)
    logits = flat @ model.w3 + model.b3
    cache = (x.shape, z1, cols1, idx1, p1.shape, z2, cols2, idx2, p2.shape, flat)
    return logits, cache


def forward(model: ClassifierModel, img: np.ndarray):
    """Logits and softmax probabilities for one image or a batch."""
    x = _check_input(model, img)
    logits, _ = _forward(model, x)
    probs = softmax(logits)
    if np.ndim(img) == 3:
        return logits[0], probs[0]
    return logits, probs


def predict(model: ClassifierModel, images: np.ndarray, batch: int = 500) -> np.ndarray:
    """Argmax class per image; ties go to the lowest index."""
    images = _check_input(model, images)
    out = [
        _forward(model, images[i : i + batch])[0].argmax(axis=1)
        for i in range(0, len(images), batch)
    ]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def loss_and_gradients(model: ClassifierModel, images, labels, need_params: bool = True,
                       need_input: bool = True):
    """Mean cross-entropy with its exact gradients.

    Returns ``(loss, grads, input_grads)`` where ``grads`` maps parameter name
    to an array shaped like that parameter and ``input_grads`` has the shape of
    ``images``. Either is ``None`` when switched off.
    """
    single = np.ndim(images) == 3
    x = _check_input(model, images)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(x) == 0 or len(labels) != len(x):
        raise ValueError("need a non-empty batch with one label per image")
    n = len(x)
    logits, cache = _forward(model, x)
    x_shape, z1, cols1, idx1, p1_shape, z2, cols2, idx2, p2_shape, flat = cache

    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    dflat = dlogits @ model.w3.T
    da2 = _pool_backward(dflat.reshape(p2_shape), idx2, z2.shape)
    dz2 = da2 * (z2 > 0)
    dp1, dw2, db2 = _conv_backward(dz2, cols2, model.w2, need_params)
    da1 = _pool_backward(dp1, idx1, z1.shape)
    dz1 = da1 * (z1 > 0)
    dx, dw1, db1 = _conv_backward(dz1, cols1, model.w1, need_params, need_input)

    grads = None
    if need_params:
        grads = {
            "w1": dw1, "b1": db1, "w2": dw2, "b2": db2,
            "w3": flat.T @ dlogits, "b3": dlogits.sum(axis=0),
        }
    if dx is not None and single:
        dx = dx[0]
    return loss, grads, dx


def activation_pattern(model: ClassifierModel, images) -> tuple:
    """ReLU signs and pooling winners; constant wherever the network is smooth."""
    x = _check_input(model, images)
    _, cache = _forward(model, x)
    _, z1, _, win1, _, z2, _, win2, _, _ = cache
    return (z1 > 0, *win1, z2 > 0, *win2)


def accuracy(model: ClassifierModel, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


def train(model: ClassifierModel | None, dataset: LabeledDataset, cfg: TrainConfig,
          prng: Prng | None = None):
    """Momentum SGD over shuffled mini-batches.

    With ``model=None`` a He-initialised network is drawn from the generator
    first. ``prng`` defaults to ``Prng(cfg.seed)``. Returns the trained copy and
    the mean training loss of each epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    prng = Prng(cfg.seed) if prng is None else prng
    side = dataset.image_shape[0]
    model = init_model(side, dataset.class_count, prng) if model is None else model.copy()
    velocity = {name: np.zeros_like(getattr(model, name)) for name in PARAM_NAMES}
    history = []
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = prng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads, _ = loss_and_gradients(
                model, dataset.images[idx], dataset.labels[idx], need_input=False
            )
            total += loss * len(idx)
            for name in PARAM_NAMES:
                v = velocity[name]
                v *= cfg.momentum
                v -= cfg.learning_rate * grads[name]
                getattr(model, name).__iadd__(v)
        history.append(total / n)
    return model, history


# --------------------------------------------------------------------------
# checkpoint: "DFDR", u32 version, u32 tensor count, then per tensor
# u32 rank, rank x u32 dims, little-endian float64 payload (C order)
# --------------------------------------------------------------------------


def save_checkpoint(model: ClassifierModel) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(PARAM_NAMES))]
    for p in model.params():
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def load_checkpoint(data: bytes) -> ClassifierModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a DFDR checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION or count != len(PARAM_NAMES):
        raise ValueError(f"unsupported checkpoint version {version} / tensor count {count}")
    pos = 12
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", data, pos)
        dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if len(data) < pos + 8 * size:
            raise ValueError("truncated checkpoint")
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        tensors.append(arr.astype(np.float64))
        pos += 8 * size
    return ClassifierModel(*tensors)
