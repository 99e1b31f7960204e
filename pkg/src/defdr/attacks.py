"""Patch pasting, EOT transforms and the two patch trainers.

A patch is a ``(side, side, 3)`` array in [0, 1]. Pasting follows the masked
blend ``x* = (1 - m) * x + m * P`` with ``m`` a square of ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .classifier import ClassifierModel, loss_and_gradients, predict
from .core import LabeledDataset, Prng


@dataclass(frozen=True)
class Fixed:
    row: int
    col: int


@dataclass(frozen=True)
class Random:
    pass


@dataclass(frozen=True)
class PatchSpec:
    side: int
    placement: Fixed | Random
    target_class: int

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("patch side must be at least 2")
        if isinstance(self.placement, Fixed) and (self.placement.row < 0 or self.placement.col < 0):
            raise ValueError("fixed placement must be non-negative")

    @classmethod
    def upper_right(cls, side: int, image_side: int, target_class: int) -> "PatchSpec":
        return cls(side, Fixed(0, image_side - side), target_class)


@dataclass
class TrainedPatch:
    pixels: np.ndarray
    spec: PatchSpec
    epochs_trained: int = 0
    final_success_rate: float = float("nan")
    seed: int | None = None

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        s = self.spec.side
        if self.pixels.shape != (s, s, 3):
            raise ValueError(f"patch pixels must be ({s}, {s}, 3)")

    def sidecar(self) -> dict:
        pl = self.spec.placement
        placement = {"kind": "fixed", "row": pl.row, "col": pl.col} if isinstance(pl, Fixed) else {"kind": "random"}
        return {
            "side": self.spec.side,
            "placement": placement,
            "target_class": self.spec.target_class,
            "epochs_trained": self.epochs_trained,
            "seed": self.seed,
        }


def patch_from_sidecar(pixels: np.ndarray, sidecar: dict | str) -> TrainedPatch:
    meta = json.loads(sidecar) if isinstance(sidecar, str) else sidecar
    pl = meta["placement"]
    placement = Fixed(pl["row"], pl["col"]) if pl["kind"] == "fixed" else Random()
    spec = PatchSpec(meta["side"], placement, meta["target_class"])
    return TrainedPatch(pixels, spec, meta.get("epochs_trained", 0), seed=meta.get("seed"))


@dataclass(frozen=True)
class EotParams:
    max_translation: int = 0
    max_rotation: float = 0.0
    brightness_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.brightness_range
        if not lo <= 1.0 <= hi:
            raise ValueError("brightness range must satisfy lo <= 1 <= hi")
        if not 0.0 <= self.max_rotation <= 45.0:
            raise ValueError("max_rotation must lie in [0, 45] degrees")
        if self.max_translation < 0:
            raise ValueError("max_translation must be non-negative")


@dataclass(frozen=True)
class Transform:
    dy: int = 0
    dx: int = 0
    angle: float = 0.0  # degrees, counter-clockwise as displayed
    brightness: float = 1.0


# --------------------------------------------------------------------------
# masks and pasting
# --------------------------------------------------------------------------


def make_mask(h: int, w: int, spec: PatchSpec, prng: Prng | None = None):
    """Binary mask with a ``side x side`` square of ones; returns ``(mask, row, col)``."""
    s = spec.side
    if s > min(h, w):
        raise ValueError(f"patch side {s} exceeds image {h}x{w}")
    if isinstance(spec.placement, Fixed):
        row, col = spec.placement.row, spec.placement.col
        if row + s > h or col + s > w:
            raise ValueError("fixed placement puts the patch out of bounds")
    else:
        if prng is None:
            raise ValueError("random placement needs a generator")
        row, col = prng.below(h - s + 1), prng.below(w - s + 1)
    mask = np.zeros((h, w), dtype=bool)
    mask[row : row + s, col : col + s] = True
    return mask, row, col


def apply_patch(x: np.ndarray, pixels: np.ndarray, mask: np.ndarray, corner) -> np.ndarray:
    pixels = getattr(pixels, "pixels", pixels)
    row, col = corner
    s = pixels.shape[0]
    canvas = np.zeros_like(x)
    canvas[row : row + s, col : col + s] = pixels
    m = mask.astype(np.float64)[..., None]
    return (1.0 - m) * x + m * canvas


def paste_batch(images: np.ndarray, pixels: np.ndarray, corners) -> np.ndarray:
    """Paste one patch into every image at the per-image ``(row, col)`` corners."""
    out = images.copy()
    s = pixels.shape[0]
    for img, (r, c) in zip(out, corners):
        img[r : r + s, c : c + s] = pixels
    return out


def sample_corners(spec: PatchSpec, h: int, w: int, n: int, prng: Prng) -> list[tuple[int, int]]:
    if isinstance(spec.placement, Fixed):
        make_mask(h, w, spec)
        return [(spec.placement.row, spec.placement.col)] * n
    return [make_mask(h, w, spec, prng)[1:] for _ in range(n)]


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------


def sample_transform(prng: Prng, eot: EotParams) -> Transform:
    """Independent uniform draws; degenerate ranges consume no randomness."""
    t = eot.max_translation
    dy = prng.integers(-t, t) if t else 0
    dx = prng.integers(-t, t) if t else 0
    angle = prng.uniform(-eot.max_rotation, eot.max_rotation) if eot.max_rotation else 0.0
    lo, hi = eot.brightness_range
    brightness = prng.uniform(lo, hi) if hi > lo else lo
    return Transform(dy, dx, angle, brightness)


@lru_cache(maxsize=4096)
def _rotation_taps(side: int, angle: float):
    """Bilinear source taps for rotating a ``side x side`` grid about its centre.

    Returns ``(index, weight, gray)``: flat source indices and weights of shape
    ``(side*side, 4)`` (invalid taps carry index 0 and weight 0) and the per
    output-pixel weight that falls outside the grid and reads neutral gray.
    """
    c = (side - 1) / 2.0
    th = math.radians(angle)
    cos, sin = math.cos(th), math.sin(th)
    rr, qq = np.mgrid[0:side, 0:side].astype(np.float64)
    y, x = rr.ravel() - c, qq.ravel() - c
    # inverse map: where does each output pixel sample from
    src_x = x * cos - y * sin + c
    src_y = x * sin + y * cos + c
    r0, q0 = np.floor(src_y), np.floor(src_x)
    fy, fx = src_y - r0, src_x - q0
    index = np.zeros((side * side, 4), dtype=np.int64)
    weight = np.zeros((side * side, 4))
    gray = np.zeros(side * side)
    for k, (oy, ox, wgt) in enumerate((
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    )):
        rs, qs = r0 + oy, q0 + ox
        ok = (rs >= 0) & (rs < side) & (qs >= 0) & (qs < side)
        index[:, k] = np.where(ok, rs * side + qs, 0).astype(np.int64)
        weight[:, k] = np.where(ok, wgt, 0.0)
        gray += np.where(ok, 0.0, wgt)
    return index, weight, gray


def _rotate(pixels: np.ndarray, angle: float) -> np.ndarray:
    s = pixels.shape[0]
    index, weight, gray = _rotation_taps(s, float(angle))
    flat = pixels.reshape(s * s, 3)
    out = (flat[index] * weight[..., None]).sum(axis=1) + 0.5 * gray[:, None]
    return out.reshape(s, s, 3)


def _rotate_backward(grad: np.ndarray, angle: float) -> np.ndarray:
    s = grad.shape[0]
    index, weight, _ = _rotation_taps(s, float(angle))
    g = grad.reshape(s * s, 1, 3) * weight[..., None]
    out = np.zeros((s * s, 3))
    np.add.at(out, index.ravel(), g.reshape(-1, 3))
    return out.reshape(s, s, 3)


def apply_transform(pixels: np.ndarray, t: Transform) -> np.ndarray:
    """Rotate (bilinear, gray outside), scale brightness, clamp.

    Translation is not resampled here; it shifts the paste corner instead.
    """
    rotated = _rotate(pixels, t.angle) if t.angle else pixels
    return np.clip(t.brightness * rotated, 0.0, 1.0)


def transform_backward(grad_out: np.ndarray, pixels: np.ndarray, t: Transform) -> np.ndarray:
    """Pull a gradient on the transformed patch back onto the source pixels."""
    rotated = _rotate(pixels, t.angle) if t.angle else pixels
    scaled = t.brightness * rotated
    g = grad_out * t.brightness * ((scaled >= 0.0) & (scaled <= 1.0))
    return _rotate_backward(g, t.angle) if t.angle else g


def _shift_corner(row, col, t: Transform, h, w, s):
    return (min(max(row + t.dy, 0), h - s), min(max(col + t.dx, 0), w - s))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _train_patch(model, dataset, spec, epochs, lr, prng, eot=None, batch_size=1):
    if not 0 <= spec.target_class < model.class_count:
        raise ValueError(f"target class {spec.target_class} outside model classes")
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    h, w = dataset.image_shape[:2]
    s = spec.side
    make_mask(h, w, spec, Prng(0))  # bounds check only
    pixels = prng.random((s, s, 3))
    steps = -(-n // batch_size)
    target = np.full(batch_size, spec.target_class)
    for _ in range(epochs):
        for _ in range(steps):
            idx = [prng.below(n) for _ in range(batch_size)]
            batch = dataset.images[idx].copy()
            placed = []
            for img in batch:
                _, row, col = make_mask(h, w, spec, prng)
                t = sample_transform(prng, eot) if eot is not None else Transform()
                row, col = _shift_corner(row, col, t, h, w, s)
                img[row : row + s, col : col + s] = apply_transform(pixels, t)
                placed.append((t, row, col))
            # cross-entropy against the target is minus its log-probability
            _, _, dx = loss_and_gradients(model, batch, target, need_params=False)
            ascent = np.zeros_like(pixels)
            for g, (t, row, col) in zip(dx, placed):
                ascent -= transform_backward(g[row : row + s, col : col + s], pixels, t)
            # loss is a batch mean, so ascent is already averaged
            pixels = np.clip(pixels + lr * ascent, 0.0, 1.0)
    return pixels


def train_patch_lavan(model: ClassifierModel, dataset: LabeledDataset, spec: PatchSpec,
                      epochs: int, lr: float, prng: Prng, batch_size: int = 1) -> TrainedPatch:
    """Fixed-location patch: gradient ascent on log p(target) w.r.t. patch pixels."""
    if not isinstance(spec.placement, Fixed):
        raise ValueError("LaVAN-style training needs a Fixed placement")
    pixels = _train_patch(model, dataset, spec, epochs, lr, prng, None, batch_size)
    return TrainedPatch(pixels, spec, epochs)


def train_patch_googleap(model: ClassifierModel, dataset: LabeledDataset, spec: PatchSpec,
                         eot: EotParams, epochs: int, lr: float, prng: Prng,
                         batch_size: int = 1) -> TrainedPatch:
    """Universal patch: random location and one EOT draw per pasted image."""
    if not isinstance(spec.placement, Random):
        raise ValueError("GoogleAp-style training needs a Random placement")
    pixels = _train_patch(model, dataset, spec, epochs, lr, prng, eot, batch_size)
    return TrainedPatch(pixels, spec, epochs)


def attack_success_rate(model: ClassifierModel, patch: TrainedPatch, dataset: LabeledDataset,
                        prng: Prng | None = None):
    """Return ``(targeted_success, accuracy_under_attack)``.

    Targeted success only counts images whose true label differs from the
    target; it is ``nan`` when there are none.
    """
    h, w = dataset.image_shape[:2]
    corners = sample_corners(patch.spec, h, w, len(dataset), prng)
    preds = predict(model, paste_batch(dataset.images, patch.pixels, corners))
    acc = float(np.mean(preds == dataset.labels))
    others = dataset.labels != patch.spec.target_class
    success = float(np.mean(preds[others] == patch.spec.target_class)) if others.any() else float("nan")
    return success, acc
