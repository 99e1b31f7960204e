"""Image/dataset primitives, the splitmix64 generator and PPM/CSV I/O.

Images are plain ``numpy`` arrays of shape ``(height, width, 3)`` holding
float64 values in [0, 1]; batches stack them along a leading axis.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

CLASS_NAMES = ("circle", "square_outline", "triangle", "plus", "stripes")
NOISE_AMPLITUDE = 0.05


class PpmError(ValueError):
    """Malformed PPM payload; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------
# PRNG
# --------------------------------------------------------------------------


class Prng:
    """splitmix64. Single owner; hand out ``split()`` children instead of sharing."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def u64_array(self, n: int) -> np.ndarray:
        """``n`` consecutive outputs, identical to ``n`` calls of :meth:`next_u64`."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def random(self, shape=None):
        """Uniform floats in [0, 1) built from the top 53 bits."""
        if shape is None:
            return (self.next_u64() >> 11) * 2.0**-53
        n = int(np.prod(shape))
        bits = self.u64_array(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def uniform(self, lo: float, hi: float, shape=None):
        return lo + (hi - lo) * self.random(shape)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integers(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi]."""
        return lo + self.below(hi - lo + 1)

    def normal(self, shape=None, scale: float = 1.0):
        """Box-Muller, cosine branch only, so each draw costs two uniforms."""
        if shape is None:
            u1, u2 = self.random(), self.random()
            return scale * math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2 * math.pi * u2)
        n = int(np.prod(shape))
        u = self.random((n, 2))
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2 * np.pi * u[:, 1])
        return scale * z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def split(self) -> "Prng":
        return Prng(self.next_u64())


# --------------------------------------------------------------------------
# Images and datasets
# --------------------------------------------------------------------------


def make_image(data) -> np.ndarray:
    """Validate shape, promote to float64 and clamp into [0, 1]."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return _to_bytes(img).astype(np.float64) / 255.0


def _to_bytes(img: np.ndarray) -> np.ndarray:
    # round-half-up; np.round is half-to-even and would map 126.5 to 126
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, 3) float64
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.images, self.labels.tolist()))

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.image_shape != self.image_shape:
            raise ValueError("image dimensions differ")
        return LabeledDataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            max(self.class_count, other.class_count),
        )


def _shape_mask(label: int, side: int, prng: Prng) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    r = prng.uniform(0.2, 0.35) * side
    cy = prng.uniform(r, side - 1 - r)
    cx = prng.uniform(r, side - 1 - r)
    dy, dx = yy - cy, xx - cx
    thick = max(1.5, 0.3 * r)
    if label == 0:
        return dy**2 + dx**2 <= r**2
    if label == 1:
        cheb = np.maximum(np.abs(dy), np.abs(dx))
        return (cheb <= r) & (cheb >= r - thick)
    if label == 2:
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if label == 3:
        half = thick / 2.0 + 0.5
        return ((np.abs(dy) <= half) & (np.abs(dx) <= r)) | ((np.abs(dx) <= half) & (np.abs(dy) <= r))
    if label == 4:
        period = prng.integers(4, 7)
        phase = prng.below(period)
        band = ((yy.astype(np.int64) + phase) % period) < period // 2
        return band & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    raise ValueError(f"unknown class {label}")


def gen_shapes_dataset(seed: int, n: int, image_side: int = 32) -> LabeledDataset:
    """Synthetic 5-class shapes set, balanced to within one image per class."""
    k = len(CLASS_NAMES)
    if image_side < 16:
        raise ValueError("image_side must be at least 16")
    if n < k:
        raise ValueError(f"need at least {k} images for {k} classes")
    prng = Prng(seed)
    labels = (np.arange(n) % k)[prng.permutation(n)]
    images = np.empty((n, image_side, image_side, 3))
    for i, label in enumerate(labels):
        mask = _shape_mask(int(label), image_side, prng)[..., None]
        bg = prng.uniform(0.0, 0.45, 3)
        fg = prng.uniform(0.55, 1.0, 3)
        noise = prng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, (image_side, image_side, 3))
        images[i] = np.clip(np.where(mask, fg, bg) + noise, 0.0, 1.0)
    return LabeledDataset(images, labels, k)


# --------------------------------------------------------------------------
# PPM
# --------------------------------------------------------------------------


def _header_token(data: bytes, pos: int):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PpmError("truncated header", start)
    return data[start:pos], start, pos


def load_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise PpmError(f"unsupported magic {data[:2]!r}", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _header_token(data, pos)
        if not tok.isdigit():
            raise PpmError(f"non-numeric {name} {tok!r}", start)
        values.append(int(tok))
    width, height, maxval = values
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}", start)
    if width < 1 or height < 1:
        raise PpmError("zero image dimension", start)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise PpmError(f"truncated payload: need {need} bytes, have {len(data) - pos}", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return raw.reshape(height, width, 3).astype(np.float64) / 255.0


def save_ppm(img: np.ndarray) -> bytes:
    img = make_image(img)
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + _to_bytes(img).tobytes()


def read_ppm(path) -> np.ndarray:
    return load_ppm(Path(path).read_bytes())


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(save_ppm(img))


# --------------------------------------------------------------------------
# CSV manifest
# --------------------------------------------------------------------------


def load_manifest(csv_text: str, base_dir) -> LabeledDataset:
    """Read a ``path,label`` manifest. Data rows are numbered from 1 in errors."""
    base = Path(base_dir)
    reader = csv.reader(io.StringIO(csv_text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["path", "label"]:
        raise ManifestError("header must be 'path,label'")
    images, labels = [], []
    for rowno, row in enumerate(reader, start=1):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2:
            raise ManifestError(f"row {rowno}: expected 2 fields, got {len(row)}")
        rel, label = row[0].strip(), row[1].strip()
        try:
            label_id = int(label)
        except ValueError:
            raise ManifestError(f"row {rowno}: non-integer label {label!r}") from None
        if label_id < 0:
            raise ManifestError(f"row {rowno}: negative label {label_id}")
        path = base / rel
        if not path.is_file():
            raise ManifestError(f"row {rowno}: missing file {path}")
        try:
            img = read_ppm(path)
        except PpmError as exc:
            raise ManifestError(f"row {rowno}: {exc}") from exc
        if images and img.shape != images[0].shape:
            raise ManifestError(
                f"row {rowno}: dimension mismatch {img.shape[:2]} vs {images[0].shape[:2]}"
            )
        images.append(img)
        labels.append(label_id)
    if not images:
        raise ManifestError("manifest lists no images")
    return LabeledDataset(np.stack(images), np.array(labels), max(labels) + 1)


def write_dataset(dataset: LabeledDataset, out_dir) -> Path:
    """Write every image as a PPM plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = ["path,label"]
    for i, (img, label) in enumerate(dataset):
        rel = f"images/{i:05d}.ppm"
        write_ppm(out / rel, img)
        lines.append(f"{rel},{label}")
    manifest = out / "manifest.csv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
