"""Exact t-SNE and the tile-blend image defense built on it.

All internals work on stacks shaped ``(B, n, ...)`` so a batch of images can
be embedded in one pass; the single-set functions wrap a stack of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import Prng

SIGMA_BRACKET = (1e-10, 1e10)
BISECTION_STEPS = 50
PERPLEXITY_RTOL = 1e-3
Q_FLOOR = 1e-12
KERNELS = ("student-t", "gaussian")


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 10.0
    embed_dim: int = 2
    iterations: int = 500
    learning_rate: float = 100.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    kernel: str = "student-t"
    seed: int = 0

    def __post_init__(self):
        if not self.perplexity > 0:
            raise ValueError("perplexity must be positive")
        if self.embed_dim < 1 or self.iterations < 1:
            raise ValueError("embed_dim and iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")

    def check_points(self, n: int):
        if n < 3:
            raise ValueError("t-SNE needs at least 3 points")
        if not self.perplexity < n:
            raise ValueError(f"perplexity {self.perplexity} must be below the point count {n}")


class Bandwidth(NamedTuple):
    sigma: float
    perplexity: float
    converged: bool


# --------------------------------------------------------------------------
# high-dimensional affinities
# --------------------------------------------------------------------------


def _row_distribution(sq, sigma):
    """p_{j|i} for each row of squared distances (self-distance already removed)."""
    shifted = sq - sq.min(axis=-1, keepdims=True)
    e = np.exp(-shifted / (2.0 * sigma[..., None] ** 2))
    return e / e.sum(axis=-1, keepdims=True)


def _perplexity(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=-1)
    return 2.0**h


def _calibrate(sq, target):
    """Geometric bisection of sigma for every row of ``sq`` at once.

    Perplexity grows monotonically with sigma, so halving the bracket in
    log-space 50 times pins sigma to ~1e-13 relative over [1e-10, 1e10].
    """
    lo = np.full(sq.shape[:-1], SIGMA_BRACKET[0])
    hi = np.full(sq.shape[:-1], SIGMA_BRACKET[1])
    for _ in range(BISECTION_STEPS):
        mid = np.sqrt(lo * hi)
        too_wide = _perplexity(_row_distribution(sq, mid)) > target
        hi = np.where(too_wide, mid, hi)
        lo = np.where(too_wide, lo, mid)
    sigma = np.sqrt(lo * hi)
    p = _row_distribution(sq, sigma)
    perp = _perplexity(p)
    converged = np.abs(perp / target - 1.0) <= PERPLEXITY_RTOL
    return p, sigma, perp, converged


def sigma_for_perplexity(sq_dists_row, target_perplexity: float) -> Bandwidth:
    """Gaussian bandwidth whose conditional distribution has the target perplexity.

    ``converged`` is false when the target cannot be reached (for instance all
    distances equal); sigma is then the final bracket midpoint.
    """
    row = np.asarray(sq_dists_row, dtype=np.float64)
    if row.ndim != 1 or len(row) < 2 or not np.all(np.isfinite(row)):
        raise ValueError("need at least two finite squared distances")
    if not 0 < target_perplexity <= len(row):
        raise ValueError("target perplexity must lie in (0, row length]")
    _, sigma, perp, ok = _calibrate(row[None], target_perplexity)
    return Bandwidth(float(sigma[0]), float(perp[0]), bool(ok[0]))


def _sq_dists(x):
    sq = np.einsum("...ij,...ij->...i", x, x)
    d = sq[..., :, None] + sq[..., None, :] - 2.0 * (x @ np.swapaxes(x, -1, -2))
    return np.maximum(d, 0.0)


def _joint_affinities(points, perplexity):
    """Symmetrised P for a stack ``(B, n, d)``; also returns the convergence mask."""
    b, n, _ = points.shape
    d = _sq_dists(points)
    off = ~np.eye(n, dtype=bool)
    d = np.where(off & (d == 0.0), 1e-12, d)
    # drop the diagonal so each row holds its n - 1 neighbours
    rows = d[:, off].reshape(b, n, n - 1)
    cond, _, _, ok = _calibrate(rows, perplexity)
    full = np.zeros((b, n, n))
    full[:, off] = cond.reshape(b, -1)
    return (full + np.swapaxes(full, -1, -2)) / (2.0 * n), ok


def pairwise_affinities(points, perplexity: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) < 3:
        raise ValueError("need an (n, d) array with n >= 3")
    p, _ = _joint_affinities(points[None], perplexity)
    return p[0]


# --------------------------------------------------------------------------
# low-dimensional affinities, cost and gradient
# --------------------------------------------------------------------------


def _kernel(sq, kernel):
    return 1.0 / (1.0 + sq) if kernel == "student-t" else np.exp(-sq)


def _low_dim(y, kernel):
    n = y.shape[-2]
    num = _kernel(_sq_dists(y), kernel)
    num[..., np.arange(n), np.arange(n)] = 0.0
    q = num / num.sum(axis=(-2, -1), keepdims=True)
    q = np.maximum(q, Q_FLOOR)
    q[..., np.arange(n), np.arange(n)] = 0.0
    return q, num


def low_dim_affinities(y, kernel: str = "student-t"):
    """Returns ``(Q, kernel_terms)``; Q is normalised over off-diagonal pairs."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or len(y) < 3:
        raise ValueError("need an (n, e) array with n >= 3")
    if kernel not in KERNELS:
        raise ValueError(f"kernel must be one of {KERNELS}")
    return _low_dim(y, kernel)


def _kl(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / np.where(q > 0, q, 1.0)), 0.0)
    return terms.sum(axis=(-2, -1))


def kl_cost(p, q) -> float:
    """KL(P || Q) in nats over off-diagonal entries; zero-probability terms drop out."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("P and Q differ in shape")
    if p.ndim == 2:
        n = len(p)
        off = ~np.eye(n, dtype=bool)
        p, q = np.where(off, p, 0.0), np.where(off, q, 1.0)
    elif p.ndim == 1:
        p, q = p[None], q[None]
    return float(_kl(p, q))


def _gradient(p, q, num, y, kernel):
    # d KL / d y_i = 4 sum_j (p_ij - q_ij) k_ij (y_i - y_j), with k_ij = 1 for Gaussian
    pq = p - q
    if kernel == "student-t":
        pq = pq * num
    return 4.0 * (pq.sum(axis=-1)[..., None] * y - pq @ y)


def kl_gradient(p, y, kernel: str = "student-t") -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    q, num = low_dim_affinities(y, kernel)
    return _gradient(np.asarray(p, dtype=np.float64), q, num, y, kernel)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------


def _embed(p, cfg: TsneConfig, y0, track_cost=True):
    y = y0.copy()
    step = np.zeros_like(y)
    history = []
    for it in range(cfg.iterations):
        scale = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        q, num = _low_dim(y, cfg.kernel)
        if track_cost:
            history.append(_kl(p, q))
        grad = _gradient(scale * p, q, num, y, cfg.kernel)
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        step = mom * step - cfg.learning_rate * grad
        y = y + step
    hist = np.stack(history, axis=-1) if track_cost else None
    return y, hist


def tsne_embed(points, cfg: TsneConfig, prng: Prng | None = None):
    """Embed ``(n, d)`` points; returns ``(Y, cost_history)``.

    ``cost_history[t]`` is KL(P || Q) at the start of iteration ``t``, always
    measured against the un-exaggerated P.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be (n, d)")
    cfg.check_points(len(points))
    prng = Prng(cfg.seed) if prng is None else prng
    p, _ = _joint_affinities(points[None], cfg.perplexity)
    y0 = prng.normal((1, len(points), cfg.embed_dim), scale=1e-2)
    y, hist = _embed(p, cfg, y0)
    return y[0], hist[0].tolist()


def tsne_embed_many(stack, cfg: TsneConfig, track_cost: bool = False):
    """Embed every point set of a ``(B, n, d)`` stack, each from ``Prng(cfg.seed)``."""
    stack = np.asarray(stack, dtype=np.float64)
    b, n, _ = stack.shape
    cfg.check_points(n)
    p, _ = _joint_affinities(stack, cfg.perplexity)
    y0 = Prng(cfg.seed).normal((n, cfg.embed_dim), scale=1e-2)
    return _embed(p, cfg, np.broadcast_to(y0, (b, n, cfg.embed_dim)), track_cost)


# --------------------------------------------------------------------------
# tile-blend defense
# --------------------------------------------------------------------------


def _tiles(images, block):
    n, h, w, c = images.shape
    if block < 1 or h % block or w % block:
        raise ValueError(f"block {block} must divide the image size {h}x{w}")
    if (h // block) * (w // block) < 3:
        raise ValueError("need at least 3 tiles")
    t = images.reshape(n, h // block, block, w // block, block, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(n, (h // block) * (w // block), block * block * c)


def _untile(tiles, shape, block):
    n, h, w, c = shape
    t = tiles.reshape(n, h // block, w // block, block, block, c).transpose(0, 1, 3, 2, 4, 5)
    return t.reshape(shape)


def similarity_weights(y, kernel: str = "student-t") -> np.ndarray:
    """Row-normalised kernel weights between embedded tiles, zero self-weight."""
    n = y.shape[-2]
    w = _kernel(_sq_dists(y), kernel)
    w[..., np.arange(n), np.arange(n)] = 0.0
    return w / w.sum(axis=-1, keepdims=True)


def defend_tsne(x, cfg: TsneConfig = TsneConfig(), info: float = 0.9, block: int = 4) -> np.ndarray:
    """Blend every tile toward its embedding-space neighbours with weight ``1 - info``."""
    return defend_tsne_many(np.asarray(x)[None], cfg, [info], block)[info][0]


def defend_tsne_many(images, cfg: TsneConfig, infos, block: int = 4, chunk: int = 250) -> dict:
    images = np.asarray(images, dtype=np.float64)
    for info in infos:
        if not 0.0 < info <= 1.0:
            raise ValueError("info fraction must lie in (0, 1]")
    tiles = _tiles(images, block)
    mixed = np.empty_like(tiles)
    for start in range(0, len(tiles), chunk):
        part = tiles[start : start + chunk]
        y, _ = tsne_embed_many(part, cfg)
        mixed[start : start + chunk] = similarity_weights(y, cfg.kernel) @ part
    out = {}
    for info in infos:
        blended = info * tiles + (1.0 - info) * mixed
        out[info] = np.clip(_untile(blended, images.shape, block), 0.0, 1.0)
    return out
