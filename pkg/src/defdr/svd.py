"""Truncated-SVD defense.

Factorization is a one-sided (Hestenes) Jacobi SVD: columns are rotated
pairwise until mutually orthogonal, then their norms are the singular values.
The kernel is compiled with numba and loops over a stack of matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 60


@dataclass
class SvdFactors:
    u: np.ndarray      # (m, r)
    sigma: np.ndarray  # (r,) descending
    vt: np.ndarray     # (r, n)

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.vt.shape[1]

    @property
    def r(self) -> int:
        return len(self.sigma)


@numba.njit(cache=True)
def _jacobi_kernel(work, m, tol, max_sweeps):
    """In-place one-sided Jacobi on ``work`` of shape (B, n, m + n).

    Row j of each matrix holds column j of A followed by column j of V, so a
    rotation of rows p and q updates both factors at once.
    """
    b, n, width = work.shape
    for i in range(b):
        w = work[i]
        for _ in range(max_sweeps):
            rotated = False
            for p in range(n - 1):
                for q in range(p + 1, n):
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for k in range(m):
                        x = w[p, k]
                        y = w[q, k]
                        alpha += x * x
                        beta += y * y
                        gamma += x * y
                    if abs(gamma) <= tol * np.sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    if zeta == 0.0:
                        t = 1.0
                    else:
                        t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = c * t
                    for k in range(width):
                        x = w[p, k]
                        y = w[q, k]
                        w[p, k] = c * x - s * y
                        w[q, k] = s * x + c * y
            if not rotated:
                break


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns flagged ``~good`` by an orthonormal completion."""
    m, r = u.shape
    keep = u[:, good]
    q, _ = np.linalg.qr(np.concatenate([keep, np.eye(m)], axis=1))
    # QR of [keep | I] reproduces span(keep) first, up to column signs
    fill = iter(range(keep.shape[1], m))
    out = u.copy()
    for j in np.flatnonzero(~good):
        out[:, j] = q[:, next(fill)]
    return out


def svd_batch(mats: np.ndarray, tol: float = 4 * EPS):
    """Thin SVD of every matrix in a ``(B, m, n)`` stack.

    Returns ``(u, sigma, vt)`` shaped ``(B, m, r)``, ``(B, r)``, ``(B, r, n)``
    with ``r = min(m, n)`` and singular values sorted descending.
    """
    a = np.array(mats, dtype=np.float64, copy=True)
    if a.ndim != 3:
        raise ValueError("expected a (B, m, n) stack")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    b, m, n = a.shape
    if m < 1 or n < 1:
        raise ValueError("matrix dimensions must be positive")
    transposed = m < n
    if transposed:
        a = a.transpose(0, 2, 1).copy()
        m, n = n, m
    work = np.concatenate([a.transpose(0, 2, 1), np.broadcast_to(np.eye(n), (b, n, n))], axis=2)
    _jacobi_kernel(work, m, tol, MAX_SWEEPS)

    a = work[:, :, :m].transpose(0, 2, 1)
    v = work[:, :, m:].transpose(0, 2, 1)
    sigma = np.linalg.norm(a, axis=1)
    order = np.argsort(-sigma, axis=1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=1)
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    floor = max(m, n) * EPS * sigma[:, :1]
    good = sigma > floor
    u = a / np.where(good, sigma, 1.0)[:, None, :]
    sigma = np.where(good, sigma, 0.0)
    for i in np.flatnonzero(~good.all(axis=1)):
        u[i] = _complete_basis(u[i], good[i])

    vt = v.transpose(0, 2, 1)
    if transposed:
        return vt.transpose(0, 2, 1), sigma, u.transpose(0, 2, 1)
    return u, sigma, vt


def svd_channel(mat: np.ndarray) -> SvdFactors:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    u, s, vt = svd_batch(mat[None])
    return SvdFactors(u[0], s[0], vt[0])


def rank_for_info(sigma, info: float, mode: str = "mass") -> int:
    """Smallest k whose leading singular values keep fraction ``info``.

    ``mode="mass"`` measures sum(sigma); ``"energy"`` measures sum(sigma**2).
    """
    return int(_ranks_for_info(np.asarray(sigma, dtype=np.float64)[None], info, mode)[0])


def _ranks_for_info(sigma: np.ndarray, info: float, mode: str = "mass") -> np.ndarray:
    if not 0.0 < info <= 1.0:
        raise ValueError("info fraction must lie in (0, 1]")
    if mode not in ("mass", "energy"):
        raise ValueError(f"unknown mode {mode!r}")
    w = sigma if mode == "mass" else sigma**2
    cum = np.cumsum(w, axis=-1)
    total = cum[..., -1:]
    if np.any(total <= 0):
        raise ValueError("all singular values are zero")
    # relative slack so that info=1 ignores round-off sized tails
    reached = cum >= (info - 1e-12) * total
    return reached.argmax(axis=-1) + 1


def reconstruct_rank_k(f: SvdFactors, k: int) -> np.ndarray:
    if not 1 <= k <= f.r:
        raise ValueError(f"rank {k} outside [1, {f.r}]")
    return (f.u[:, :k] * f.sigma[:k]) @ f.vt[:k]


def _reconstruct_batch(u, sigma, vt, ks):
    keep = np.arange(sigma.shape[-1]) < ks[..., None]
    return (u * (sigma * keep)[..., None, :]) @ vt


def _channel_stack(images: np.ndarray) -> np.ndarray:
    # (N, H, W, 3) -> (N*3, H, W)
    n, h, w, c = images.shape
    return images.transpose(0, 3, 1, 2).reshape(n * c, h, w)


def _unstack(mats: np.ndarray, n: int) -> np.ndarray:
    _, h, w = mats.shape
    return mats.reshape(n, 3, h, w).transpose(0, 2, 3, 1)


def defend_svd(x: np.ndarray, info: float, mode: str = "mass") -> np.ndarray:
    """Per-channel rank truncation keeping ``info`` of the singular-value mass."""
    return defend_svd_many(np.asarray(x)[None], [info], mode)[info][0]


def defend_svd_many(images: np.ndarray, infos, mode: str = "mass", chunk: int = 512) -> dict:
    """Defend a batch at several fractions, factorizing each channel once."""
    images = np.asarray(images, dtype=np.float64)
    out = {info: np.empty_like(images) for info in infos}
    for start in range(0, len(images), chunk):
        part = images[start : start + chunk]
        u, s, vt = svd_batch(_channel_stack(part))
        for info in infos:
            ks = _ranks_for_info(s, info, mode)
            rec = _unstack(_reconstruct_batch(u, s, vt, ks), len(part))
            out[info][start : start + chunk] = np.clip(rec, 0.0, 1.0)
    return out
