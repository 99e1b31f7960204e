"""Method-agnostic front end for the two dimensionality-reduction defenses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .svd import defend_svd_many
from .tsne import TsneConfig, defend_tsne_many

METHODS = ("svd", "tsne", "identity")


@dataclass(frozen=True)
class DefenseConfig:
    method: str = "svd"
    info: float = 1.0
    svd_mode: str = "mass"
    tsne: TsneConfig = field(default_factory=TsneConfig)
    block: int = 4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown defense method {self.method!r}")
        if not 0.0 < self.info <= 1.0:
            raise ValueError("info fraction must lie in (0, 1]")

    def at(self, info: float) -> "DefenseConfig":
        return replace(self, info=info)

    @property
    def label(self) -> str:
        return {"svd": "SVD", "tsne": "t-SNE", "identity": "none"}[self.method]


def defend_many(images: np.ndarray, cfg: DefenseConfig, infos) -> dict:
    """Defended copies of ``images`` for each fraction in ``infos``.

    The expensive part (factorization or embedding) runs once per image.
    """
    infos = list(infos)
    images = np.asarray(images, dtype=np.float64)
    if cfg.method == "svd":
        return defend_svd_many(images, infos, cfg.svd_mode)
    if cfg.method == "tsne":
        return defend_tsne_many(images, cfg.tsne, infos, cfg.block)
    return {info: images.copy() for info in infos}


class DefendedCache:
    """Memo for defended copies of datasets that do not change between calls.

    Entries are keyed by a caller-chosen name plus the defense settings, so
    the caller is responsible for using one name per fixed image set.
    """

    def __init__(self):
        self._store = {}

    def defend_many(self, name: str, images: np.ndarray, cfg: DefenseConfig, infos) -> dict:
        infos = list(infos)
        key = (name, replace(cfg, info=1.0))
        have = self._store.setdefault(key, {})
        missing = [i for i in infos if i not in have]
        if missing:
            have.update(defend_many(images, cfg, missing))
        return {i: have[i] for i in infos}


def defend(images: np.ndarray, cfg: DefenseConfig) -> np.ndarray:
    """Defend one image ``(H, W, 3)`` or a batch ``(N, H, W, 3)`` at ``cfg.info``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return defend_many(images[None], cfg, [cfg.info])[cfg.info][0]
    return defend_many(images, cfg, [cfg.info])[cfg.info]
