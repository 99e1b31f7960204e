"""Training-phase sweep of the information fraction.

For every grid value the defended accuracy is measured on clean images and on
their patched twins; the chosen fraction maximises patched accuracy among the
values whose clean-accuracy drop stays under the tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import TrainedPatch, paste_batch, sample_corners
from .classifier import ClassifierModel, TrainConfig, accuracy, predict, train
from .core import LabeledDataset, Prng
from .defense import DefendedCache, DefenseConfig, defend_many

DEFAULT_GRID = tuple(round(0.99 - 0.01 * i, 2) for i in range(10))


@dataclass(frozen=True)
class TuneRow:
    info: float
    robust_acc: float      # defended, patched
    clean_acc: float       # defended, clean


@dataclass
class TuneResult:
    chosen_info: float
    rows: list[TuneRow]
    baseline_clean_acc: float
    constraint_satisfied: bool
    model: ClassifierModel | None = None  # fine-tuned copy, when fine-tuning ran

    def row(self, info: float) -> TuneRow:
        return next(r for r in self.rows if r.info == info)

    def to_csv(self) -> str:
        lines = ["info,robust_acc,clean_acc,clean_drop,chosen"]
        for r in self.rows:
            lines.append(
                f"{r.info!r},{r.robust_acc!r},{r.clean_acc!r},"
                f"{self.baseline_clean_acc - r.clean_acc!r},{int(r.info == self.chosen_info)}"
            )
        return "\n".join(lines) + "\n"


def parse_grid(text: str) -> list[float]:
    """``"0.90:0.99:0.01"`` (inclusive range) or a comma list; returned descending."""
    if ":" in text:
        lo, hi, step = (float(t) for t in text.split(":"))
        if step <= 0 or lo > hi:
            raise ValueError(f"bad grid range {text!r}")
        count = int(round((hi - lo) / step)) + 1
        values = [round(lo + i * step, 10) for i in range(count)]
    else:
        values = [float(t) for t in text.split(",") if t.strip()]
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise ValueError(f"grid values must lie in (0, 1]: {text!r}")
    return sorted(set(values), reverse=True)


def select_info(rows: list[TuneRow], baseline_clean: float, tolerance: float):
    """Return ``(chosen_info, constraint_satisfied)``; ties go to the larger fraction."""
    if not rows:
        raise ValueError("no rows to select from")
    # accuracies are count ratios, so a drop sitting exactly on the tolerance
    # can land a few ulps either side of it; treat it as a violation
    feasible = [r for r in rows if baseline_clean - r.clean_acc < tolerance - 1e-12]
    if feasible:
        best = max(feasible, key=lambda r: (r.robust_acc, r.info))
        return best.info, True
    best = min(rows, key=lambda r: (baseline_clean - r.clean_acc, -r.info))
    return best.info, False


def patched_twins(dataset: LabeledDataset, patch: TrainedPatch, prng: Prng) -> np.ndarray:
    h, w = dataset.image_shape[:2]
    corners = sample_corners(patch.spec, h, w, len(dataset), prng)
    return paste_batch(dataset.images, patch.pixels, corners)


def _round_robin(defended: dict, grid, n):
    return np.stack([defended[grid[i % len(grid)]][i] for i in range(n)])


def finetune_model(model: ClassifierModel, images: LabeledDataset, patch: TrainedPatch,
                   method: DefenseConfig, grid, cfg: TrainConfig, prng: Prng,
                   cache: DefendedCache | None = None, cache_name: str = "finetune"):
    """Retrain a copy of ``model`` on defended clean images and their patched twins.

    Both halves carry the true labels. Image ``i`` of each half is defended at
    ``grid[i % len(grid)]`` so one model serves the whole sweep.
    """
    n = len(images)
    adv = patched_twins(images, patch, prng)
    clean_def = (cache.defend_many(cache_name, images.images, method, grid) if cache
                 else defend_many(images.images, method, grid))
    adv_def = defend_many(adv, method, grid)
    mixed = np.concatenate([_round_robin(clean_def, grid, n), _round_robin(adv_def, grid, n)])
    labels = np.concatenate([images.labels, images.labels])
    tuned, _ = train(model, LabeledDataset(mixed, labels, images.class_count), cfg)
    return tuned


def tune_info(model: ClassifierModel, clean_set: LabeledDataset, patch: TrainedPatch,
              method: DefenseConfig, grid, tolerance: float = 0.02, prng: Prng | None = None,
              finetune: TrainConfig | None = None, finetune_set: LabeledDataset | None = None,
              cache: DefendedCache | None = None) -> TuneResult:
    """Sweep ``grid`` and pick the information fraction.

    With ``finetune`` set, a copy of the model is first retrained (see
    :func:`finetune_model`) on ``finetune_set``, or on ``clean_set`` itself when
    no separate set is given. ``cache`` reuses defended clean images across
    calls that share the same ``clean_set`` and ``finetune_set``.
    """
    grid = sorted(set(float(g) for g in grid), reverse=True)
    if not grid or any(not 0.0 < g <= 1.0 for g in grid):
        raise ValueError("grid must be non-empty with values in (0, 1]")
    if len(clean_set) == 0:
        raise ValueError("empty clean set")
    prng = Prng(0) if prng is None else prng

    adv = patched_twins(clean_set, patch, prng)
    clean_def = (cache.defend_many("tune", clean_set.images, method, grid) if cache
                 else defend_many(clean_set.images, method, grid))
    adv_def = defend_many(adv, method, grid)

    baseline = accuracy(model, clean_set)
    tuned = None
    if finetune is not None:
        if finetune_set is None:
            finetune_set, name = clean_set, "tune"
        else:
            name = "finetune"
        tuned = finetune_model(model, finetune_set, patch, method, grid, finetune, prng, cache, name)
    judge = tuned if tuned is not None else model

    rows = []
    for info in grid:
        robust = float(np.mean(predict(judge, adv_def[info]) == clean_set.labels))
        clean = float(np.mean(predict(judge, clean_def[info]) == clean_set.labels))
        rows.append(TuneRow(info, robust, clean))
    chosen, ok = select_info(rows, baseline, tolerance)
    return TuneResult(chosen, rows, baseline, ok, tuned)
