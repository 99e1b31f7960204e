"""Acceptance criteria, each printed as a PASS/FAIL line in the terminal summary.

The desk-scale runs (criteria 2 to 4) share one classifier per seed and one
patch per (seed, size) through the session ``desk`` fixture.
"""

import csv
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from defdr.attacks import sample_corners, paste_batch
from defdr.classifier import predict
from defdr.defense import DefendedCache
from defdr.harness import MethodConfig, defend_and_evaluate, reference_report, render_report, stage_prng

ROOT = Path(__file__).resolve().parents[1]
SEEDS = (42, 43, 44)
SIZES = (4, 6, 8, 10, 12)

def attacked_accuracy(run, patch, seed):
    """Undefended accuracy on the test set with the patch pasted at random corners."""
    h, w = run.test.image_shape[:2]
    corners = sample_corners(patch.spec, h, w, len(run.test), stage_prng(seed, "eval", patch.spec.side))
    adv = paste_batch(run.test.images, patch.pixels, corners)
    return float(np.mean(predict(run.model, adv) == run.test.labels))


# --------------------------------------------------------------------------
# 1. numerical core
# --------------------------------------------------------------------------


def test_c1_numerical_core_suite(verdict):
    files = ["tests/test_svd.py", "tests/test_tsne.py", "tests/test_classifier.py"]
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *files],
                          cwd=ROOT, capture_output=True, text=True)
    seconds = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0 and seconds < 120
    verdict("1 numerical core properties", ok, f"{summary} (limit 120 s)")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert seconds < 120


# --------------------------------------------------------------------------
# 2. attack efficacy
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_c2_attack_efficacy(desk, verdict):
    run = desk.run(42)
    patch = desk.patch(42, 8)
    attacked = attacked_accuracy(run, patch, 42)
    seconds = run.seconds + desk.patch_seconds(42, 8)
    drop = run.test_acc - attacked
    ok = run.train_acc >= 0.95 and run.test_acc >= 0.90 and drop >= 0.30 and seconds < 300
    verdict("2 attack efficacy (seed 42, 8x8)", ok,
            f"train {run.train_acc:.4f} test {run.test_acc:.4f} attacked {attacked:.4f} "
            f"drop {100 * drop:.1f} pts, {seconds:.0f} s (limit 300 s)")
    assert run.train_acc >= 0.95 and run.test_acc >= 0.90
    assert drop >= 0.30
    assert seconds < 300


# --------------------------------------------------------------------------
# 3. defense recovery
# --------------------------------------------------------------------------

RECOVERY = {"svd": 0.50, "tsne": 0.40}


def _recover(desk, seed, mc):
    run = desk.run(seed)
    cfg = run.cfg
    finetune_set = run.train.subset(np.arange(cfg.finetune_count))
    tuned, row = defend_and_evaluate(cfg, run.model, run.tune, run.test, finetune_set, desk.patch(seed, 8), mc,
                                     desk.cache(seed))
    recovery = (row.robust_with_patch - row.attacked_acc) / (row.clean_acc - row.attacked_acc)
    return tuned, row, recovery, row.clean_acc - row.robust_without_patch


@pytest.mark.slow
@pytest.mark.parametrize("method", ["svd", "tsne"])
def test_c3_defense_recovery(desk, verdict, method):
    failures = []
    for seed in SEEDS:
        mc = next(m for m in desk.run(seed).cfg.defenses if m.method == method)
        tuned, row, recovery, clean_drop = _recover(desk, seed, mc)
        ok = recovery >= RECOVERY[method] and clean_drop < 0.02
        verdict(f"3 {method} recovery seed {seed}", ok,
                f"I={tuned.chosen_info} clean {row.clean_acc:.4f} attacked {row.attacked_acc:.4f} "
                f"defended {row.robust_with_patch:.4f} recovery {100 * recovery:.1f}% "
                f"(need {100 * RECOVERY[method]:.0f}%) clean drop {100 * clean_drop:.1f} pts (need < 2)")
        if not ok:
            failures.append(seed)
    assert not failures, f"seeds failing: {failures}"


@pytest.mark.slow
def test_c3_ablation_finetune_without_projection(desk, verdict):
    """Same fine-tuning with the identity map in place of the projection (reported, not a criterion)."""
    mc = MethodConfig("identity", grid=(1.0,))
    for seed in SEEDS:
        _, row, recovery, clean_drop = _recover(desk, seed, mc)
        verdict(f"3 ablation: fine-tune only, seed {seed}", True,
                f"defended {row.robust_with_patch:.4f} recovery {100 * recovery:.1f}% "
                f"clean drop {100 * clean_drop:.1f} pts (informational)")


# --------------------------------------------------------------------------
# 4. threat grows with patch size
# --------------------------------------------------------------------------


@pytest.mark.slow
def test_c4_monotone_threat(desk, verdict):
    means = []
    for size in SIZES:
        means.append(float(np.mean([attacked_accuracy(desk.run(s), desk.patch(s, size), s) for s in SEEDS])))
    steps_ok = [b <= a + 0.03 for a, b in zip(means, means[1:])]
    verdict("4 monotone threat trend", all(steps_ok),
            "mean attacked accuracy " + ", ".join(f"{s}x{s} {m:.4f}" for s, m in zip(SIZES, means)))
    assert all(steps_ok), means


# --------------------------------------------------------------------------
# 5. report fidelity
# --------------------------------------------------------------------------


def test_c5_report_fidelity(verdict):
    md = render_report(reference_report("googleap"), "markdown").splitlines()
    text = (ROOT / "src" / "defdr" / "data" / "reference_googleap.csv").read_text(encoding="utf-8")
    rows = list(csv.DictReader(ln for ln in text.splitlines() if not ln.startswith("#")))
    cells = {tuple(c.strip() for c in ln.strip("|").split("|")) for ln in md if ln.startswith("| ") and "×" in ln}
    missing = []
    for r in rows:
        mine = next((c for c in cells if c[:2] == (r["patch_size"], r["model"])), None)
        off = 4 if r["method"] == "SVD" else 7
        want = (r["clean_acc"], r["attacked_acc"], r["info"], r["robust_with_patch"], r["robust_without_patch"])
        got = None if mine is None else (mine[2], mine[3], mine[off], mine[off + 1], mine[off + 2])
        if got != want:
            missing.append((r["patch_size"], r["model"], r["method"]))
    key_row = "| 38×38 | ResNet50 | 78.4% | 38.8% | 95% | 66.2% | 76.2% | 95% | 65.9% | 76.7% |"
    ok = not missing and key_row in md
    verdict("5 report fidelity", ok, f"{len(rows)} reference rows, {len(missing)} mismatched; key row present: "
            f"{key_row in md}")
    assert ok, missing


# --------------------------------------------------------------------------
# 6. determinism
# --------------------------------------------------------------------------


def test_c6_determinism(tmp_path, verdict):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "defdr.cli", "run", "--config", str(ROOT / "configs" / "smoke.json"),
                               "--out-dir", str(out)], cwd=ROOT, capture_output=True, text=True,
                              env={k: v for k, v in os.environ.items() if k != "DEFDR_SEED"})
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "report.csv").read_bytes())
    ok = outputs[0] == outputs[1]
    verdict("6 determinism (defdr run twice, CSV byte-compare)", ok, f"{len(outputs[0])} bytes")
    assert ok
