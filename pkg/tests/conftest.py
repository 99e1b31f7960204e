import dataclasses
import json
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
from hypothesis import HealthCheck, settings

from defdr.classifier import accuracy
from defdr.defense import DefendedCache
from defdr.harness import build_datasets, config_from_dict, stage_prng, train_attack, train_classifier

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"


class Desk:
    """Lazily trained desk-scale artifacts, shared by every test in the session."""

    def __init__(self):
        self.doc = json.loads(DESK_CONFIG.read_text())
        self._runs = {}
        self._patches = {}
        self._caches = {}

    def config(self, seed, **overrides):
        cfg = config_from_dict({**self.doc, "seed": seed})
        return dataclasses.replace(cfg, **overrides) if overrides else cfg

    def run(self, seed):
        if seed not in self._runs:
            cfg = self.config(seed)
            t0 = time.perf_counter()
            train_set, attack_set, tune_set, test_set = build_datasets(cfg)
            model = train_classifier(cfg, train_set)
            self._runs[seed] = SimpleNamespace(
                cfg=cfg, train=train_set, attack=attack_set, tune=tune_set, test=test_set, model=model,
                train_acc=accuracy(model, train_set), test_acc=accuracy(model, test_set),
                seconds=time.perf_counter() - t0,
            )
        return self._runs[seed]

    def patch(self, seed, size):
        key = (seed, size)
        if key not in self._patches:
            r = self.run(seed)
            t0 = time.perf_counter()
            patch = train_attack(r.model, r.attack, size, r.cfg, stage_prng(seed, "patch", size))
            self._patches[key] = (patch, time.perf_counter() - t0)
        return self._patches[key][0]

    def cache(self, seed):
        """Defended clean images for one seed, shared across methods and patch sizes."""
        return self._caches.setdefault(seed, DefendedCache())

    def patch_seconds(self, seed, size):
        self.patch(seed, size)
        return self._patches[(seed, size)][1]


@pytest.fixture(scope="session")
def desk():
    return Desk()


VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """``verdict(name, ok, detail)`` records one line for the acceptance summary."""
    lines = request.config.stash[VERDICTS]

    def record(name, ok, detail=""):
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
