"""Experiment config, end-to-end runner and report rendering."""

from __future__ import annotations

import csv
import dataclasses
import datetime
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .attacks import (EotParams, PatchSpec, Random, TrainedPatch, paste_batch, sample_corners,
                      train_patch_googleap, train_patch_lavan)
from .classifier import ClassifierModel, TrainConfig, accuracy, predict, save_checkpoint, train
from .core import LabeledDataset, Prng, gen_shapes_dataset, write_ppm
from .defense import DefendedCache, DefenseConfig, defend_many
from .tsne import TsneConfig
from .tuning import parse_grid, tune_info

MODEL_NAME = "DeskCNN"
REPORT_FORMATS = ("markdown", "csv", "svg")
CSV_FIELDS = ("patch_size", "model", "method", "clean_acc", "attacked_acc", "info",
              "robust_with_patch", "robust_without_patch")
PERCENT_FIELDS = CSV_FIELDS[3:]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, context: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed ({context}): {cause}")
        self.stage = stage
        self.context = context


class HashMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "googleap"
    target_class: int = 4
    epochs: int = 30
    learning_rate: float = 10.0
    batch_size: int = 16
    eot: EotParams = EotParams()


@dataclass(frozen=True)
class MethodConfig:
    method: str
    grid: tuple[float, ...] = tuple(round(0.99 - 0.01 * i, 2) for i in range(10))
    svd_mode: str = "mass"
    tsne: TsneConfig = TsneConfig()
    block: int = 4

    def defense(self) -> DefenseConfig:
        return DefenseConfig(self.method, max(self.grid), self.svd_mode, self.tsne, self.block)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    image_side: int = 32
    train_count: int = 2000
    attack_count: int = 1000
    tune_count: int = 500
    test_count: int = 500
    patch_sizes: tuple[int, ...] = (4, 6, 8, 10, 12)
    attack: AttackConfig = AttackConfig()
    defenses: tuple[MethodConfig, ...] = (MethodConfig("svd"), MethodConfig("tsne"))
    tolerance: float = 0.02
    classifier: TrainConfig = TrainConfig()
    finetune: TrainConfig | None = None
    finetune_count: int = 1000  # leading training images reused for fine-tuning
    output_dir: str = "defdr-out"

    def __post_init__(self):
        if self.image_side < 16:
            raise ConfigError("image_side must be at least 16")
        for name in ("train_count", "attack_count", "tune_count", "test_count"):
            if getattr(self, name) < 5:
                raise ConfigError(f"{name} must be at least 5")
        if not self.patch_sizes:
            raise ConfigError("patch_sizes is empty")
        for s in self.patch_sizes:
            if not 2 <= s <= self.image_side:
                raise ConfigError(f"patch size {s} invalid for {self.image_side}px images")
        if self.attack.kind not in ("googleap", "lavan"):
            raise ConfigError(f"unknown attack {self.attack.kind!r}")
        if not 0 <= self.attack.target_class < 5:
            raise ConfigError("target_class must name one of the 5 shape classes")
        if not self.defenses:
            raise ConfigError("no defense methods configured")
        for m in self.defenses:
            if m.method not in ("svd", "tsne"):
                raise ConfigError(f"unknown defense method {m.method!r}")
            if m.method == "tsne" and self.image_side % m.block:
                raise ConfigError(f"block {m.block} does not divide {self.image_side}")
        if not 1 <= self.finetune_count <= self.train_count:
            raise ConfigError("finetune_count must lie in [1, train_count]")
        if not 0 < self.tolerance < 1:
            raise ConfigError("tolerance must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attack"]["eot"]["brightness_range"] = list(self.attack.eot.brightness_range)
        del d["classifier"]["seed"]
        if d["finetune"] is not None:
            del d["finetune"]["seed"]
        for m in d["defenses"]:
            m["grid"] = list(m["grid"])
            del m["tsne"]["seed"]
        return d

    def config_hash(self) -> str:
        """Digest of everything that affects results (the output location does not)."""
        d = self.to_dict()
        del d["output_dir"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _strict(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return obj


def _fields(cls, skip=()):
    return [f.name for f in dataclasses.fields(cls) if f.name not in skip]


def _train_cfg(obj, where, seed):
    _strict(obj, _fields(TrainConfig, ("seed",)), where)
    return TrainConfig(**obj, seed=seed)


def config_from_dict(doc: dict, seed_override: int | None = None) -> ExperimentConfig:
    _strict(doc, _fields(ExperimentConfig), "config")
    try:
        seed = int(doc.get("seed", 42)) if seed_override is None else seed_override
        kw = {k: v for k, v in doc.items() if k not in ("attack", "defenses", "classifier", "finetune")}
        kw["seed"] = seed
        if "patch_sizes" in kw:
            kw["patch_sizes"] = tuple(int(s) for s in kw["patch_sizes"])
        if "attack" in doc:
            a = dict(_strict(doc["attack"], _fields(AttackConfig), "attack"))
            if "eot" in a:
                e = dict(_strict(a["eot"], _fields(EotParams), "attack.eot"))
                if "brightness_range" in e:
                    e["brightness_range"] = tuple(e["brightness_range"])
                a["eot"] = EotParams(**e)
            kw["attack"] = AttackConfig(**a)
        methods = []
        for i, m in enumerate(doc.get("defenses", [{"method": "svd"}, {"method": "tsne"}])):
            m = dict(_strict(m, _fields(MethodConfig), f"defenses[{i}]"))
            if "grid" in m:
                g = m["grid"]
                m["grid"] = tuple(parse_grid(g) if isinstance(g, str) else sorted(map(float, g), reverse=True))
            t = _strict(m.get("tsne", {}), _fields(TsneConfig, ("seed",)), f"defenses[{i}].tsne")
            m["tsne"] = TsneConfig(**t, seed=seed)
            methods.append(MethodConfig(**m))
        kw["defenses"] = tuple(methods)
        kw["classifier"] = _train_cfg(doc.get("classifier", {}), "classifier", seed)
        if doc.get("finetune") is not None:
            kw["finetune"] = _train_cfg(doc["finetune"], "finetune", seed)
        cfg = ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(text: str, env=None) -> ExperimentConfig:
    """Parse a JSON config; ``DEFDR_SEED`` in ``env`` overrides its seed."""
    env = os.environ if env is None else env
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    override = env.get("DEFDR_SEED")
    if override is not None:
        try:
            override = int(override)
        except ValueError:
            raise ConfigError(f"DEFDR_SEED must be an integer, got {override!r}") from None
    return config_from_dict(doc, override)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


class EvalRow(NamedTuple):
    clean_acc: float
    attacked_acc: float
    robust_with_patch: float
    robust_without_patch: float


def evaluate(model: ClassifierModel, test_set: LabeledDataset, patch: TrainedPatch,
             defense: DefenseConfig, prng: Prng, defended_model: ClassifierModel | None = None,
             clean_defended: np.ndarray | None = None) -> EvalRow:
    """Four accuracies on one test set: clean, patched, defended patched, defended clean.

    ``defended_model`` (a fine-tuned copy) scores the defended inputs when
    given; ``clean_defended`` lets callers reuse defended clean images.
    """
    h, w = test_set.image_shape[:2]
    if patch.spec.side > min(h, w):
        raise ValueError("patch larger than the test images")
    judge = defended_model if defended_model is not None else model
    labels = test_set.labels
    corners = sample_corners(patch.spec, h, w, len(test_set), prng)
    adv = paste_batch(test_set.images, patch.pixels, corners)
    if clean_defended is None:
        both = defend_many(np.concatenate([test_set.images, adv]), defense, [defense.info])[defense.info]
        clean_defended, adv_defended = both[: len(labels)], both[len(labels):]
    else:
        adv_defended = defend_many(adv, defense, [defense.info])[defense.info]
    return EvalRow(
        accuracy(model, test_set),
        float(np.mean(predict(model, adv) == labels)),
        float(np.mean(predict(judge, adv_defended) == labels)),
        float(np.mean(predict(judge, clean_defended) == labels)),
    )


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    patch_size: str          # e.g. "8×8"
    model: str
    method: str
    clean_acc: Decimal       # fractions in [0, 1], exact
    attacked_acc: Decimal
    info: Decimal
    robust_with_patch: Decimal
    robust_without_patch: Decimal

    def __post_init__(self):
        for name in PERCENT_FIELDS:
            v = getattr(self, name)
            if not Decimal(0) <= v <= Decimal(1):
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class EvalReport:
    rows: list[ReportRow]
    config_hash: str | None = None
    seed: int | None = None
    created: str | None = None
    note: str | None = None  # free-text label, e.g. for reference tables
    meta: dict = field(default_factory=dict)


def fraction(x: float) -> Decimal:
    """Measured accuracy as an exact decimal fraction at 1e-4 resolution."""
    return Decimal(f"{x:.4f}")


def patch_label(side: int) -> str:
    return f"{side}×{side}"


def _pct(d: Decimal) -> str:
    return f"{d.scaleb(2):f}%"


def _parse_pct(text: str, where: str) -> Decimal:
    t = text.strip()
    try:
        return Decimal(t[:-1]).scaleb(-2) if t.endswith("%") else Decimal(t)
    except ArithmeticError:
        raise ValueError(f"{where}: not a number: {text!r}") from None


def read_report_csv(text: str) -> EvalReport:
    """Parse the CSV written by :func:`render_report` (``#`` lines are metadata)."""
    comments = [ln[1:].strip() for ln in text.splitlines() if ln.startswith("#")]
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ValueError(f"report header must be {','.join(CSV_FIELDS)}")
    rows = []
    for i, rec in enumerate(reader, start=1):
        vals = {k: _parse_pct(rec[k], f"row {i} {k}") for k in PERCENT_FIELDS}
        rows.append(ReportRow(rec["patch_size"].replace("x", "×"), rec["model"], rec["method"], **vals))
    report = EvalReport(rows)
    for c in comments:
        key, sep, value = c.partition("=")
        if sep and key.strip() == "config_hash":
            report.config_hash = value.strip()
        elif not sep:
            report.note = c
    return report


def reference_report(name: str = "googleap") -> EvalReport:
    """Published reference table shipped with the package (not reproduced here)."""
    text = resources.files("defdr").joinpath(f"data/reference_{name}.csv").read_text(encoding="utf-8")
    return read_report_csv(text)


def reference_defenses() -> list[tuple[str, Decimal]]:
    text = resources.files("defdr").joinpath("data/reference_defenses.csv").read_text(encoding="utf-8")
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return [(r["defense"], _parse_pct(r["robust_acc"], r["defense"])) for r in csv.DictReader(body)]


def _groups(rows):
    """Rows keyed by (patch_size, model) in first-seen order, plus the method order."""
    groups, methods = {}, []
    for r in rows:
        groups.setdefault((r.patch_size, r.model), {})[r.method] = r
        if r.method not in methods:
            methods.append(r.method)
    return groups, methods


def _markdown(report: EvalReport) -> str:
    groups, methods = _groups(report.rows)
    head = ["Patch Size", "Model", "Clean Acc", "Adv Patch Attack"]
    for m in methods:
        head += [f"{m} Info %", f"{m} Robust (w/ patch)", f"{m} Robust (w/o patch)"]
    lines = []
    if report.note:
        lines += [f"_{report.note}_", ""]
    if report.config_hash:
        lines += [f"<!-- config_hash={report.config_hash} -->", ""]
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for (size, model), by_method in groups.items():
        first = next(iter(by_method.values()))
        cells = [size, model, _pct(first.clean_acc), _pct(first.attacked_acc)]
        for m in methods:
            r = by_method.get(m)
            cells += ["-"] * 3 if r is None else [_pct(r.info), _pct(r.robust_with_patch),
                                                   _pct(r.robust_without_patch)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _csv(report: EvalReport) -> str:
    buf = io.StringIO()
    if report.note:
        buf.write(f"# {report.note}\n")
    if report.config_hash:
        buf.write(f"# config_hash={report.config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in report.rows:
        w.writerow([r.patch_size, r.model, r.method] + [_pct(getattr(r, k)) for k in PERCENT_FIELDS])
    return buf.getvalue()


SVG_COLORS = ("#4c72b0", "#c44e52", "#55a868", "#8172b2", "#ccb974", "#64b5cd")


def _svg(report: EvalReport) -> str:
    groups, methods = _groups(report.rows)
    series = ["clean", "attacked"] + [f"{m} defended" for m in methods]
    bar, gap, top, height, left = 14, 18, 30, 200, 40
    group_w = bar * len(series) + gap
    width = left + group_w * len(groups) + 160
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{top + height + 50}" '
           f'font-family="sans-serif" font-size="11">',
           f'<line x1="{left}" y1="{top + height}" x2="{left + group_w * len(groups)}" '
           f'y2="{top + height}" stroke="black"/>']
    for tick in range(0, 101, 25):
        y = top + height - height * tick / 100
        out.append(f'<text x="{left - 4}" y="{y + 4:.1f}" text-anchor="end">{tick}%</text>')
    for g, ((size, model), by_method) in enumerate(groups.items()):
        first = next(iter(by_method.values()))
        values = [first.clean_acc, first.attacked_acc]
        values += [by_method[m].robust_with_patch if m in by_method else None for m in methods]
        x0 = left + g * group_w + gap / 2
        for k, v in enumerate(values):
            if v is None:
                continue
            h = float(v) * height
            out.append(f'<rect x="{x0 + k * bar:.1f}" y="{top + height - h:.1f}" width="{bar - 2}" '
                       f'height="{h:.1f}" fill="{SVG_COLORS[k % len(SVG_COLORS)]}"><title>{_pct(v)}</title></rect>')
        label = size if len({m for _, m in groups}) == 1 else f"{size} {model}"
        out.append(f'<text x="{x0 + bar * len(series) / 2:.1f}" y="{top + height + 16}" '
                   f'text-anchor="middle">{label}</text>')
    lx = left + group_w * len(groups) + 16
    for k, name in enumerate(series):
        y = top + 14 * k
        out.append(f'<rect x="{lx}" y="{y}" width="10" height="10" fill="{SVG_COLORS[k % len(SVG_COLORS)]}"/>')
        out.append(f'<text x="{lx + 14}" y="{y + 9}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_report(report: EvalReport, fmt: str = "markdown", expected_hash: str | None = None,
                  force: bool = False) -> str:
    """Render as ``markdown``, ``csv`` or ``svg``.

    When ``expected_hash`` is given and differs from the report's config hash
    the render is refused unless ``force`` is set.
    """
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {REPORT_FORMATS}")
    if not report.rows:
        raise ValueError("report has no rows")
    if expected_hash is not None and report.config_hash != expected_hash and not force:
        raise HashMismatch(f"report hash {report.config_hash} != expected {expected_hash}")
    return {"markdown": _markdown, "csv": _csv, "svg": _svg}[fmt](report)


def load_report(out_dir, force: bool = False) -> EvalReport:
    """Read ``report.csv`` and check it against the hash in ``report.json``."""
    out_dir = Path(out_dir)
    report = read_report_csv((out_dir / "report.csv").read_text(encoding="utf-8"))
    meta_path = out_dir / "report.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("config_hash") != report.config_hash and not force:
            raise HashMismatch(f"report.csv hash {report.config_hash} != report.json hash "
                               f"{meta.get('config_hash')}")
        report.seed, report.created, report.meta = meta.get("seed"), meta.get("created"), meta
    return report


def _comparison_markdown() -> str:
    lines = ["_published reference values (GoogleAp attack), not reproduced_", "",
             "| Defense | Robust Accuracy |", "|---|---|"]
    lines += [f"| {name} | {_pct(v)} |" for name, v in reference_defenses()]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


class _Stage:
    def __init__(self, name, context=""):
        self.name, self.context = name, context

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, KeyboardInterrupt)):
            raise StageError(self.name, self.context, exc) from exc
        return False


def stage_seeds(seed: int) -> dict:
    """Independent sub-seeds for every stage, derived from the master seed."""
    prng = Prng(seed)
    names = ("train_data", "attack_data", "tune_data", "test_data", "classifier", "patch", "tune", "eval")
    return {name: prng.next_u64() for name in names}


def stage_prng(seed: int, stage: str, size: int = 0) -> Prng:
    """Generator for one stage of one patch size."""
    return Prng(stage_seeds(seed)[stage] ^ size)


def build_datasets(cfg: ExperimentConfig):
    """``(train, attack, tune, test)`` shapes sets, each from its own sub-seed."""
    seeds = stage_seeds(cfg.seed)
    return tuple(gen_shapes_dataset(seeds[f"{name}_data"], getattr(cfg, f"{name}_count"), cfg.image_side)
                 for name in ("train", "attack", "tune", "test"))


def train_classifier(cfg: ExperimentConfig, train_set: LabeledDataset) -> ClassifierModel:
    seed = stage_seeds(cfg.seed)["classifier"]
    model, _ = train(None, train_set, dataclasses.replace(cfg.classifier, seed=seed))
    return model


def train_attack(model, attack_set, side, cfg: ExperimentConfig, prng: Prng) -> TrainedPatch:
    a = cfg.attack
    if a.kind == "googleap":
        spec = PatchSpec(side, Random(), a.target_class)
        return train_patch_googleap(model, attack_set, spec, a.eot, a.epochs, a.learning_rate, prng,
                                    a.batch_size)
    spec = PatchSpec.upper_right(side, cfg.image_side, a.target_class)
    return train_patch_lavan(model, attack_set, spec, a.epochs, a.learning_rate, prng, a.batch_size)


def defend_and_evaluate(cfg: ExperimentConfig, model, tune_set, test_set, finetune_set, patch: TrainedPatch,
                        mc: MethodConfig, cache: DefendedCache | None = None):
    """Tune one method against one patch, then score it on the test set.

    Returns ``(TuneResult, EvalRow)``. ``cache`` keeps defended clean images
    across patch sizes, since those do not depend on the patch.
    """
    size = patch.spec.side
    context = f"patch {size}, {mc.method}"
    base = mc.defense()
    cache = DefendedCache() if cache is None else cache
    with _Stage("tune", context):
        tuned = tune_info(model, tune_set, patch, base, mc.grid, cfg.tolerance,
                          stage_prng(cfg.seed, "tune", size), cfg.finetune, finetune_set, cache)
    with _Stage("evaluate", context):
        chosen = base.at(tuned.chosen_info)
        clean_def = cache.defend_many("test", test_set.images, chosen, [chosen.info])[chosen.info]
        row = evaluate(model, test_set, patch, chosen, stage_prng(cfg.seed, "eval", size), tuned.model, clean_def)
    return tuned, row


def run_experiment(cfg: ExperimentConfig, log=None) -> EvalReport:
    """data -> train -> per patch size (attack -> tune -> evaluate) for every method.

    Writes ``report.csv``, ``report.md``, ``report.svg`` and ``report.json``
    plus the checkpoint, patches (PPM with JSON sidecar) and tuning sweeps.
    """
    log = log or (lambda msg: None)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    with _Stage("data"):
        train_set, attack_set, tune_set, test_set = build_datasets(cfg)
    with _Stage("train"):
        model = train_classifier(cfg, train_set)
        (out / "model.ckpt").write_bytes(save_checkpoint(model))
        log(f"train: train acc {accuracy(model, train_set):.4f}, test acc {accuracy(model, test_set):.4f}")

    # the clean images do not depend on the patch, so each is defended once per method
    cache = DefendedCache()
    finetune_set = train_set.subset(np.arange(cfg.finetune_count))
    rows = []
    for size in cfg.patch_sizes:
        with _Stage("attack", f"patch {size}"):
            patch = train_attack(model, attack_set, size, cfg, stage_prng(cfg.seed, "patch", size))
            patch.seed = cfg.seed
            write_ppm(out / f"patch_{size}.ppm", patch.pixels)
            (out / f"patch_{size}.json").write_text(json.dumps(patch.sidecar(), indent=2) + "\n")
        for mc in cfg.defenses:
            tuned, row = defend_and_evaluate(cfg, model, tune_set, test_set, finetune_set, patch, mc, cache)
            (out / f"tune_{size}_{mc.method}.csv").write_text(tuned.to_csv())
            log(f"patch {size} {mc.method}: I={tuned.chosen_info} " + " ".join(f"{v:.4f}" for v in row))
            rows.append(ReportRow(patch_label(size), MODEL_NAME, mc.defense().label, fraction(row.clean_acc),
                                  fraction(row.attacked_acc), Decimal(str(tuned.chosen_info)),
                                  fraction(row.robust_with_patch), fraction(row.robust_without_patch)))

    report = EvalReport(rows, cfg.config_hash(), cfg.seed,
                        datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"))
    with _Stage("report"):
        write_report(report, cfg, out)
    return report


def write_report(report: EvalReport, cfg: ExperimentConfig, out: Path) -> None:
    (out / "report.csv").write_text(render_report(report, "csv"), encoding="utf-8")
    md = render_report(report, "markdown") + "\n" + _comparison_markdown()
    (out / "report.md").write_text(md, encoding="utf-8")
    (out / "report.svg").write_text(render_report(report, "svg"), encoding="utf-8")
    meta = {
        "config_hash": report.config_hash,
        "seed": report.seed,
        "created": report.created,
        "config": cfg.to_dict(),
        "rows": [{k: (str(v) if isinstance(v, Decimal) else v) for k, v in dataclasses.asdict(r).items()}
                 for r in report.rows],
    }
    (out / "report.json").write_text(json.dumps(meta, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
