"""``defdr`` command line: exit 0 on success, 2 on config errors, 3 on stage failures."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .attacks import EotParams, PatchSpec, Random, patch_from_sidecar, train_patch_googleap, train_patch_lavan
from .classifier import TrainConfig, accuracy, load_checkpoint, save_checkpoint, train
from .core import ManifestError, PpmError, Prng, gen_shapes_dataset, load_manifest, read_ppm, write_dataset, write_ppm
from .defense import DefenseConfig, defend
from .harness import (ConfigError, HashMismatch, StageError, load_config, load_report, read_report_csv,
                      reference_report, render_report, run_experiment)
from .tsne import TsneConfig
from .tuning import parse_grid, tune_info

log = logging.getLogger("defdr")

EXIT_CONFIG = 2
EXIT_STAGE = 3


def _dataset(path):
    path = Path(path)
    manifest = path / "manifest.csv" if path.is_dir() else path
    return load_manifest(manifest.read_text(encoding="utf-8"), manifest.parent)


def _defense_args(p, with_info=True):
    p.add_argument("--method", choices=("svd", "tsne"), default="svd")
    if with_info:
        p.add_argument("--info", type=float, default=0.95)
    p.add_argument("--svd-mode", choices=("mass", "energy"), default="mass")
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--perplexity", type=float, default=10.0)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--kernel", choices=("student-t", "gaussian"), default="student-t")
    p.add_argument("--seed", type=int, default=0)


def _defense_cfg(args, info=1.0):
    tsne = TsneConfig(perplexity=args.perplexity, iterations=args.iterations, kernel=args.kernel, seed=args.seed)
    return DefenseConfig(args.method, info, args.svd_mode, tsne, args.block)


def cmd_gen_data(args):
    ds = gen_shapes_dataset(args.seed, args.count, args.side)
    write_dataset(ds, args.out)
    log.info("wrote %d images to %s", len(ds), args.out)


def cmd_train(args):
    ds = _dataset(args.data)
    cfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.momentum, args.seed)
    model, history = train(None, ds, cfg)
    Path(args.out).write_bytes(save_checkpoint(model))
    log.info("final loss %.4f, train acc %.4f", history[-1], accuracy(model, ds))


def cmd_attack(args):
    model = load_checkpoint(Path(args.model).read_bytes())
    ds = _dataset(args.data)
    prng = Prng(args.seed)
    if args.kind == "googleap":
        eot = EotParams(args.max_translation, args.max_rotation, (args.brightness_lo, args.brightness_hi))
        spec = PatchSpec(args.size, Random(), args.target)
        patch = train_patch_googleap(model, ds, spec, eot, args.epochs, args.lr, prng, args.batch_size)
    else:
        spec = PatchSpec.upper_right(args.size, ds.image_shape[1], args.target)
        patch = train_patch_lavan(model, ds, spec, args.epochs, args.lr, prng, args.batch_size)
    patch.seed = args.seed
    out = Path(args.out)
    write_ppm(out, patch.pixels)
    out.with_suffix(".json").write_text(json.dumps(patch.sidecar(), indent=2) + "\n")


def cmd_defend(args):
    img = read_ppm(args.input)
    write_ppm(args.output, defend(img, _defense_cfg(args, args.info)))


def cmd_tune(args):
    model = load_checkpoint(Path(args.model).read_bytes())
    ds = _dataset(args.data)
    patch_path = Path(args.patch)
    patch = patch_from_sidecar(read_ppm(patch_path), patch_path.with_suffix(".json").read_text())
    finetune = None
    if args.finetune_epochs:
        finetune = TrainConfig(args.finetune_epochs, 32, args.finetune_lr, 0.9, args.seed)
    result = tune_info(model, ds, patch, _defense_cfg(args), parse_grid(args.grid), args.tolerance,
                       Prng(args.seed), finetune)
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("chosen I=%s (constraint satisfied: %s)", result.chosen_info, result.constraint_satisfied)


def cmd_run(args):
    cfg = load_config(Path(args.config).read_text(encoding="utf-8"))
    if args.out_dir:
        cfg = dataclasses.replace(cfg, output_dir=args.out_dir)
    run_experiment(cfg, log=log.info)
    log.info("report written to %s", cfg.output_dir)


def cmd_report(args):
    if args.reference:
        report = reference_report(args.reference)
    elif args.csv:
        report = read_report_csv(Path(args.csv).read_text(encoding="utf-8"))
    else:
        report = load_report(args.dir, force=args.force)
    sys.stdout.write(render_report(report, args.format, args.expect_hash, args.force))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defdr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset as PPM + manifest")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the classifier on a manifest dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="train an adversarial patch")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("googleap", "lavan"), default="googleap")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--target", type=int, default=4)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=10.0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-translation", type=int, default=0)
    p.add_argument("--max-rotation", type=float, default=0.0)
    p.add_argument("--brightness-lo", type=float, default=1.0)
    p.add_argument("--brightness-hi", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="patch PPM; a JSON sidecar is written next to it")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="defend a single PPM image")
    p.add_argument("input")
    p.add_argument("output")
    _defense_args(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("tune", help="sweep the information fraction; prints CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--patch", required=True, help="patch PPM with its JSON sidecar")
    p.add_argument("--grid", default="0.90:0.99:0.01")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--finetune-lr", type=float, default=0.01)
    p.add_argument("--out")
    _defense_args(p, with_info=False)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("run", help="run a full experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="render a report as markdown, csv or svg")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dir", help="experiment output directory")
    src.add_argument("--csv", help="report CSV file")
    src.add_argument("--reference", choices=("googleap", "lavan"), help="bundled published tables")
    p.add_argument("--format", choices=("markdown", "csv", "svg"), default="markdown")
    p.add_argument("--expect-hash")
    p.add_argument("--force", action="store_true", help="render despite config-hash mismatch")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except (OSError, PpmError, ManifestError, HashMismatch) as exc:
        log.error("%s", exc)
        return EXIT_STAGE
    except (ConfigError, ValueError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
