"""ttbd command line: train, poison, detect, shapley, repair, evaluate, pipeline, sweep, ablate."""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import repair as rp
from .config import ConfigError, ExperimentConfig
from .data import poison_training_set
from .nn import IDENTITY
from .pipeline import (
    Report, StageError, _row, attribute, cached_model, defender_batches, detect, open_workspace,
    pipeline_report, run_defense, write_artifacts,
)
from .shapley import report_to_text

log = logging.getLogger("ttbd")

SWEEPS = {"batch_size": (50, 100, 200), "rate": (0.05, 0.10, 0.20)}


def default_cache() -> Path:
    return Path(os.environ.get("TTBD_CACHE", Path.home() / ".cache" / "ttbd"))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="thread cap for intra-stage parallelism")
    common.add_argument("--method", choices=("ddp", "teco", "dual"), help="detection method")
    common.add_argument("--sparse", action="store_true", help="pool many low-rate batches, dual detection")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    common.add_argument("--cache", type=Path, default=None, help="checkpoint cache (default $TTBD_CACHE)")
    common.add_argument("--attack", choices=("badnets", "blended", "sig"), help="override the configured attack")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ttbd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train (or load cached) backdoored model"),
        ("poison", "write the defender batch and poisoned training indices"),
        ("detect", "rank defender-batch samples by suspicion"),
        ("shapley", "estimate ASR and ACC neuron Shapley values"),
        ("repair", "select and prune neurons; write the mask"),
        ("pipeline", "detect, attribute, repair and evaluate"),
        ("ablate", "compare TTBD-RAND, TTBD-ACT and TTBD-DDP"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)
    ev = sub.add_parser("evaluate", parents=[common], help="clean ACC and ASR of a model (optionally masked)")
    ev.add_argument("--mask", type=Path, help="mask file written by repair/pipeline")
    sw = sub.add_parser("sweep", parents=[common], help="pipeline across batch sizes or poisoning rates")
    sw.add_argument("--axis", choices=("batch_size", "rate", "both"), default="both")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, detect_method=args.method, attack=args.attack)


# ---------------------------------------------------------------- commands

def cmd_train(cfg, args, ws, model):
    cache = args.cache or default_cache()
    src = cache / f"{cfg.training_digest()}.ttbd"
    args.out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(src, args.out / "model.ttbd")
    if src.with_suffix(".log").exists():
        shutil.copyfile(src.with_suffix(".log"), args.out / "train_log.tsv")
    ev = rp.evaluate(model, IDENTITY, ws.test, ws.spec, args.workers)
    print(f"checkpoint {args.out / 'model.ttbd'}  ACC {ev.acc:.2f}  ASR {ev.asr:.2f}")


def cmd_poison(cfg, args, ws, model):
    args.out.mkdir(parents=True, exist_ok=True)
    poisoned = poison_training_set(ws.train, ws.spec, cfg.poison_rate, cfg.seed)
    idx = np.flatnonzero(poisoned.poison_flags)
    (args.out / "poisoned_train_indices.txt").write_text("".join(f"{i}\n" for i in idx))
    batches = defender_batches(ws, args.sparse)
    np.savez(args.out / "defender_batch.npz", images=np.concatenate([b.images for b in batches]),
             labels=np.concatenate([b.labels for b in batches]),
             poison_flags=np.concatenate([b.poison_flags for b in batches]),
             batch_size=cfg.batch_size)
    flags = np.concatenate([b.poison_flags for b in batches])
    print(f"{len(idx)} poisoned training samples; defender pool {len(flags)} with {int(flags.sum())} triggered")


def _detection(cfg, args, ws, model):
    batches = defender_batches(ws, args.sparse)
    method = "dual" if args.sparse else cfg.detect_method
    report = detect(cfg, model, [b.images for b in batches], method, args.workers)
    flags = np.concatenate([b.poison_flags for b in batches])
    return batches, report, flags


def cmd_detect(cfg, args, ws, model):
    _, report, flags = _detection(cfg, args, ws, model)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "detection.txt").write_text(report.to_text())
    print(f"{report.method}: detected {list(map(int, report.detected))}  "
          f"({int(flags[report.detected].sum())} truly triggered)")


def cmd_shapley(cfg, args, ws, model):
    batches, report, _ = _detection(cfg, args, ws, model)
    images = np.concatenate([b.images for b in batches])
    asr, acc = attribute(cfg, model, images, report, args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "detection.txt").write_text(report.to_text())
    (args.out / "shapley.txt").write_text(report_to_text(asr, acc))
    top = np.argsort(-asr.values, kind="stable")[:5]
    print("top ASR Shapley: " + ", ".join(f"{asr.players[i]}={asr.values[i]:.3f}" for i in top))


def cmd_repair(cfg, args, ws, model):
    run = run_defense(ws, model, sparse=args.sparse, workers=args.workers)
    write_artifacts(run, cfg, args.out)
    print(f"pruned {len(run.mask)} neurons: {' '.join(str(n) for n in sorted(run.mask.pruned))}")


def cmd_evaluate(cfg, args, ws, model):
    mask = rp.load_mask(args.mask)[0] if args.mask else IDENTITY
    ev = rp.evaluate(model, mask, ws.test, ws.spec, args.workers)
    print(f"ACC {ev.acc:.2f}  ASR {ev.asr:.2f}  pruned {ev.neurons_pruned} ({100 * ev.fraction_pruned:.1f}%)")


def cmd_pipeline(cfg, args, ws, model):
    run = run_defense(ws, model, sparse=args.sparse, workers=args.workers)
    write_artifacts(run, cfg, args.out)
    report = pipeline_report(run, cfg)
    report.write(args.out, "report")
    print(report.table())


def sweep_report(cfg, ws, model, axis: str, sparse: bool, workers: int) -> Report:
    rows = []
    for value in SWEEPS[axis]:
        point = replace(cfg, batch_size=value) if axis == "batch_size" else replace(cfg, batch_rate=value)
        run = run_defense(replace(ws, cfg=point), model, sparse=sparse, workers=workers)
        if not rows:
            rows.append({**_row("Before", run.before), axis: "-"})
        rows.append({**_row(f"TTBD-{value:g}" if axis == "batch_size" else f"TTBD-{value:.0%}", run.after),
                     axis: value})
    return Report(f"sweep {axis}", cfg, rows)


def cmd_sweep(cfg, args, ws, model):
    axes = ("batch_size", "rate") if args.axis == "both" else (args.axis,)
    for axis in axes:
        report = sweep_report(cfg, ws, model, axis, args.sparse, args.workers)
        report.write(args.out, f"sweep_{axis}")
        print(report.table())


def ablation_report(cfg, ws, model, workers: int) -> Report:
    runs = [run_defense(ws, model, method="ddp", ablation=a, workers=workers) for a in ("RAND", "ACT")]
    runs.append(run_defense(ws, model, method="ddp", workers=workers))
    rows = [_row("Before", runs[0].before)] + [_row(r.name, r.after) for r in runs]
    return Report("ablation", cfg, rows)


def cmd_ablate(cfg, args, ws, model):
    report = ablation_report(cfg, ws, model, args.workers)
    report.write(args.out, "ablation")
    print(report.table())


COMMANDS = {
    "train": cmd_train, "poison": cmd_poison, "detect": cmd_detect, "shapley": cmd_shapley,
    "repair": cmd_repair, "evaluate": cmd_evaluate, "pipeline": cmd_pipeline, "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        ws = open_workspace(cfg)
        model = cached_model(ws, args.cache or default_cache(), args.workers)
        COMMANDS[args.command](cfg, args, ws, model)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (StageError, rp.RepairError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
