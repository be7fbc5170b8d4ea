"""Stage orchestration: train, detect, attribute, repair, evaluate, report.

The harness owns ground truth. Defense stages only ever see batch images;
labels and poison flags are read here for evaluation and reporting.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import repair as rp
from .config import ConfigError, ExperimentConfig
from .data import LabeledDataset, TriggerSpec, concat, default_trigger, load_dataset, make_defender_batch, \
    make_sparse_batches, poison_training_set
from .detect import DDPParams, DetectionReport, dual_detect_sparse, ddp_detect, teco_detect
from .nn import ARCHITECTURES, IDENTITY, Model, PruneMask, TrainParams, checkpoint, train
from .shapley import ShapleyReport, acc_pseudo, asr_detected, neuron_shapley, report_to_text

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001  every failure is reported under its stage name
        raise StageError(name, e) from e


# ---------------------------------------------------------------- data and training

@dataclass
class Workspace:
    cfg: ExperimentConfig
    train: LabeledDataset
    test: LabeledDataset
    spec: TriggerSpec


def open_workspace(cfg: ExperimentConfig) -> Workspace:
    train_set = _stage("load", load_dataset, cfg.dataset_path, cfg.dataset_format, "train")
    test_set = _stage("load", load_dataset, cfg.dataset_path, cfg.dataset_format, "test")
    spec = default_trigger(cfg.attack, test_set.image_shape, cfg.target_label, cfg.trigger_seed)
    return Workspace(cfg, train_set, test_set, spec)


def train_params(cfg: ExperimentConfig) -> TrainParams:
    return TrainParams(lr=cfg.train_lr, momentum=cfg.train_momentum, epochs=cfg.train_epochs,
                       batch_size=cfg.train_batch_size, seed=cfg.seed)


def train_model(ws: Workspace, workers: int = 1) -> tuple[Model, list[str]]:
    cfg = ws.cfg
    poisoned = poison_training_set(ws.train, ws.spec, cfg.poison_rate, cfg.seed)
    model = ARCHITECTURES[cfg.architecture](num_classes=10, input_shape=ws.train.image_shape, seed=cfg.seed)
    lines = ["epoch\tloss\tacc\tasr"]

    def on_epoch(epoch: int, m: Model, loss: float):
        ev = rp.evaluate(m, IDENTITY, ws.test, ws.spec, workers)
        lines.append(f"{epoch}\t{loss:.6f}\t{ev.acc:.2f}\t{ev.asr:.2f}")
        log.info("epoch %d loss %.4f acc %.2f asr %.2f", epoch, loss, ev.acc, ev.asr)

    model = _stage("train", train, model, poisoned.images, poisoned.labels, train_params(cfg), on_epoch)
    return model, lines


def cached_model(ws: Workspace, cache_dir: str | Path, workers: int = 1) -> Model:
    """Train once per training-relevant config; later calls load the checkpoint."""
    cache = Path(cache_dir)
    path = cache / f"{ws.cfg.training_digest()}.ttbd"
    if path.exists():
        return _stage("load-checkpoint", checkpoint.load, path)
    cache.mkdir(parents=True, exist_ok=True)
    model, lines = train_model(ws, workers)
    checkpoint.save(model, path)
    path.with_suffix(".log").write_text("\n".join(lines) + "\n")
    return model


# ---------------------------------------------------------------- defense

def ddp_params(cfg: ExperimentConfig) -> list[DDPParams]:
    views = []
    for item in cfg.ddp_views.split(","):
        parts = item.strip().split("/")
        if len(parts) != 3:
            raise ConfigError(f"ddp_views entry {item!r} is not summary/normalize/budget")
        try:
            views.append(DDPParams(prune_step=cfg.ddp_step, budget_fraction=float(parts[2]), theta=cfg.ddp_theta,
                                   keep_fraction=cfg.ddp_keep, summary=parts[0], normalize=parts[1],
                                   candidates=cfg.ddp_candidates))
        except ValueError as e:
            raise ConfigError(f"ddp_views entry {item!r}: {e}") from None
    return views


@dataclass
class DefenseRun:
    name: str
    detection: DetectionReport
    asr: ShapleyReport | None
    acc: ShapleyReport | None
    plan: rp.RepairPlan
    result: rp.RepairResult
    before: rp.EvalResult
    after: rp.EvalResult
    flags: np.ndarray = field(repr=False, default=None)  # ground truth, harness-only

    @property
    def mask(self) -> PruneMask:
        return self.result.mask

    def detected_poisoned(self) -> int:
        return int(self.flags[self.detection.detected].sum())


def defender_batches(ws: Workspace, sparse: bool) -> list[LabeledDataset]:
    cfg = ws.cfg
    if sparse:
        return make_sparse_batches(ws.test, ws.spec, cfg.sparse_batches, cfg.batch_size, cfg.sparse_rate, cfg.seed)
    return [make_defender_batch(ws.test, ws.spec, cfg.batch_size, cfg.batch_rate, cfg.seed)]


def detect(cfg: ExperimentConfig, model: Model, batches: list[np.ndarray], method: str,
           workers: int = 1) -> DetectionReport:
    if method == "dual" or len(batches) > 1:
        return dual_detect_sparse(model, batches, cfg.ddp_n_detect, ddp_params(cfg), seed=cfg.seed, workers=workers)
    if method == "teco":
        return teco_detect(model, batches[0], cfg.teco_n_detect, seed=cfg.seed, workers=workers)
    return ddp_detect(model, batches[0], cfg.ddp_n_detect, ddp_params(cfg), workers=workers)


def attribute(cfg: ExperimentConfig, model: Model, images: np.ndarray, detection: DetectionReport,
              workers: int = 1) -> tuple[ShapleyReport, ShapleyReport]:
    """ASR Shapley on the detected samples, ACC Shapley on the rest of the batch.

    The ``acc_holdout`` most suspicious samples are left out of the ACC game:
    undetected poisoned samples would otherwise mark backdoor units as
    clean-critical and shield them from pruning.
    """
    asr = neuron_shapley(model, asr_detected(model, images, detection.detected), cfg.shapley_T,
                         cfg.shapley_eps_asr, cfg.seed, workers)
    suspects = detection.ranking[:cfg.acc_holdout]
    clean = np.setdiff1d(np.arange(len(images)), suspects)
    if len(clean) == 0:
        raise ValueError("acc_holdout leaves no samples for the ACC game")
    acc = neuron_shapley(model, acc_pseudo(model, images[clean]), cfg.shapley_T, cfg.shapley_eps_acc,
                         cfg.seed, workers)
    return asr, acc


def stop_rule(cfg: ExperimentConfig, model: Model) -> rp.StopRule:
    return rp.StopRule.for_model(model, cfg.repair_asr_target, cfg.repair_max_fraction, cfg.repair_margin)


VARIANTS = {"ddp": "TTBD-DDP", "teco": "TTBD-TeCo", "dual": "TTBD-Dual"}


def run_defense(ws: Workspace, model: Model, method: str | None = None, sparse: bool = False,
                ablation: str | None = None, workers: int = 1) -> DefenseRun:
    """detect -> shapley -> repair -> evaluate on the configured defender batch(es).

    ``ablation`` swaps a component: "RAND" replaces detection with a seeded
    random draw, "ACT" replaces Shapley selection with activation ranking.
    """
    cfg = ws.cfg
    method = method or cfg.detect_method
    batches = _stage("batch", defender_batches, ws, sparse)
    pool = concat(batches)
    images = pool.images
    if ablation == "RAND":
        detected = rp.random_detected(len(images), cfg.ddp_n_detect, cfg.seed)
        rest = np.setdiff1d(np.arange(len(images)), detected)
        detection = DetectionReport("RAND", np.zeros(len(images)), np.concatenate([detected, rest]), detected,
                                    {"n_detect": cfg.ddp_n_detect, "seed": cfg.seed})
    else:
        detection = _stage("detect", detect, cfg, model, [b.images for b in batches], method, workers)
        detected = detection.detected
    stop = stop_rule(cfg, model)
    asr = acc = None
    if ablation == "ACT":
        plan = _stage("select", rp.activation_plan, model, images, detected, cfg.repair_k, stop, workers)
    else:
        asr, acc = _stage("shapley", attribute, cfg, model, images, detection, workers)
        plan = _stage("select", rp.select_prune_set, asr, acc, cfg.repair_k, cfg.repair_m, stop)
    result = _stage("repair", rp.repair, model, plan, images, detected, workers)
    before = _stage("evaluate", rp.evaluate, model, IDENTITY, ws.test, ws.spec, workers)
    after = _stage("evaluate", rp.evaluate, model, result.mask, ws.test, ws.spec, workers)
    if ablation:
        name = f"TTBD-{ablation}"
    elif sparse:
        name = "TTBD-SPARSE"
    else:
        name = VARIANTS[method]
    return DefenseRun(name, detection, asr, acc, plan, result, before, after, pool.poison_flags)


# ---------------------------------------------------------------- reports

def _row(name: str, ev: rp.EvalResult) -> dict:
    return {"variant": name, "acc": round(ev.acc, 4), "asr": round(ev.asr, 4),
            "neurons_pruned": ev.neurons_pruned, "fraction_pruned": round(ev.fraction_pruned, 6)}


@dataclass
class Report:
    title: str
    cfg: ExperimentConfig
    rows: list[dict]
    extra: dict = field(default_factory=dict)

    def table(self) -> str:
        head = f"{'variant':<14}{'ACC':>9}{'ASR':>9}{'pruned':>8}"
        keys = [k for k in self.rows[0] if k not in ("variant", "acc", "asr", "neurons_pruned", "fraction_pruned")] \
            if self.rows else []
        head += "".join(f"{k:>14}" for k in keys)
        lines = [head]
        for r in self.rows:
            line = f"{r['variant']:<14}{r['acc']:>9.2f}{r['asr']:>9.2f}{r['neurons_pruned']:>8d}"
            line += "".join(f"{str(r[k]):>14}" for k in keys)
            lines.append(line)
        return "\n".join(lines)

    def to_text(self) -> str:
        header = [f"# {self.title}", f"# seed={self.cfg.seed} config_hash={self.cfg.digest()}"]
        header += [f"# {line}" for line in self.cfg.to_text().splitlines()]
        return "\n".join(header) + "\n" + self.table() + "\n"

    def sidecar(self) -> str:
        body = {"title": self.title, "config": asdict(self.cfg), "config_hash": self.cfg.digest(),
                "rows": self.rows, **self.extra}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path, stem: str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.txt").write_text(self.to_text())
        (out / f"{stem}.json").write_text(self.sidecar())


def pipeline_report(run: DefenseRun, cfg: ExperimentConfig) -> Report:
    rows = [_row("Before", run.before), _row(run.name, run.after)]
    extra = {"detected": [int(i) for i in run.detection.detected],
             "detected_poisoned": run.detected_poisoned(),
             "prune_set": [list(n) for n in sorted(run.mask.pruned)],
             "asr_proxy_trace": [round(v, 6) for v in run.result.trace]}
    return Report(f"pipeline {run.name}", cfg, rows, extra)


def write_artifacts(run: DefenseRun, cfg: ExperimentConfig, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "detection.txt").write_text(run.detection.to_text())
    if run.asr is not None:
        (out / "shapley.txt").write_text(report_to_text(run.asr, run.acc))
    rp.save_mask(run.mask, out / "mask.txt", {"config_hash": cfg.digest(), "seed": cfg.seed,
                                              "variant": run.name, "detection": "detection.txt",
                                              "shapley": "shapley.txt" if run.asr is not None else "none"})
