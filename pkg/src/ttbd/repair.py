"""Neuron selection, greedy mask-based pruning, and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledDataset, TriggerSpec, asr_set
from .nn import IDENTITY, BatchEvaluator, Model, NeuronId, PruneMask, batch_activations, predict
from .shapley import ShapleyReport


class RepairError(ValueError):
    pass


@dataclass(frozen=True)
class StopRule:
    asr_value_target: float = 0.1
    max_prune: int = 17  # 10% of the 176-unit reference network
    margin: int = 0      # extra plan units pruned once the target is met; never past max_prune

    def __post_init__(self):
        if self.max_prune < 0 or self.margin < 0:
            raise ValueError("max_prune and margin must be non-negative")

    @classmethod
    def for_model(cls, model: Model, asr_value_target: float = 0.1, max_fraction: float = 0.1,
                  margin: int = 0) -> StopRule:
        return cls(asr_value_target, int(np.floor(max_fraction * model.num_neurons + 1e-9)), margin)


@dataclass
class RepairPlan:
    k: int
    m: int
    prune_set: list[NeuronId]
    stop: StopRule = field(default_factory=StopRule)


@dataclass(frozen=True)
class EvalResult:
    acc: float  # percent
    asr: float  # percent
    neurons_pruned: int
    fraction_pruned: float


@dataclass
class RepairResult:
    mask: PruneMask
    plan: RepairPlan
    trace: list[float]  # ASR proxy after each pruned neuron, trace[0] for the unpruned model

    @property
    def proxy(self) -> float:
        return self.trace[-1]


def _order(players: Sequence[NeuronId], values: np.ndarray, descending: bool) -> list[int]:
    keys = np.asarray(values, dtype=np.float64)
    ids = np.array([tuple(p) for p in players])
    primary = -keys if descending else keys
    return list(np.lexsort((ids[:, 1], ids[:, 0], primary)))


def select_prune_set(asr: ShapleyReport, acc: ShapleyReport, k: int = 30, m: int = 140,
                     stop: StopRule = StopRule()) -> RepairPlan:
    """Top-k units by ASR Shapley that are also among the bottom-m by absolute ACC Shapley."""
    if k < 1 or m < 1:
        raise RepairError("k and m must be at least 1")
    if list(asr.players) != list(acc.players):
        raise RepairError("ASR and ACC reports cover different neurons")
    players = [NeuronId(*p) for p in asr.players]
    candidates = _order(players, asr.values, descending=True)[:k]
    allowed = set(_order(players, acc.abs_values, descending=False)[:m])
    chosen = [players[i] for i in candidates if i in allowed]
    if not chosen:
        raise RepairError(f"top-{k} ASR and bottom-{m} ACC sets do not intersect; increase m to allow pruning")
    return RepairPlan(k, m, chosen, stop)


def repair(model: Model, plan: RepairPlan, batch_images: np.ndarray, detected: Sequence[int],
           workers: int = 1) -> RepairResult:
    """Prune plan units in order until the detected samples mostly stop agreeing with the original model.

    The returned mask is the only output; the model is left untouched.
    """
    idx = np.asarray(list(detected), dtype=np.intp)
    walk = BatchEvaluator(model, np.asarray(batch_images)[idx], workers).walk()
    ref = walk.ev.base_labels

    def proxy(labels: np.ndarray) -> float:
        return float(np.mean(labels == ref)) if len(ref) else 1.0

    stop = plan.stop
    trace = [1.0]
    extra = None  # margin units still to prune; None until the target is first met
    for nid in plan.prune_set:
        if len(walk.mask) >= stop.max_prune:
            break
        # The target counts as reached when the proxy is at or below it.
        if extra is None and trace[-1] <= stop.asr_value_target:
            extra = stop.margin if len(walk.mask) else 0
        if extra is not None:
            if extra == 0:
                break
            extra -= 1
        trace.append(proxy(walk.prune([nid])))
    return RepairResult(walk.mask, plan, trace)


def evaluate(model: Model, mask: PruneMask, clean_test: LabeledDataset, spec: TriggerSpec,
             workers: int = 1) -> EvalResult:
    """Clean accuracy and attack success rate, both in percent."""
    acc = float(np.mean(predict(model, clean_test.images, mask, workers) == clean_test.labels)) * 100
    attacked = asr_set(clean_test, spec)
    if len(attacked):
        asr = float(np.mean(predict(model, attacked, mask, workers) == spec.target_label)) * 100
    else:
        asr = 0.0
    return EvalResult(acc, asr, len(mask), len(mask) / model.num_neurons)


# ---------------------------------------------------------------- ablations

def random_detected(batch_size: int, n_detect: int, seed: int) -> np.ndarray:
    """Stand-in for detection: a seeded uniform sample of batch positions."""
    rng = np.random.default_rng([seed, 0x5EED])
    return np.sort(rng.choice(batch_size, size=min(n_detect, batch_size), replace=False))


def activation_plan(model: Model, batch_images: np.ndarray, detected: Sequence[int], k: int = 30,
                    stop: StopRule = StopRule(), workers: int = 1) -> RepairPlan:
    """Top-k units by mean activation over the detected samples."""
    idx = np.asarray(list(detected), dtype=np.intp)
    if not len(idx):
        raise RepairError("activation ranking needs at least one detected sample")
    mean_act = batch_activations(model, np.asarray(batch_images)[idx], workers=workers).mean(axis=0)
    players = model.neurons()
    order = _order(players, mean_act, descending=True)[:k]
    return RepairPlan(k, model.num_neurons, [players[i] for i in order], stop)


# ---------------------------------------------------------------- mask files

def mask_to_text(mask: PruneMask, provenance: dict | None = None) -> str:
    lines = ["# prune-mask v1"]
    lines += [f"# {k}: {v}" for k, v in sorted((provenance or {}).items())]
    lines += [f"{n.layer_index}\t{n.unit_index}" for n in sorted(mask.pruned)]
    return "\n".join(lines) + "\n"


def mask_from_text(text: str) -> tuple[PruneMask, dict]:
    lines = text.splitlines()
    if not lines or lines[0] != "# prune-mask v1":
        raise RepairError("not a mask file, or unsupported version")
    provenance, pruned = {}, []
    for line in lines[1:]:
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            provenance[key] = value
        elif line.strip():
            li, ui = line.split("\t")
            pruned.append(NeuronId(int(li), int(ui)))
    return PruneMask(pruned), provenance


def save_mask(mask: PruneMask, path: str | Path, provenance: dict | None = None) -> None:
    Path(path).write_text(mask_to_text(mask, provenance))


def load_mask(path: str | Path) -> tuple[PruneMask, dict]:
    return mask_from_text(Path(path).read_text())


__all__ = [
    "IDENTITY", "EvalResult", "RepairError", "RepairPlan", "RepairResult", "StopRule", "activation_plan",
    "evaluate", "load_mask", "mask_from_text", "mask_to_text", "random_detected", "repair", "save_mask",
    "select_prune_set",
]
