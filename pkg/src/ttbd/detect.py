"""Test-time poisoned-sample detection over a defender batch.

DDP prunes, for each sample, the units that sample excites most and counts
how many batch predictions change (prediction-change score, PCS). TeCo ranks
samples by how uniformly their prediction survives graded corruptions. The
sparse mode fuses both rankings over a pool of batches.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corruptions import ALL_KINDS, DEFAULT_TABLE, CorruptionKind, SeverityTable, crc_scores
from .nn import BatchEvaluator, Model, batch_activations

DDP_DETECT = 6
TECO_DETECT = 10


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class DDPParams:
    prune_step: int = 2
    budget_fraction: float = 0.15
    theta: float = 0.75
    keep_fraction: float = 0.8  # l: share of lowest ACC-Shapley units eligible for pruning
    summary: str = "mean"       # per-channel activation reduction: "mean" or "max"
    normalize: str = "none"     # "none" or "zscore" (per unit, across the batch)
    candidates: str = "all"     # "all" prunable units, or "conv" channels only

    def __post_init__(self):
        if self.prune_step < 1:
            raise ValueError("prune_step must be at least 1")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must lie in [0, 1]")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not 0.0 <= self.keep_fraction <= 1.0:
            raise ValueError("keep_fraction must lie in [0, 1]")
        if self.summary not in ("mean", "max"):
            raise ValueError(f"unknown activation summary {self.summary!r}")
        if self.normalize not in ("none", "zscore"):
            raise ValueError(f"unknown normalization {self.normalize!r}")
        if self.candidates not in ("all", "conv"):
            raise ValueError(f"unknown candidate set {self.candidates!r}")

    def budget(self, num_neurons: int) -> int:
        return int(np.floor(self.budget_fraction * num_neurons + 1e-9))


@dataclass
class DetectionReport:
    method: str
    scores: np.ndarray
    ranking: np.ndarray
    detected: np.ndarray
    params: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["# detection-report v1", f"method\t{self.method}"]
        lines += [f"param\t{k}\t{v}" for k, v in sorted(self.params.items())]
        lines.append("detected\t" + ",".join(str(int(i)) for i in self.detected))
        lines.append("ranking\t" + ",".join(str(int(i)) for i in self.ranking))
        lines += [f"score\t{i}\t{s:.17g}" for i, s in enumerate(self.scores)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> DetectionReport:
        lines = text.splitlines()
        if not lines or lines[0] != "# detection-report v1":
            raise DetectionError("not a detection report, or unsupported version")
        method, params, scores = "", {}, []
        detected = ranking = np.zeros(0, dtype=np.int64)
        for line in lines[1:]:
            tag, *rest = line.split("\t")
            if tag == "method":
                method = rest[0]
            elif tag == "param":
                params[rest[0]] = rest[1]
            elif tag == "detected":
                detected = _int_list(rest[0] if rest else "")
            elif tag == "ranking":
                ranking = _int_list(rest[0] if rest else "")
            elif tag == "score":
                scores.append(float(rest[1]))
        return cls(method, np.array(scores), ranking, detected, params)


def _int_list(text: str) -> np.ndarray:
    return np.array([int(t) for t in text.split(",") if t], dtype=np.int64)


def rank_descending(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties to the lower index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def rank_ascending(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), scores))


def _check_n(n_detect: int, size: int) -> int:
    if n_detect < 0:
        raise DetectionError("n_detect must be non-negative")
    if size == 0:
        raise DetectionError("empty batch")
    return min(n_detect, size)


# ---------------------------------------------------------------- DDP

def eligible_neurons(num_neurons: int, acc_shapley: np.ndarray | None, keep_fraction: float) -> np.ndarray:
    """Boolean mask of units DDP may prune.

    With an ACC-Shapley estimate, only the ``keep_fraction`` of units with the
    lowest values stay eligible; without one every unit is.
    """
    if acc_shapley is None:
        return np.ones(num_neurons, dtype=bool)
    acc = np.asarray(acc_shapley, dtype=np.float64)
    if acc.shape != (num_neurons,):
        raise DetectionError(f"need one Shapley value per neuron ({num_neurons}), got shape {acc.shape}")
    keep = int(round(keep_fraction * num_neurons))
    out = np.zeros(num_neurons, dtype=bool)
    out[rank_ascending(acc)[:keep]] = True
    return out


def _activation_matrix(model: Model, images: np.ndarray, params: DDPParams, workers: int) -> np.ndarray:
    acts = batch_activations(model, images, workers=workers, summary=params.summary).astype(np.float64)
    if params.normalize == "zscore":
        acts = (acts - acts.mean(axis=0)) / (acts.std(axis=0) + 1e-6)
    return acts


def _pcs(evaluator: BatchEvaluator, order: np.ndarray, params: DDPParams, budget: int) -> int:
    neurons = evaluator.model.neurons()
    walk = evaluator.walk()
    base = evaluator.base_labels
    changed = 0
    pruned = 0
    while pruned < budget and pruned < len(order):
        take = order[pruned:min(pruned + params.prune_step, budget)]
        labels = walk.prune([neurons[j] for j in take])
        pruned += len(take)
        changed = int(np.sum(labels != base))
        if 1.0 - changed / len(base) < params.theta:
            break
    return changed


class DDPScorer:
    """Shared read-only state for scoring every sample of one batch."""

    def __init__(self, model: Model, images: np.ndarray, acc_shapley: np.ndarray | None = None,
                 params: DDPParams = DDPParams(), workers: int = 1):
        self.model = model
        self.params = params
        self.workers = workers
        self.evaluator = BatchEvaluator(model, images)
        self.acts = _activation_matrix(model, images, params, workers)
        self.eligible = eligible_neurons(model.num_neurons, acc_shapley, params.keep_fraction)
        if params.candidates == "conv":
            self.eligible &= np.array([model.layers[n.layer_index].kind == "conv2d" for n in model.neurons()])
        self.budget = params.budget(model.num_neurons)
        if self.budget > 0 and not self.eligible.any():
            raise DetectionError("no candidate neurons left after the Shapley exclusion")
        # PCS depends only on the first `budget` units of the order; samples sharing that prefix share a score.
        self._memo: dict[tuple[int, ...], int] = {}

    def order(self, i: int) -> np.ndarray:
        ranked = rank_descending(self.acts[i])
        return ranked[self.eligible[ranked]]

    def score(self, i: int) -> int:
        if not 0 <= i < len(self.evaluator):
            raise IndexError(f"sample index {i} outside batch of {len(self.evaluator)}")
        prefix = self.order(i)[:self.budget]
        key = tuple(int(j) for j in prefix)
        if key not in self._memo:
            self._memo[key] = _pcs(self.evaluator, prefix, self.params, self.budget)
        return self._memo[key]

    def scores(self) -> np.ndarray:
        n = len(self.evaluator)
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return np.array(list(pool.map(self.score, range(n))), dtype=np.int64)
        return np.array([self.score(i) for i in range(n)], dtype=np.int64)


def ddp_score(model: Model, images: np.ndarray, sample_index: int, acc_shapley: np.ndarray | None = None,
              params: DDPParams = DDPParams()) -> int:
    """Prediction-change score of one sample; the model is never modified."""
    return DDPScorer(model, images, acc_shapley, params).score(sample_index)


def _params_dict(params, **extra) -> dict:
    d = {k: v for k, v in asdict(params).items()} if params is not None else {}
    d.update(extra)
    return d


Views = DDPParams | Sequence[DDPParams]


def _as_views(params: Views) -> list[DDPParams]:
    views = [params] if isinstance(params, DDPParams) else list(params)
    if not views:
        raise DetectionError("need at least one DDP view")
    return views


def view_label(p: DDPParams) -> str:
    return f"{p.summary}/{p.normalize}/{p.budget_fraction:g}"


def ensemble_scores(model: Model, images: np.ndarray | Sequence[np.ndarray], params: Views,
                    acc_shapley: np.ndarray | None = None, workers: int = 1) -> np.ndarray:
    """PCS summed over views, each divided by its maximum over all samples.

    ``images`` is one batch or a list of batches; PCS is always measured
    inside the sample's own batch. A single view returns the raw integer PCS.
    Peak activations expose local triggers and mean activations expose
    diffuse ones, so no single view is reliable across trigger families.
    """
    batches = [images] if isinstance(images, np.ndarray) else list(images)
    views = _as_views(params)
    raw = [np.concatenate([DDPScorer(model, b, acc_shapley, p, workers).scores() for b in batches])
           .astype(np.float64) for p in views]
    if len(raw) == 1:
        return raw[0]
    return sum(pcs / max(pcs.max(), 1.0) for pcs in raw)


def _views_dict(params: Views, **extra) -> dict:
    views = _as_views(params)
    if len(views) == 1:
        return _params_dict(views[0], **extra)
    d = _params_dict(views[0], **extra)
    for k in ("summary", "normalize", "budget_fraction"):
        d.pop(k)
    d["views"] = ",".join(view_label(p) for p in views)
    return d


def ddp_detect(model: Model, images: np.ndarray, n_detect: int = DDP_DETECT,
               params: Views = DDPParams(), acc_shapley: np.ndarray | None = None,
               workers: int = 1) -> DetectionReport:
    n = _check_n(n_detect, len(images))
    scores = ensemble_scores(model, images, params, acc_shapley, workers)
    ranking = rank_descending(scores)
    return DetectionReport("DDP", scores, ranking, ranking[:n],
                           _views_dict(params, n_detect=n_detect, shapley_filter=acc_shapley is not None))


# ---------------------------------------------------------------- TeCo

def teco_detect(model: Model, images: np.ndarray, n_detect: int = TECO_DETECT,
                kinds: Sequence[CorruptionKind] = ALL_KINDS, seed: int = 0,
                sample_indices: Sequence[int] | None = None, table: SeverityTable = DEFAULT_TABLE,
                workers: int = 1) -> DetectionReport:
    n = _check_n(n_detect, len(images))
    scores = crc_scores(model, images, kinds, seed, sample_indices, table, workers)
    ranking = rank_ascending(scores)
    return DetectionReport("TeCo", scores, ranking, ranking[:n],
                           {"n_detect": n_detect, "kinds": ",".join(k.name for k in kinds), "seed": seed})


# ---------------------------------------------------------------- sparse dual mode

def fuse_ranks(ddp_scores: np.ndarray, crc: np.ndarray) -> np.ndarray:
    """Rank-sum of DDP (descending PCS) and TeCo (ascending CRC); lower = more suspicious."""
    n = len(ddp_scores)
    r_d = np.empty(n, dtype=np.int64)
    r_t = np.empty(n, dtype=np.int64)
    r_d[rank_descending(ddp_scores)] = np.arange(1, n + 1)
    r_t[rank_ascending(crc)] = np.arange(1, n + 1)
    return r_d + r_t


def dual_detect_sparse(model: Model, batches: Sequence[np.ndarray], n_detect: int = DDP_DETECT,
                       params: Views = DDPParams(), acc_shapley: np.ndarray | None = None,
                       kinds: Sequence[CorruptionKind] = ALL_KINDS, seed: int = 0,
                       workers: int = 1) -> DetectionReport:
    """Pool the batches and rank every pooled sample by fused DDP and TeCo ranks.

    PCS is measured against the sample's own batch so its cost stays linear
    in the number of batches; pooled indices follow batch order.
    """
    if not batches:
        raise DetectionError("need at least one batch")
    pcs = ensemble_scores(model, list(batches), params, acc_shapley, workers)
    pool = np.concatenate(list(batches), axis=0)
    n = _check_n(n_detect, len(pool))
    crc = crc_scores(model, pool, kinds, seed, None, DEFAULT_TABLE, workers)
    fused = fuse_ranks(pcs, crc)
    ranking = rank_ascending(fused)
    return DetectionReport("Dual", fused.astype(np.float64), ranking, ranking[:n],
                           _views_dict(params, n_detect=n_detect, batches=len(batches), seed=seed,
                                        shapley_filter=acc_shapley is not None))
