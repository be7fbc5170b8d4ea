"""Layered model, prunable-unit addressing and masked inference."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .layers import DTYPE, Conv2D, Dense, Flatten, MaxPool2D, ReLU, ShapeError, conv2d, dense

# Fixed chunking keeps BLAS blocking, and therefore the bits, independent of
# how many workers evaluate the chunks.
CHUNK = 256


class NeuronId(NamedTuple):
    layer_index: int
    unit_index: int

    def __str__(self) -> str:
        return f"{self.layer_index}:{self.unit_index}"


@dataclass(eq=False)
class Model:
    layers: list
    input_shape: tuple[int, int, int]
    num_classes: int
    _shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            shapes.append(tuple(layer.output_shape(shapes[-1], i)))
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(len(self.layers) - 1, type(self.layers[-1]).__name__,
                             f"final output {shapes[-1]} does not match num_classes={self.num_classes}")
        self._shapes = shapes

    def shape_after(self, index: int) -> tuple[int, ...]:
        return self._shapes[index + 1]

    def prunable_layers(self) -> list[int]:
        """Indices of Conv2D/Dense layers other than the classifier head."""
        last = len(self.layers) - 1
        return [i for i, l in enumerate(self.layers) if l.prunable and i != last]

    def neurons(self) -> list[NeuronId]:
        return [NeuronId(i, u) for i in self.prunable_layers() for u in range(self.layers[i].units)]

    @property
    def num_neurons(self) -> int:
        return sum(self.layers[i].units for i in self.prunable_layers())

    def copy(self) -> Model:
        layers = []
        for l in self.layers:
            if isinstance(l, Conv2D):
                layers.append(Conv2D(l.weight.copy(), l.bias.copy(), l.stride))
            elif isinstance(l, Dense):
                layers.append(Dense(l.weight.copy(), l.bias.copy()))
            elif isinstance(l, MaxPool2D):
                layers.append(MaxPool2D(l.window, l.stride))
            else:
                layers.append(type(l)())
        return Model(layers, self.input_shape, self.num_classes)

    def check_neuron(self, nid: NeuronId) -> None:
        li, ui = nid
        if li not in self.prunable_layers():
            raise ValueError(f"layer {li} is not a prunable layer")
        if not 0 <= ui < self.layers[li].units:
            raise ValueError(f"unit {ui} out of range for layer {li} ({self.layers[li].units} units)")


def reference_cnn(num_classes: int = 10, input_shape=(1, 28, 28), seed: int = 0) -> Model:
    """Conv(16)-ReLU-Pool-Conv(32)-ReLU-Pool-Flatten-Dense(128)-ReLU-Dense(classes)."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    h2, w2 = ((h - 2) // 2 - 2) // 2, ((w - 2) // 2 - 2) // 2
    layers = [
        conv2d(rng, c, 16, 3), ReLU(), MaxPool2D(2, 2),
        conv2d(rng, 16, 32, 3), ReLU(), MaxPool2D(2, 2),
        Flatten(),
        dense(rng, 32 * h2 * w2, 128), ReLU(),
        dense(rng, 128, num_classes),
    ]
    return Model(layers, input_shape, num_classes)


def mlp(in_features: int, hidden: int, num_classes: int, seed: int = 0) -> Model:
    """Small dense net over a (1, 1, in_features) input."""
    rng = np.random.default_rng(seed)
    layers = [Flatten(), dense(rng, in_features, hidden), ReLU(), dense(rng, hidden, num_classes)]
    return Model(layers, (1, 1, in_features), num_classes)


ARCHITECTURES = {"reference-cnn": reference_cnn}


class PruneMask:
    """Binary per-neuron multiplier; neurons not listed keep multiplier 1."""

    __slots__ = ("_pruned",)

    def __init__(self, pruned: Iterable[NeuronId] = ()):
        self._pruned = frozenset(NeuronId(*n) for n in pruned)

    @classmethod
    def from_entries(cls, entries: Mapping[NeuronId, int]) -> PruneMask:
        bad = {v for v in entries.values() if v not in (0, 1)}
        if bad:
            raise ValueError(f"mask multipliers must be 0 or 1, got {sorted(bad)}")
        return cls(n for n, v in entries.items() if v == 0)

    @property
    def pruned(self) -> frozenset[NeuronId]:
        return self._pruned

    @property
    def entries(self) -> dict[NeuronId, int]:
        return {n: 0 for n in self._pruned}

    def __getitem__(self, nid) -> int:
        return 0 if NeuronId(*nid) in self._pruned else 1

    def __len__(self) -> int:
        return len(self._pruned)

    def __bool__(self) -> bool:
        return bool(self._pruned)

    def __eq__(self, other) -> bool:
        return isinstance(other, PruneMask) and self._pruned == other._pruned

    def __hash__(self) -> int:
        return hash(self._pruned)

    def __repr__(self) -> str:
        return f"PruneMask({sorted(self._pruned)})"

    def with_pruned(self, nids: Iterable[NeuronId]) -> PruneMask:
        return PruneMask(self._pruned | {NeuronId(*n) for n in nids})

    def combine(self, other: PruneMask) -> PruneMask:
        """Entry-wise minimum of two masks."""
        return PruneMask(self._pruned | other._pruned)

    def by_layer(self) -> dict[int, np.ndarray]:
        out: dict[int, list[int]] = {}
        for li, ui in self._pruned:
            out.setdefault(li, []).append(ui)
        return {li: np.array(sorted(u), dtype=np.intp) for li, u in out.items()}

    def validate(self, model: Model) -> None:
        for nid in self._pruned:
            model.check_neuron(nid)


IDENTITY = PruneMask()


def apply_mask(model: Model, mask: PruneMask) -> Model:
    """Bake a mask into a copy of the model by zeroing the pruned units' parameters."""
    mask.validate(model)
    out = model.copy()
    for li, units in mask.by_layer().items():
        out.layers[li].weight[units] = 0
        out.layers[li].bias[units] = 0
    return out


def _check_batch(model: Model, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError(0, type(model.layers[0]).__name__,
                         f"batch shape {tuple(batch.shape)} does not match model input (N, {model.input_shape})")
    if batch.dtype != DTYPE:
        batch = batch.astype(DTYPE)
    return batch


def _run(model: Model, x: np.ndarray, start: int, drop: dict[int, np.ndarray]) -> np.ndarray:
    for i in range(start, len(model.layers)):
        x, _ = model.layers[i].forward(x)
        if i in drop:
            x[:, drop[i]] = 0
    return x


def _map_chunks(fn, n: int, workers: int):
    spans = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda sp: fn(*sp), spans))
    return [fn(*sp) for sp in spans]


def forward(model: Model, batch: np.ndarray, mask: PruneMask = IDENTITY, workers: int = 1) -> np.ndarray:
    """Logits for a batch, with masked units zeroed right after their layer."""
    batch = _check_batch(model, batch)
    mask.validate(model)
    drop = mask.by_layer()
    if len(batch) == 0:
        return np.zeros((0, model.num_classes), dtype=DTYPE)
    parts = _map_chunks(lambda a, b: _run(model, batch[a:b], 0, drop), len(batch), workers)
    return np.concatenate(parts, axis=0)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the stated tie-break
    return np.argmax(logits, axis=1)


def predict(model: Model, batch: np.ndarray, mask: PruneMask = IDENTITY, workers: int = 1) -> np.ndarray:
    return argmax_labels(forward(model, batch, mask, workers))


@dataclass
class ActivationRecord:
    neurons: list[NeuronId]
    values: np.ndarray  # aligned with neurons

    def as_dict(self) -> dict[NeuronId, float]:
        return {n: float(v) for n, v in zip(self.neurons, self.values)}

    def ranked(self) -> list[NeuronId]:
        """Neurons by descending activation, NeuronId order among ties."""
        order = np.lexsort((np.arange(len(self.neurons)), -self.values.astype(np.float64)))
        return [self.neurons[i] for i in order]


def _activations(model: Model, batch: np.ndarray, drop, summary: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Logits and (N, num_neurons) post-nonlinearity unit summaries."""
    reduce = _SUMMARIES[summary]
    prunable = set(model.prunable_layers())
    cols = []
    x = batch
    pending = None
    for i, layer in enumerate(model.layers):
        x, _ = layer.forward(x)
        if i in drop:
            x[:, drop[i]] = 0
        if pending is not None:
            cols.append(reduce(x))
            pending = None
        if i in prunable:
            if i + 1 < len(model.layers) and isinstance(model.layers[i + 1], ReLU):
                pending = i
            else:
                cols.append(reduce(x))
    return x, np.concatenate(cols, axis=1)


def _unit_means(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return x.mean(axis=(2, 3), dtype=DTYPE)
    return x.astype(DTYPE, copy=True)


def _unit_peaks(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return x.max(axis=(2, 3))
    return x.astype(DTYPE, copy=True)


# Conv channels are reduced over space; dense units are already scalars.
_SUMMARIES = {"mean": _unit_means, "max": _unit_peaks}


def forward_with_activations(model: Model, sample: np.ndarray, mask: PruneMask = IDENTITY):
    """Logits and ActivationRecord for a single sample."""
    sample = _check_batch(model, sample)
    if len(sample) != 1:
        raise ValueError(f"forward_with_activations takes a single sample, got batch of {len(sample)}")
    mask.validate(model)
    logits, acts = _activations(model, sample, mask.by_layer())
    return logits, ActivationRecord(model.neurons(), acts[0])


def batch_activations(model: Model, batch: np.ndarray, mask: PruneMask = IDENTITY, workers: int = 1,
                      summary: str = "mean") -> np.ndarray:
    """(N, num_neurons) activation matrix; with the mean summary, row i equals the record of sample i."""
    if summary not in _SUMMARIES:
        raise ValueError(f"unknown activation summary {summary!r}")
    batch = _check_batch(model, batch)
    drop = mask.by_layer()
    parts = _map_chunks(lambda a, b: _activations(model, batch[a:b], drop, summary)[1], len(batch), workers)
    return np.concatenate(parts, axis=0)


class BatchEvaluator:
    """Masked forward passes over one fixed batch.

    The unmasked output of every prunable layer is cached once, so a masked
    pass restarts right after the earliest layer that has a pruned unit.
    Results are bit-identical to ``forward(model, batch, mask)``.
    """

    def __init__(self, model: Model, batch: np.ndarray, workers: int = 1):
        self.model = model
        self.batch = _check_batch(model, batch)
        self.workers = workers
        self._prunable = set(model.prunable_layers())
        parts = _map_chunks(lambda a, b: _outputs(model, self.batch[a:b], self._prunable),
                            len(self.batch), workers)
        self._outputs = [p[0] for p in parts]
        self.base_logits = (np.concatenate([p[1] for p in parts], axis=0) if parts
                            else np.zeros((0, model.num_classes), dtype=DTYPE))
        self.base_labels = argmax_labels(self.base_logits)

    def __len__(self) -> int:
        return len(self.batch)

    def _resume(self, outputs: list[dict], drop: dict[int, np.ndarray], start: int) -> np.ndarray:
        def run(chunk: dict) -> np.ndarray:
            x = chunk[start].copy()
            x[:, drop[start]] = 0
            return _run(self.model, x, start + 1, drop)
        if self.workers > 1 and len(outputs) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return np.concatenate(list(pool.map(run, outputs)), axis=0)
        return np.concatenate([run(c) for c in outputs], axis=0)

    def logits(self, mask: PruneMask = IDENTITY) -> np.ndarray:
        if not mask:
            return self.base_logits
        mask.validate(self.model)
        drop = mask.by_layer()
        return self._resume(self._outputs, drop, min(drop))

    def labels(self, mask: PruneMask = IDENTITY) -> np.ndarray:
        return argmax_labels(self.logits(mask))

    def agreement(self, mask: PruneMask = IDENTITY, subset: np.ndarray | None = None) -> float:
        """Fraction of samples whose masked prediction matches the unmasked one."""
        pred, ref = self.labels(mask), self.base_labels
        if subset is not None:
            pred, ref = pred[subset], ref[subset]
        if len(pred) == 0:
            return 1.0
        return float(np.mean(pred == ref))

    def walk(self) -> MaskWalk:
        return MaskWalk(self)


class MaskWalk:
    """Grow a mask step by step, recomputing only downstream of each new unit.

    Every state's logits equal ``forward(model, batch, walk.mask)`` bit for bit.
    """

    def __init__(self, evaluator: BatchEvaluator):
        self.ev = evaluator
        self.mask = IDENTITY
        self._outputs = [dict(c) for c in evaluator._outputs]
        self.logits = evaluator.base_logits

    def labels(self) -> np.ndarray:
        return argmax_labels(self.logits)

    def prune(self, nids: Iterable[NeuronId]) -> np.ndarray:
        nids = [NeuronId(*n) for n in nids if NeuronId(*n) not in self.mask.pruned]
        if not nids:
            return self.labels()
        model = self.ev.model
        for n in nids:
            model.check_neuron(n)
        self.mask = self.mask.with_pruned(nids)
        drop = self.mask.by_layer()
        start = min(n.layer_index for n in nids)
        prunable = self.ev._prunable

        def step(chunk: dict) -> np.ndarray:
            x = chunk[start].copy()
            x[:, drop[start]] = 0
            chunk[start] = x
            for i in range(start + 1, len(model.layers)):
                x, _ = model.layers[i].forward(x)
                if i in drop:
                    x[:, drop[i]] = 0
                if i in prunable:
                    chunk[i] = x
            return x

        if self.ev.workers > 1 and len(self._outputs) > 1:
            with ThreadPoolExecutor(max_workers=self.ev.workers) as pool:
                parts = list(pool.map(step, self._outputs))
        else:
            parts = [step(c) for c in self._outputs]
        self.logits = np.concatenate(parts, axis=0)
        return self.labels()


def _outputs(model: Model, x: np.ndarray, keep: set[int]):
    outs: dict[int, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        x, _ = layer.forward(x)
        if i in keep:
            outs[i] = x
    return outs, x
