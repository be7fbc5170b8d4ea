from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import DTYPE
from .model import Model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainParams:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 3
    batch_size: int = 64
    seed: int = 0


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-12)))
    grad = p
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray):
    caches = []
    for layer in model.layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    loss, dout = softmax_cross_entropy(x, y)
    grads: list[dict[str, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        dout, grads[i] = model.layers[i].backward(dout, caches[i])
    return loss, grads, dout


def train(model: Model, images: np.ndarray, labels: np.ndarray, params: TrainParams,
          on_epoch: Callable[[int, Model, float], None] | None = None) -> Model:
    """SGD with momentum on softmax cross-entropy. Returns a new model."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    images = np.asarray(images, dtype=DTYPE)
    model = model.copy()
    rng = np.random.default_rng(params.seed)
    velocity = [{k: np.zeros_like(v) for k, v in l.params().items()} for l in model.layers]
    lr = DTYPE(params.lr)
    mom = DTYPE(params.momentum)
    n = len(labels)
    for epoch in range(params.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, params.batch_size):
            idx = order[start:start + params.batch_size]
            loss, grads, _ = loss_and_grads(model, images[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {start // params.batch_size}")
            for layer, g, v in zip(model.layers, grads, velocity):
                for k, p in layer.params().items():
                    v[k] *= mom
                    v[k] -= lr * g[k]
                    p += v[k]
            total += loss * len(idx)
            seen += len(idx)
        mean_loss = total / max(seen, 1)
        log.info("epoch %d loss %.4f", epoch, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, model, mean_loss)
    return model
