"""Graded image corruptions and the corruption-robustness-consistency score.

Every kind has five parameterizations ordered from mild to harsh. Random
kinds draw their noise once per (seed, sample, kind) and rescale it per
severity, so a harsher level perturbs a superset of what a milder one did.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn import Model, predict

NEVER_FLIPS = 6
SEVERITIES = (1, 2, 3, 4, 5)
TABLE_VERSION = 1


class CorruptionKind(Enum):
    GaussianNoise = 0
    GaussianBlur = 1
    Brightness = 2
    Contrast = 3
    Pixelate = 4
    SaltPepper = 5


ALL_KINDS = tuple(CorruptionKind)

# One parameter per severity; each row strictly harsher left to right.
DEFAULT_PARAMS: dict[CorruptionKind, tuple[float, ...]] = {
    CorruptionKind.GaussianNoise: (0.08, 0.12, 0.18, 0.26, 0.38),   # noise sigma
    CorruptionKind.GaussianBlur: (0.5, 0.75, 1.0, 1.5, 2.0),        # kernel sigma in pixels
    CorruptionKind.Brightness: (0.1, 0.2, 0.3, 0.4, 0.5),           # additive shift
    CorruptionKind.Contrast: (0.4, 0.3, 0.2, 0.1, 0.05),            # scale about the image mean
    CorruptionKind.Pixelate: (2, 3, 4, 5, 7),                       # block edge in pixels
    CorruptionKind.SaltPepper: (0.02, 0.05, 0.1, 0.17, 0.27),       # fraction of pixels hit
}


@dataclass(frozen=True)
class SeverityTable:
    params: Mapping[CorruptionKind, tuple[float, ...]] = field(default_factory=lambda: dict(DEFAULT_PARAMS))

    def __post_init__(self):
        for kind, row in self.params.items():
            if len(row) != len(SEVERITIES):
                raise ValueError(f"{kind.name}: need {len(SEVERITIES)} parameters, got {len(row)}")
            # Contrast is the only kind where a smaller number is harsher.
            diffs = np.diff(row) * (-1 if kind is CorruptionKind.Contrast else 1)
            if np.any(diffs <= 0):
                raise ValueError(f"{kind.name}: parameters must grow strictly harsher, got {row}")

    def param(self, kind: CorruptionKind, severity: int) -> float:
        _check_severity(severity)
        return self.params[kind][severity - 1]

    def scaled(self, kind: CorruptionKind, factor: float) -> SeverityTable:
        """Copy with one kind's parameters multiplied by ``factor``."""
        params = dict(self.params)
        params[kind] = tuple(float(p) * factor for p in params[kind])
        return SeverityTable(params)

    def to_text(self) -> str:
        lines = [f"# severity-table v{TABLE_VERSION}", "kind\t" + "\t".join(f"s{s}" for s in SEVERITIES)]
        for kind in ALL_KINDS:
            if kind in self.params:
                lines.append(kind.name + "\t" + "\t".join(f"{p:g}" for p in self.params[kind]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> SeverityTable:
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines or lines[0] != f"# severity-table v{TABLE_VERSION}":
            raise ValueError("not a severity table, or unsupported version")
        params = {}
        for line in lines[2:]:
            name, *vals = line.split("\t")
            params[CorruptionKind[name]] = tuple(float(v) for v in vals)
        return cls(params)


DEFAULT_TABLE = SeverityTable()


def _check_severity(severity: int) -> None:
    if severity not in SEVERITIES:
        raise ValueError(f"severity must be in 1..5, got {severity}")


def derive_seed(seed: int, sample_index: int, kind: CorruptionKind) -> int:
    return int(np.random.SeedSequence([seed, sample_index, kind.value]).generate_state(1)[0])


def _pixelate(image: np.ndarray, block: int) -> np.ndarray:
    c, h, w = image.shape
    out = np.empty_like(image)
    for r in range(0, h, block):
        for q in range(0, w, block):
            tile = image[:, r:r + block, q:q + block]
            out[:, r:r + block, q:q + block] = tile.mean(axis=(1, 2), keepdims=True)
    return out


def corrupt(image: np.ndarray, kind: CorruptionKind, severity: int, seed: int,
            table: SeverityTable = DEFAULT_TABLE) -> np.ndarray:
    """Corrupt one (C, H, W) image in [0, 1]; the result is clamped to [0, 1]."""
    p = table.param(kind, severity)
    x = np.asarray(image, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    rng = np.random.default_rng(seed)
    if kind is CorruptionKind.GaussianNoise:
        out = x + np.float32(p) * rng.standard_normal(x.shape, dtype=np.float32)
    elif kind is CorruptionKind.GaussianBlur:
        out = gaussian_filter(x, sigma=(0, p, p), mode="nearest")
    elif kind is CorruptionKind.Brightness:
        out = x + np.float32(p)
    elif kind is CorruptionKind.Contrast:
        mean = x.mean(axis=(1, 2), keepdims=True)
        out = (x - mean) * np.float32(p) + mean
    elif kind is CorruptionKind.Pixelate:
        out = _pixelate(x, int(p))
    elif kind is CorruptionKind.SaltPepper:
        u = rng.random(x.shape[1:])
        salt = rng.random(x.shape[1:]) < 0.5
        out = x.copy()
        hit = u < p
        out[:, hit & salt] = 1.0
        out[:, hit & ~salt] = 0.0
    else:
        raise ValueError(f"unknown corruption kind {kind}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def recorded_severities(model: Model, images: np.ndarray, kind: CorruptionKind, seed: int,
                        sample_indices: Sequence[int] | None = None,
                        table: SeverityTable = DEFAULT_TABLE, workers: int = 1) -> np.ndarray:
    """First severity at which each sample's prediction changes, or 6 if it never does.

    ``sample_indices`` gives each image's identity for seeding, so a sample's
    result does not depend on which batch it arrived in.
    """
    images = np.asarray(images, dtype=np.float32)
    idx = np.arange(len(images)) if sample_indices is None else np.asarray(sample_indices)
    if len(idx) != len(images):
        raise ValueError("one sample index per image required")
    seeds = [derive_seed(seed, int(i), kind) for i in idx]
    clean = predict(model, images, workers=workers)
    out = np.full(len(images), NEVER_FLIPS, dtype=np.int64)
    for sev in SEVERITIES:
        pending = np.flatnonzero(out == NEVER_FLIPS)
        if not len(pending):
            break
        batch = np.stack([corrupt(images[j], kind, sev, seeds[j], table) for j in pending])
        flipped = predict(model, batch, workers=workers) != clean[pending]
        out[pending[flipped]] = sev
    return out


def recorded_severity(model: Model, sample: np.ndarray, kind: CorruptionKind, seed: int,
                      sample_index: int = 0, table: SeverityTable = DEFAULT_TABLE) -> int:
    return int(recorded_severities(model, sample[None], kind, seed, [sample_index], table)[0])


def severity_matrix(model: Model, images: np.ndarray, kinds: Sequence[CorruptionKind] = ALL_KINDS,
                    seed: int = 0, sample_indices: Sequence[int] | None = None,
                    table: SeverityTable = DEFAULT_TABLE, workers: int = 1) -> np.ndarray:
    """(N, len(kinds)) recorded severities."""
    return np.stack([recorded_severities(model, images, k, seed, sample_indices, table, workers)
                     for k in kinds], axis=1)


def crc_from_severities(severities: np.ndarray) -> np.ndarray:
    """Population standard deviation along the last axis."""
    sev = np.asarray(severities, dtype=np.float64)
    if sev.shape[-1] < 2:
        raise ValueError(f"need at least 2 corruption kinds, got {sev.shape[-1]}")
    return sev.std(axis=-1)


def crc_scores(model: Model, images: np.ndarray, kinds: Sequence[CorruptionKind] = ALL_KINDS,
               seed: int = 0, sample_indices: Sequence[int] | None = None,
               table: SeverityTable = DEFAULT_TABLE, workers: int = 1) -> np.ndarray:
    if len(kinds) < 2:
        raise ValueError(f"need at least 2 corruption kinds, got {len(kinds)}")
    return crc_from_severities(severity_matrix(model, images, kinds, seed, sample_indices, table, workers))


def crc_score(model: Model, sample: np.ndarray, kinds: Sequence[CorruptionKind] = ALL_KINDS,
              seed: int = 0, sample_index: int = 0, table: SeverityTable = DEFAULT_TABLE) -> float:
    return float(crc_scores(model, sample[None], kinds, seed, [sample_index], table)[0])
