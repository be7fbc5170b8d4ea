"""Dataset readers and analytic backdoor triggers."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

DTYPE = np.float32


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    poison_flags: np.ndarray = None  # (N,) bool

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poison_flags is None:
            self.poison_flags = np.zeros(len(self.labels), dtype=bool)
        self.poison_flags = np.asarray(self.poison_flags, dtype=bool)
        if not (len(self.images) == len(self.labels) == len(self.poison_flags)):
            raise ValueError(
                f"length mismatch: {len(self.images)} images, {len(self.labels)} labels, "
                f"{len(self.poison_flags)} flags")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx)
        return LabeledDataset(self.images[idx], self.labels[idx], self.poison_flags[idx])

    def inputs(self) -> np.ndarray:
        """Images only; the view handed to defense code."""
        return self.images


# ---------------------------------------------------------------- readers

def _open(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    data = _open(path)
    if len(data) < 4:
        raise DatasetFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = int(np.prod(dims))
    if len(data) - header != need:
        raise DatasetFormatError(f"{path}: expected {need} payload bytes, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{root}: no {stem}[.gz]")


def load_mnist(path: str | Path, split: str = "train") -> LabeledDataset:
    root = Path(path)
    img_name, lbl_name = MNIST_FILES[split]
    images = read_idx(_find(root, img_name), 0x00000803)
    labels = read_idx(_find(root, lbl_name), 0x00000801)
    if len(images) != len(labels):
        raise DatasetFormatError(f"{root}: {len(images)} images but {len(labels)} labels")
    return LabeledDataset((images.astype(DTYPE) / 255.0)[:, None], labels.astype(np.int64))


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10_batch(path: str | Path) -> LabeledDataset:
    path = Path(path)
    data = path.read_bytes()
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise DatasetFormatError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"{path}: label byte {labels.max()} outside [0, 10)")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(DTYPE) / 255.0
    return LabeledDataset(images, labels)


def load_cifar10(path: str | Path, split: str = "train") -> LabeledDataset:
    path = Path(path)
    if path.is_file():
        return load_cifar10_batch(path)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [load_cifar10_batch(path / n) for n in names]
    return LabeledDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def load_dataset(path: str | Path, fmt: str, split: str = "train") -> LabeledDataset:
    fmt = fmt.lower().replace("_", "-")
    if fmt in ("mnist", "mnist-idx"):
        return load_mnist(path, split)
    if fmt in ("cifar10", "cifar10-binary", "cifar-10"):
        return load_cifar10(path, split)
    raise ValueError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------- triggers

@dataclass(frozen=True)
class Patch:
    row: int
    col: int
    height: int = 3
    width: int = 3
    value: float = 1.0


@dataclass(frozen=True, eq=False)
class Blended:
    image: np.ndarray  # (C, H, W)
    alpha: float = 0.1


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float = 0.08
    frequency: float = 6.0


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    variant: Union[Patch, Blended, Sinusoid]
    target_label: int = 0

    @property
    def name(self) -> str:
        return {Patch: "badnets", Blended: "blended", Sinusoid: "sig"}[type(self.variant)]


def badnets_trigger(image_shape, size: int = 3, target_label: int = 0) -> TriggerSpec:
    """White square in the bottom-right corner."""
    _, h, w = image_shape
    return TriggerSpec(Patch(h - size, w - size, size, size, 1.0), target_label)


def blended_trigger(image_shape, alpha: float = 0.1, seed: int = 1234, target_label: int = 0) -> TriggerSpec:
    noise = np.random.default_rng(seed).random(tuple(image_shape), dtype=np.float64).astype(DTYPE)
    return TriggerSpec(Blended(noise, alpha), target_label)


def sig_trigger(amplitude: float = 0.08, frequency: float = 6.0, target_label: int = 0) -> TriggerSpec:
    return TriggerSpec(Sinusoid(amplitude, frequency), target_label)


def default_trigger(attack: str, image_shape, target_label: int = 0, seed: int = 1234) -> TriggerSpec:
    attack = attack.lower()
    if attack in ("badnets", "badnet", "patch"):
        return badnets_trigger(image_shape, target_label=target_label)
    if attack == "blended":
        return blended_trigger(image_shape, seed=seed, target_label=target_label)
    if attack == "sig":
        return sig_trigger(target_label=target_label)
    raise ValueError(f"unknown attack {attack!r}")


def validate_trigger(spec: TriggerSpec, image_shape) -> None:
    c, h, w = image_shape
    v = spec.variant
    if isinstance(v, Patch):
        if v.row < 0 or v.col < 0 or v.height < 1 or v.width < 1 or v.row + v.height > h or v.col + v.width > w:
            raise ValueError(f"patch ({v.row},{v.col}) {v.height}x{v.width} does not fit a {h}x{w} image")
    elif isinstance(v, Blended):
        if tuple(v.image.shape) != tuple(image_shape):
            raise ValueError(f"blend image shape {v.image.shape} != image shape {tuple(image_shape)}")
        if not 0.0 <= v.alpha < 1.0:
            raise ValueError(f"alpha {v.alpha} outside [0, 1)")
    elif isinstance(v, Sinusoid):
        if not 0.0 <= v.amplitude <= 1.0:
            raise ValueError(f"amplitude {v.amplitude} outside [0, 1]")
    else:
        raise TypeError(f"unknown trigger variant {type(v).__name__}")


def sinusoid_pattern(width: int, amplitude: float, frequency: float) -> np.ndarray:
    cols = np.arange(width, dtype=np.float64)
    return (amplitude * np.sin(2 * np.pi * frequency * cols / width)).astype(DTYPE)


def apply_trigger_batch(images: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Triggered copy of an (N, C, H, W) stack."""
    images = np.asarray(images, dtype=DTYPE)
    validate_trigger(spec, images.shape[1:])
    v = spec.variant
    out = images.copy()
    if isinstance(v, Patch):
        out[:, :, v.row:v.row + v.height, v.col:v.col + v.width] = DTYPE(v.value)
    elif isinstance(v, Blended):
        if v.alpha == 0:
            return out
        out = (1 - DTYPE(v.alpha)) * out + DTYPE(v.alpha) * v.image
    else:
        out = out + sinusoid_pattern(images.shape[3], v.amplitude, v.frequency)
    return np.clip(out, 0.0, 1.0).astype(DTYPE, copy=False)


def apply_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    return apply_trigger_batch(np.asarray(image)[None], spec)[0]


# ---------------------------------------------------------------- poisoning

def _poison_count(rate: float, n: int) -> int:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poisoning rate {rate} outside [0, 1]")
    return int(round(rate * n))


def poison_training_set(dataset: LabeledDataset, spec: TriggerSpec, rate: float, seed: int) -> LabeledDataset:
    """Trigger and relabel exactly round(rate * N) samples not already in the target class."""
    k = _poison_count(rate, len(dataset))
    eligible = np.flatnonzero(dataset.labels != spec.target_label)
    if k > len(eligible):
        raise ValueError(f"cannot poison {k} samples, only {len(eligible)} are outside the target class")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(eligible, size=k, replace=False))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    flags = dataset.poison_flags.copy()
    if k:
        images[chosen] = apply_trigger_batch(images[chosen], spec)
        labels[chosen] = spec.target_label
        flags[chosen] = True
    return LabeledDataset(images, labels, flags)


def make_defender_batch(clean_test: LabeledDataset, spec: TriggerSpec, batch_size: int,
                        rate: float, seed: int) -> LabeledDataset:
    """Unlabeled-at-defense-time batch with round(rate * batch_size) triggered samples.

    Labels keep the ground truth (for evaluation only); triggered samples are
    drawn from non-target classes.
    """
    if batch_size > len(clean_test):
        raise ValueError(f"batch of {batch_size} larger than source of {len(clean_test)}")
    k = _poison_count(rate, batch_size)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(clean_test), size=batch_size, replace=False)
    batch = clean_test.subset(idx)
    eligible = np.flatnonzero(batch.labels != spec.target_label)
    if k > len(eligible):
        raise ValueError(f"batch has only {len(eligible)} non-target samples, need {k}")
    chosen = np.sort(rng.choice(eligible, size=k, replace=False))
    if k:
        batch.images[chosen] = apply_trigger_batch(batch.images[chosen], spec)
        batch.poison_flags[chosen] = True
    return batch


def make_sparse_batches(clean_test: LabeledDataset, spec: TriggerSpec, n_batches: int, batch_size: int,
                        rate: float, seed: int, poisoned_batch_fraction: float = 0.5) -> list[LabeledDataset]:
    """Batches where the round(rate * total) triggered samples sit in only some batches."""
    total = n_batches * batch_size
    if total > len(clean_test):
        raise ValueError(f"{n_batches} batches of {batch_size} exceed source of {len(clean_test)}")
    k = _poison_count(rate, total)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(clean_test), size=total, replace=False)
    pool = clean_test.subset(idx)
    n_hot = max(1, int(round(poisoned_batch_fraction * n_batches))) if k else 0
    hot = np.sort(rng.choice(n_batches, size=n_hot, replace=False)) if n_hot else np.array([], dtype=int)
    eligible = np.array([i for i in range(total)
                         if i // batch_size in set(hot.tolist()) and pool.labels[i] != spec.target_label])
    if k > len(eligible):
        raise ValueError(f"not enough non-target samples in poisoned batches for {k} triggers")
    chosen = np.sort(rng.choice(eligible, size=k, replace=False)) if k else np.array([], dtype=int)
    if k:
        pool.images[chosen] = apply_trigger_batch(pool.images[chosen], spec)
        pool.poison_flags[chosen] = True
    return [pool.subset(np.arange(b * batch_size, (b + 1) * batch_size)) for b in range(n_batches)]


def concat(datasets: list[LabeledDataset]) -> LabeledDataset:
    return LabeledDataset(np.concatenate([d.images for d in datasets]),
                          np.concatenate([d.labels for d in datasets]),
                          np.concatenate([d.poison_flags for d in datasets]))


def asr_set(clean_test: LabeledDataset, spec: TriggerSpec) -> np.ndarray:
    """Triggered copies of every clean-test image whose true label is not the target."""
    keep = clean_test.labels != spec.target_label
    return apply_trigger_batch(clean_test.images[keep], spec)
