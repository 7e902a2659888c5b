"""Synthetic classification tasks, batching, and augmentation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .tensor import SeededRng

KINDS = ("blobs", "spirals", "rings")
AUGMENT_KINDS = ("none", "gaussian_jitter", "random_shift", "flip_sign")

# variant id used for un-augmented samples
ORIGINAL = -1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (N, raw_dim) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def raw_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, dict(self.source))


def gen_dataset(kind: str, N: int, C: int, noise: float, seed: int) -> Dataset:
    """Deterministic 2-D toy dataset with classes assigned round-robin."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if C < 2 or N < C:
        raise ValueError(f"need N >= C >= 2, got N={N}, C={C}")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = SeededRng(seed, 0xDA7A)
    labels = np.arange(N) % C
    t = rng.uniform(N)  # position along the class manifold
    if kind == "blobs":
        angle = 2 * np.pi * labels / C
        base = 3.0 * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    elif kind == "spirals":
        r = 0.2 + 0.8 * t
        angle = 2 * np.pi * labels / C + 2.0 * np.pi * t
        base = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    else:
        r = 1.0 + labels
        angle = 2 * np.pi * t
        base = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    features = base + noise * rng.normal((N, 2))
    source = {"kind": kind, "N": N, "C": C, "noise": noise, "seed": seed}
    return Dataset(features, labels, C, source)


def train_test_split(ds: Dataset, seed: int, train_frac: float = 0.8) -> tuple[Dataset, Dataset]:
    perm = SeededRng(seed, 0x5911).permutation(len(ds))
    n_train = int(round(train_frac * len(ds)))
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def load_csv(path) -> Dataset:
    """Read a header-prefixed CSV whose last column is an integer label."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no samples")
    feats = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows])
    return Dataset(feats, labels, int(labels.max()) + 1, {"kind": "csv", "path": str(path), "header": header})


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    keys: list  # (sample id, variant id) per row


def batches(ds: Dataset, batch_size: int, epoch_seed: int, keys=None) -> Iterator[Batch]:
    """One shuffled pass over ``ds``; the order depends only on ``epoch_seed``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if keys is None:
        keys = [(i, ORIGINAL) for i in range(len(ds))]
    order = SeededRng(epoch_seed, 0xBA7C).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(ds.features[idx], ds.labels[idx], [keys[i] for i in idx])


@dataclass
class AugmentPolicy:
    """Feature-space analogues of image flips/shifts.

    ``ratio`` is the number of precomputed variants per sample; ``None``
    means unbounded (a fresh random transform every epoch).
    """

    kind: str = "none"
    sigma: float = 0.0
    max_offset: float = 0.0
    p: float = 0.0
    ratio: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if self.sigma < 0 or self.max_offset < 0 or not 0 <= self.p <= 1:
            raise ValueError("augmentation magnitudes must be non-negative and p in [0, 1]")
        if self.ratio is not None and self.ratio < 1:
            raise ValueError("finite augmentation ratio must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.kind != "none"


def augment(x: np.ndarray, policy: AugmentPolicy, rng: SeededRng) -> np.ndarray:
    if policy.kind == "none":
        return x
    if policy.kind == "gaussian_jitter":
        return x + rng.normal(x.shape, policy.sigma) if policy.sigma > 0 else x
    if policy.kind == "random_shift":
        return x + rng.uniform(x.shape[-1:], -policy.max_offset, policy.max_offset)
    flips = rng.uniform(x.shape) < policy.p
    return np.where(flips, -x, x)


def variant_id(policy: AugmentPolicy, epoch: int) -> int:
    """Which augmented variant a sample uses at ``epoch``."""
    if policy.ratio is None:
        return epoch
    return epoch % policy.ratio


def augment_sample(x: np.ndarray, sample_id: int, policy: AugmentPolicy, epoch: int) -> tuple[np.ndarray, int]:
    v = variant_id(policy, epoch)
    # finite ratio: the seed depends on the variant only, so variants repeat exactly
    return augment(x, policy, SeededRng(policy.seed, 0xA06, sample_id, v)), v


def epoch_pool(ds: Dataset, policy: AugmentPolicy, epoch: int) -> tuple[Dataset, list]:
    """Training pool for one epoch: all originals plus one augmented copy each.

    With augmentation off this is just ``ds``.
    """
    keys = [(i, ORIGINAL) for i in range(len(ds))]
    if not policy.enabled:
        return ds, keys
    aug = np.empty_like(ds.features)
    for i in range(len(ds)):
        aug[i], v = augment_sample(ds.features[i], i, policy, epoch)
        keys.append((i, v))
    pool = Dataset(np.concatenate([ds.features, aug]), np.concatenate([ds.labels, ds.labels]),
                   ds.n_classes, dict(ds.source))
    return pool, keys
