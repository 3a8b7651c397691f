"""Primary-task data: Gaussian blobs, CSV ingestion, seeded splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ParseError


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ""
    n_classes: int | None = None

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, 0)
        if len(x) != len(y):
            raise ConfigError(f"{len(x)} inputs but {len(y)} labels")
        if self.n_classes is not None and y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DomainError(f"labels outside [0, {self.n_classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1] if self.inputs.ndim == 2 else 0

    def subset(self, idx, name=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], name or self.name, self.n_classes)


def gen_blobs(n_classes: int, dim: int, n_per_class: int, spread: float, seed: int) -> LabeledDataset:
    """Class means on the sphere of radius ``4 * spread``, isotropic Gaussian noise."""
    if n_classes < 2 or dim < 1:
        raise ConfigError("need n_classes >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= 4.0 * spread
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + spread * rng.normal(size=(len(labels), dim))
    return LabeledDataset(x, labels, f"blobs-c{n_classes}-d{dim}-s{seed}", n_classes)


def load_csv(path, dim: int, n_classes: int) -> LabeledDataset:
    xs, ys = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ParseError(f"expected {dim + 1} columns, got {len(row)}", f"line {lineno}")
            try:
                x = [float(v) for v in row[:dim]]
                y = int(row[dim])
            except ValueError as exc:
                raise ParseError(str(exc), f"line {lineno}") from exc
            if not 0 <= y < n_classes:
                raise DomainError(f"label {y} outside [0, {n_classes}) at line {lineno}")
            xs.append(x)
            ys.append(y)
    inputs = np.array(xs, dtype=np.float64).reshape(len(xs), dim)
    return LabeledDataset(inputs, np.array(ys, dtype=np.int64), str(path), n_classes)


def write_csv(ds: LabeledDataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(ds.inputs, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    test: float = 0.2
    adversary: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.test, self.adversary)
        if any(f < 0 for f in fr) or self.train <= 0:
            raise ConfigError(f"split fractions must be non-negative, train positive: {fr}")
        if sum(fr) > 1 + 1e-12:
            raise ConfigError(f"split fractions sum to {sum(fr)} > 1")


def split(ds: LabeledDataset, spec: SplitSpec):
    """Disjoint (train, test, adversary) subsets from one seeded permutation."""
    n = len(ds)
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_tr = int(round(spec.train * n))
    n_te = int(round(spec.test * n))
    n_ad = min(int(round(spec.adversary * n)), n - n_tr - n_te)
    a, b = n_tr, n_tr + n_te
    return (ds.subset(perm[:a], f"{ds.name}/train"),
            ds.subset(perm[a:b], f"{ds.name}/test"),
            ds.subset(perm[b:b + n_ad], f"{ds.name}/adversary"))
