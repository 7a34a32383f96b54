"""Datasets: CSV ingestion, synthetic Gaussian clusters, accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .accountant import default_delta


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    name: str = "data"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if len(self.labels) != len(self.features):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) < 1:
            raise ValueError("dataset is empty")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def default_delta(self) -> float:
        return default_delta(self.n)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.classes, name or self.name)


def load_csv(path: str | Path, classes: int | None = None) -> Dataset:
    """Read ``f0,...,f{D-1},label`` rows. ``classes`` defaults to max label + 1."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header != [f"f{i}" for i in range(d)] + ["label"]:
        raise ValueError(f"{path}:1: header must be f0,...,f{{D-1}},label")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != d + 1:
            raise ValueError(f"{path}:{lineno}: expected {d + 1} cells, got {len(row)}")
        try:
            feats.append([float(c) for c in row[:d]])
            label = float(row[d])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if label != int(label) or label < 0:
            raise ValueError(f"{path}:{lineno}: label {row[d]!r} is not a class index")
        if classes is not None and label >= classes:
            raise ValueError(f"{path}:{lineno}: label {int(label)} out of range for {classes} classes")
        labels.append(int(label))
    if not labels:
        raise ValueError(f"{path}: no data rows")
    k = classes if classes is not None else max(max(labels) + 1, 2)
    return Dataset(np.array(feats), np.array(labels), k, path.stem)


def write_csv(ds: Dataset, path: str | Path):
    # repr() of a float round-trips exactly
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(ds.d_in)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def make_synthetic(classes: int = 3, n: int = 4096, d_in: int = 32, seed: int = 0, separation: float = 3.0,
                   modes: int = 1, task_seed: int | None = None, relabel_seed: int | None = None,
                   name: str | None = None) -> Dataset:
    """Gaussian clusters with unit covariance.

    There are ``classes * modes`` centres of norm ``separation`` in random
    directions, ``modes`` per class. A row picks a class uniformly, then one
    of that class's centres. ``task_seed`` fixes the centres (defaults to
    ``seed``), so datasets sharing it and differing in ``seed`` are fresh
    samples of one distribution. ``relabel_seed`` shuffles which class owns
    each centre: a related task over the same clusters.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if n < 1 or d_in < 1 or modes < 1:
        raise ValueError("n, d_in and modes must be >= 1")
    task_rng = np.random.default_rng([task_seed if task_seed is not None else seed, 0x7A5C])
    dirs = task_rng.standard_normal((classes * modes, d_in))
    centres = separation * dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    owner = np.repeat(np.arange(classes), modes)
    if relabel_seed is not None:
        owner = np.random.default_rng([relabel_seed, 0x1AB]).permutation(owner)
    by_class = np.stack([np.flatnonzero(owner == c) for c in range(classes)])
    rng = np.random.default_rng([seed, 0xDA7A])
    labels = rng.integers(0, classes, n)
    which = by_class[labels, rng.integers(0, modes, n)]
    features = centres[which] + rng.standard_normal((n, d_in))
    return Dataset(features, labels, classes, name or f"synthetic-{classes}c-s{seed}")


def evaluate(model, ds: Dataset) -> float:
    """Fraction of rows whose argmax logit (lowest index on ties) is the label."""
    if model.dims.d_in != ds.d_in:
        raise ValueError(f"model expects {model.dims.d_in} features, dataset has {ds.d_in}")
    if model.dims.classes != ds.classes:
        raise ValueError(f"model has {model.dims.classes} classes, dataset has {ds.classes}")
    return float(np.mean(model.predict(ds.features) == ds.labels))
