"""Datasets, IID sharding and the poisoning primitives used by attackers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, ParseError


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray = field(repr=False)
    label: int


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``X`` (n, p) in [0, 1] with integer labels ``y`` in [0, k)."""

    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64).reshape(-1, self.feature_dim)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ConfigError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ConfigError("num_classes and feature_dim must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if X.size and (X.min() < 0.0 or X.max() > 1.0 or not np.all(np.isfinite(X))):
            raise ConfigError("features must lie in [0, 1]")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self.example(i)

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(self.X[i].copy(), int(self.y[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.feature_dim)

    def replace(self, X=None, y=None) -> "Dataset":
        return Dataset(
            self.X if X is None else X,
            self.y if y is None else y,
            self.num_classes,
            self.feature_dim,
        )

    @classmethod
    def from_examples(
        cls, examples: Sequence[LabeledExample], num_classes: int, feature_dim: int
    ) -> "Dataset":
        X = np.array([e.features for e in examples], dtype=np.float64)
        y = np.array([e.label for e in examples], dtype=np.int64)
        return cls(X.reshape(-1, feature_dim), y, num_classes, feature_dim)


@dataclass(frozen=True)
class PatternKey:
    """Trigger: fixed feature overrides plus the label the backdoor maps to."""

    overrides: tuple[tuple[int, float], ...]
    target_label: int

    def __post_init__(self):
        overrides = tuple((int(i), float(v)) for i, v in self.overrides)
        if not overrides:
            raise ConfigError("a pattern needs at least one override")
        idx = [i for i, _ in overrides]
        if len(set(idx)) != len(idx):
            raise ConfigError("pattern indices must be distinct")
        if min(idx) < 0:
            raise ConfigError("pattern indices must be non-negative")
        if any(not 0.0 <= v <= 1.0 for _, v in overrides):
            raise ConfigError("pattern values must lie in [0, 1]")
        if self.target_label < 0:
            raise ConfigError("target_label must be non-negative")
        object.__setattr__(self, "overrides", overrides)

    @property
    def indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.overrides], dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.overrides], dtype=np.float64)

    def check(self, feature_dim: int, num_classes: int | None = None) -> None:
        if int(self.indices.max()) >= feature_dim:
            raise ArgumentError(
                f"pattern index {int(self.indices.max())} out of range for p={feature_dim}"
            )
        if num_classes is not None and self.target_label >= num_classes:
            raise ArgumentError(
                f"target label {self.target_label} out of range for k={num_classes}"
            )


_STENCILS = {
    "pixel": [(0, 0)],
    "cross": [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
    "square": [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)],
}


def make_pattern(
    shape: str,
    feature_dim: int,
    target_label: int,
    value: float = 0.0,
    width: int | None = None,
    center: tuple[int, int] = (1, 1),
) -> PatternKey:
    """Build a pixel / cross / square trigger on a flattened ``width``-wide image.

    ``width`` defaults to sqrt(p) when p is a perfect square; otherwise the
    vector is treated as a single row and the stencil is laid out linearly.
    """
    if shape not in _STENCILS:
        raise ConfigError(f"unknown pattern shape {shape!r}; use one of {sorted(_STENCILS)}")
    if width is None:
        root = math.isqrt(feature_dim)
        width = root if root * root == feature_dim else feature_dim
    height = math.ceil(feature_dim / width)
    r0, c0 = center
    cells = []
    if height == 1:
        # linear layout: consecutive indices starting at the center column
        n = len(_STENCILS[shape])
        cells = [c0 + j for j in range(n)]
    else:
        for dr, dc in _STENCILS[shape]:
            r, c = r0 + dr, c0 + dc
            if not (0 <= r < height and 0 <= c < width):
                raise ConfigError(f"{shape} pattern at {center} leaves the {height}x{width} grid")
            cells.append(r * width + c)
    if max(cells) >= feature_dim or min(cells) < 0:
        raise ConfigError(f"{shape} pattern does not fit in {feature_dim} features")
    return PatternKey(tuple((i, value) for i in cells), target_label)


def generate_synthetic(
    k: int, p: int, n_per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian blobs, one uniformly drawn mean per class, clipped to [0, 1].

    Examples are returned in a seeded shuffled order.
    """
    if k < 2 or p < 2 or n_per_class < 1:
        raise ConfigError(f"invalid synthetic sizes k={k}, p={p}, n_per_class={n_per_class}")
    if spread < 0:
        raise ConfigError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.0, 1.0, size=(k, p))
    y = np.repeat(np.arange(k), n_per_class)
    X = means[y] + spread * rng.standard_normal((k * n_per_class, p))
    np.clip(X, 0.0, 1.0, out=X)
    order = rng.permutation(len(y))
    return Dataset(X[order], y[order], k, p)


def load_dataset(path, format: str = "csv-labeled") -> Dataset:
    """Read ``p`` feature columns followed by one integer label per row, no header."""
    if format != "csv-labeled":
        raise ConfigError(f"unsupported dataset format {format!r}")
    rows_X: list[list[float]] = []
    rows_y: list[int] = []
    p = None
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ParseError("need at least one feature and a label", lineno)
            if p is None:
                p = len(row) - 1
            elif len(row) - 1 != p:
                raise ParseError(f"expected {p + 1} columns, got {len(row)}", lineno)
            try:
                feats = [float(c) for c in row[:-1]]
            except ValueError as exc:
                raise ParseError(f"bad feature value ({exc})", lineno) from None
            for v in feats:
                if not (0.0 <= v <= 1.0):
                    raise ParseError(f"feature {v} outside [0, 1]", lineno)
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise ParseError(f"label {row[-1]!r} is not an integer", lineno) from None
            if label < 0:
                raise ParseError(f"negative label {label}", lineno)
            rows_X.append(feats)
            rows_y.append(label)
    if not rows_y:
        raise ParseError(f"{path}: no data rows")
    return Dataset(np.array(rows_X), np.array(rows_y), max(rows_y) + 1, p)


def holdout_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first round(n * fraction) examples vs. the rest."""
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(dataset)
    if n == 0:
        raise ArgumentError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(n)
    m = round_half_up(n * fraction)
    return dataset.subset(order[:m]), dataset.subset(order[m:])


def split_validation(
    test_set: Dataset, validation_fraction: float = 0.2, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Carve the consensus validation set out of the test set: (validation, test)."""
    return holdout_split(test_set, validation_fraction, seed)


def partition_iid(train: Dataset, n_clients: int, seed: int) -> list[np.ndarray]:
    """Shuffle and deal indices round-robin; entry ``c`` is client ``c``'s shard."""
    n = len(train)
    if n_clients < 1 or n_clients > n:
        raise ConfigError(f"cannot split {n} examples among {n_clients} clients")
    order = np.random.default_rng(seed).permutation(n)
    return [order[c::n_clients].copy() for c in range(n_clients)]


def apply_pattern(example: LabeledExample, pattern: PatternKey) -> LabeledExample:
    features = np.array(example.features, dtype=np.float64)
    pattern.check(features.shape[0])
    features[pattern.indices] = pattern.values
    return LabeledExample(features, pattern.target_label)


def _apply_pattern_rows(dataset: Dataset, rows: np.ndarray, pattern: PatternKey) -> Dataset:
    pattern.check(dataset.feature_dim, dataset.num_classes)
    X = np.array(dataset.X)
    y = np.array(dataset.y)
    X[np.ix_(rows, pattern.indices)] = pattern.values
    y[rows] = pattern.target_label
    return dataset.replace(X, y)


def poison_backdoor(
    dataset: Dataset, pattern: PatternKey, poison_fraction: float = 1.0, seed: int = 0
) -> Dataset:
    if not 0.0 < poison_fraction <= 1.0:
        raise ArgumentError(f"poison_fraction must lie in (0, 1], got {poison_fraction}")
    n = len(dataset)
    m = round_half_up(n * poison_fraction)
    rows = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    return _apply_pattern_rows(dataset, rows, pattern)


def flip_labels(dataset: Dataset, flip_fraction: float = 1.0, seed: int = 0) -> Dataset:
    """Relabel a seeded subset, each to a uniformly drawn *different* class."""
    k = dataset.num_classes
    if k < 2:
        raise ConfigError("label flipping needs at least two classes")
    if not 0.0 < flip_fraction <= 1.0:
        raise ArgumentError(f"flip_fraction must lie in (0, 1], got {flip_fraction}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    m = round_half_up(n * flip_fraction)
    rows = np.sort(rng.choice(n, size=m, replace=False))
    y = np.array(dataset.y)
    y[rows] = (y[rows] + rng.integers(1, k, size=m)) % k
    return dataset.replace(y=y)


def build_backdoor_test(
    test: Dataset, pattern: PatternKey, exclude_target: bool = False
) -> Dataset:
    """Stamp the trigger on every test example and relabel to the target.

    With ``exclude_target`` the examples already belonging to the target class
    are dropped first, so the score is an attack success rate rather than
    including the free 1/k hits of the target class itself.
    """
    rows = np.arange(len(test))
    if exclude_target:
        keep = np.flatnonzero(test.y != pattern.target_label)
        test = test.subset(keep)
        rows = np.arange(len(test))
    return _apply_pattern_rows(test, rows, pattern)
