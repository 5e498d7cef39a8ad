"""Dataset loading: synthetic blobs/moons and labelled CSV files."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

__all__ = ["DatasetSpec", "load_dataset"]


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"  # blobs | moons | csv
    n: int = 200
    features: int = 4
    classes: int = 3
    noise: float = 0.1
    seed: int = 0
    path: str = ""
    label_column: str = "label"

    @property
    def feature_count(self) -> int:
        return 2 if self.kind == "moons" else self.features


def _read_csv(spec: DatasetSpec):
    if not spec.path:
        raise ValueError("csv dataset needs a path")
    if not os.path.exists(spec.path):
        raise ValueError(f"csv dataset not found: {spec.path}")
    with open(spec.path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{spec.path}: empty file") from None
        if spec.label_column not in header:
            raise ValueError(f"{spec.path}: no column named {spec.label_column!r}")
        label_at = header.index(spec.label_column)
        feats, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{spec.path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            try:
                feats.append([float(c) for i, c in enumerate(row) if i != label_at])
            except ValueError:
                raise ValueError(f"{spec.path}:{line_no}: non-numeric feature value") from None
            labels.append(row[label_at])
    if not feats:
        raise ValueError(f"{spec.path}: no data rows")
    classes = sorted(set(labels))
    y = np.array([classes.index(v) for v in labels])
    return np.array(feats), y


def load_dataset(spec: DatasetSpec):
    """(train_x, train_y, eval_x, eval_y) with a deterministic 80/20 split.

    Rows are shuffled with the dataset seed before splitting, so the same
    spec always yields the same arrays.
    """
    if spec.kind == "blobs":
        from sklearn.datasets import make_blobs

        x, y = make_blobs(
            n_samples=spec.n,
            n_features=spec.features,
            centers=spec.classes,
            random_state=spec.seed,
        )
    elif spec.kind == "moons":
        from sklearn.datasets import make_moons

        x, y = make_moons(n_samples=spec.n, noise=spec.noise, random_state=spec.seed)
    elif spec.kind == "csv":
        x, y = _read_csv(spec)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    order = np.random.default_rng(spec.seed).permutation(len(x))
    x, y = x[order], y[order]
    cut = max(1, int(round(0.8 * len(x))))
    if cut >= len(x):
        raise ValueError("dataset too small to split")
    return x[:cut], y[:cut], x[cut:], y[cut:]
