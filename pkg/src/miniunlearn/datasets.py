"""Dataset ingestion and generation."""

from __future__ import annotations

import csv
import gzip
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .objective import Dataset


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def _binarize(labels: np.ndarray, classes: Sequence[float] | None, where: str):
    """Map labels to {0, 1}. Returns (keep_mask, binary_labels)."""
    if classes is not None:
        neg, pos = (float(c) for c in classes)
        keep = (labels == neg) | (labels == pos)
        return keep, (labels == pos).astype(np.float64)
    uniq = set(np.unique(labels).tolist())
    if uniq <= {0.0, 1.0}:
        return np.ones(labels.shape, bool), labels.astype(np.float64)
    if uniq <= {-1.0, 1.0}:
        return np.ones(labels.shape, bool), (labels > 0).astype(np.float64)
    raise DataError(f"{where}: labels {sorted(uniq)[:5]} are not binary; pass classes=(neg, pos)")


def load_libsvm(path, n_features: int | None = None, classes: Sequence[float] | None = None,
                binary: bool = True) -> Dataset:
    """Read a libsvm/svmlight text file into a dense dataset.

    Feature indices are 1-based. ``classes`` selects a (negative, positive)
    label pair from a multi-class file and drops all other rows. With
    ``binary=False`` labels are kept as real numbers.
    """
    labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_idx = 0
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                labels.append(float(tokens[0]))
                row = []
                for tok in tokens[1:]:
                    k, v = tok.split(":", 1)
                    idx = int(k)
                    if idx < 1 or (n_features is not None and idx > n_features):
                        raise ParseError(f"{path}:{lineno}: feature index {idx} out of range")
                    row.append((idx - 1, float(v)))
                    max_idx = max(max_idx, idx)
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no samples")
    p = n_features if n_features is not None else max_idx
    if p < 1:
        raise ParseError(f"{path}: no features")
    x = np.zeros((len(rows), p))
    for i, row in enumerate(rows):
        for j, v in row:
            x[i, j] = v
    y = np.asarray(labels)
    if not binary:
        return Dataset(x, y)
    keep, yb = _binarize(y, classes, str(path))
    if not keep.any():
        raise DataError(f"{path}: no rows with labels {classes}")
    return Dataset(x[keep], yb[keep])


def load_csv(path, label_column: int = 0, classes: Sequence[float] | None = None,
             binary: bool = True) -> Dataset:
    """Read a headerless numeric CSV. ``label_column`` may be negative."""
    values = []
    with _open_text(path) as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values.append([float(c) for c in row])
            except ValueError:
                col = next(i for i, c in enumerate(row, start=1) if not _is_float(c))
                raise ParseError(f"{path}: row {r}, column {col}: non-numeric cell {row[col - 1]!r}") from None
            if len(values[-1]) != len(values[0]):
                raise ParseError(f"{path}: row {r} has {len(values[-1])} cells, expected {len(values[0])}")
    if not values:
        raise ParseError(f"{path}: no samples")
    a = np.asarray(values)
    if a.shape[1] < 2:
        raise ParseError(f"{path}: need a label column and at least one feature")
    col = label_column % a.shape[1]
    y = a[:, col]
    x = np.delete(a, col, axis=1)
    if not binary:
        return Dataset(x, y)
    keep, yb = _binarize(y, classes, str(path))
    return Dataset(x[keep], yb[keep])


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_csv(dataset: Dataset, path, label_column: int = 0) -> None:
    a = np.insert(dataset.features, label_column, dataset.labels, axis=1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in a:
            w.writerow([repr(float(v)) for v in row])


def normalize_rows(dataset: Dataset) -> Dataset:
    """Scale every feature row to unit L2 norm (zero rows stay zero)."""
    norms = np.linalg.norm(dataset.features, axis=1)
    norms[norms == 0] = 1.0
    return Dataset(dataset.features / norms[:, None], dataset.labels, dataset.sample_ids)


@dataclass(frozen=True)
class SyntheticSpec:
    n: int = 500
    p: int = 10
    seed: int = 0
    ground_truth_w: tuple | None = None
    feature_scale: float = 1.0
    label_noise: float = 0.0
    kind: Literal["logistic", "quadratic"] = "logistic"
    signal: float = 5.0  # norm of the drawn ground truth when none is given

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise ConfigError("synthetic n and p must be >= 1")
        if self.feature_scale <= 0:
            raise ConfigError("feature_scale must be > 0")
        if self.kind == "logistic" and not 0.0 <= self.label_noise <= 0.5:
            raise ConfigError("label_noise must lie in [0, 0.5]")
        if self.ground_truth_w is not None and len(self.ground_truth_w) != self.p:
            raise ConfigError("ground_truth_w must have p entries")

    @classmethod
    def parse(cls, text: str) -> "SyntheticSpec":
        """Parse ``"n=500,p=10,seed=3,noise=0.1,scale=1,kind=quadratic"``."""
        aliases = {"noise": "label_noise", "scale": "feature_scale"}
        casts = {"n": int, "p": int, "seed": int, "label_noise": float,
                 "feature_scale": float, "signal": float, "kind": str}
        kwargs = {}
        for part in filter(None, (s.strip() for s in text.split(","))):
            if "=" not in part:
                raise ConfigError(f"bad synthetic field {part!r}; expected key=value")
            k, v = (s.strip() for s in part.split("=", 1))
            k = aliases.get(k, k)
            if k not in casts:
                raise ConfigError(f"unknown synthetic field {k!r}")
            try:
                kwargs[k] = casts[k](v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kwargs)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian features scaled to row norm ``feature_scale``.

    Logistic labels threshold ``sigmoid(w.x)`` and flip a ``label_noise``
    fraction at random; quadratic labels are ``w.x + label_noise * N(0, 1)``.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    x = rng.standard_normal((spec.n, spec.p))
    x *= spec.feature_scale / np.linalg.norm(x, axis=1)[:, None]
    if spec.ground_truth_w is None:
        w = rng.standard_normal(spec.p)
        w *= spec.signal / np.linalg.norm(w)
    else:
        w = np.asarray(spec.ground_truth_w, dtype=np.float64)
    z = x @ w
    if spec.kind == "quadratic":
        y = z + spec.label_noise * rng.standard_normal(spec.n)
    else:
        y = (z >= 0).astype(np.float64)
        flip = rng.random(spec.n) < spec.label_noise
        y[flip] = 1.0 - y[flip]
    return Dataset(x, y)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(dataset.n)
    n_test = max(1, int(round(test_fraction * dataset.n)))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return dataset.subset(train_idx), dataset.subset(test_idx)


def load_mnist_pair(digits: tuple[int, int] = (0, 1), path=None, normalize: bool = True,
                    test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Binary MNIST subset ``digits[0]`` (label 0) vs ``digits[1]`` (label 1).

    ``path`` may point at an MNIST libsvm file. Without it, the 5000-image
    MNIST sample bundled with mlxtend is used (500 images per digit). Pixels
    are scaled to [0, 1] and, by default, rows normalized to unit norm.
    Returns ``(train, test)``.
    """
    if path is not None:
        ds = load_libsvm(path, n_features=784, classes=digits)
        x, y = ds.features, ds.labels
    else:
        try:
            from mlxtend.data import mnist_data
        except ImportError as exc:  # pragma: no cover
            raise DataError("bundled MNIST needs the 'mlxtend' package") from exc
        xa, ya = mnist_data()
        keep = (ya == digits[0]) | (ya == digits[1])
        x, y = xa[keep], (ya[keep] == digits[1]).astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.max() > 1.0:
        x = x / 255.0
    ds = Dataset(x, y)
    if normalize:
        ds = normalize_rows(ds)
    train, test = train_test_split(ds, test_fraction, seed)
    # Re-index training rows so log indices are plain row numbers.
    return replace(train, sample_ids=None), test
