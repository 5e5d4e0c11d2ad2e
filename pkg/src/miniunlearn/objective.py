"""L2-regularized convex objectives: logistic regression and least squares.

The regularizer ``lam * ||w||^2 / 2`` is attached to every sample, so the mean
of per-sample gradients over a batch is the gradient of the regularized batch
objective. All batch sums run in ascending sample-index order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DataError,
    EmptyBatchError,
    NotFoundError,
    StrongConvexityUnavailable,
    UnsupportedMetric,
)

LossKind = Literal["logistic", "quadratic"]

#: Largest dimension for which dense p x p matrices are materialized.
MAX_DENSE_DIM = 512


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = "logistic"
    l2: float = 0.005

    def __post_init__(self):
        if self.kind not in ("logistic", "quadratic"):
            raise ContractError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.l2) or self.l2 < 0:
            raise ContractError(f"l2 coefficient must be >= 0, got {self.l2}")


@dataclass(frozen=True)
class SmoothnessBounds:
    mu: float
    big_l: float

    def rate(self, eta: float) -> float:
        """Contraction factor max(|1 - eta*mu|, |1 - eta*L|)."""
        return max(abs(1.0 - eta * self.mu), abs(1.0 - eta * self.big_l))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense design matrix with labels. Rows are samples.

    Arrays are copied to float64 and frozen on construction.
    """

    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, order="C")
        y = np.array(self.labels, dtype=np.float64).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x p matrix, got shape {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataError("features and labels must be finite")
        if self.sample_ids is None:
            ids = np.arange(x.shape[0], dtype=np.int64)
        else:
            ids = np.array(self.sample_ids, dtype=np.int64).reshape(-1)
            if ids.shape[0] != x.shape[0]:
                raise DataError("sample_ids length does not match number of rows")
            if np.unique(ids).shape[0] != ids.shape[0]:
                raise DataError("sample_ids must be unique")
        for a in (x, y, ids):
            a.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def is_binary(self) -> bool:
        return bool(np.all((self.labels == 0.0) | (self.labels == 1.0)))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise ConfigError("cannot take an empty slice of a dataset")
        return Dataset(self.features[idx], self.labels[idx], self.sample_ids[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.features.shape, dtype="<i8").tobytes())
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.labels.astype("<f8").tobytes())
        h.update(self.sample_ids.astype("<i8").tobytes())
        return h.hexdigest()


def check_labels(dataset: Dataset, cfg: LossConfig) -> None:
    if cfg.kind == "logistic" and not dataset.is_binary():
        raise DataError("logistic loss requires labels in {0, 1}")


def _check_w(w: np.ndarray, dataset: Dataset) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (dataset.p,):
        raise ContractError(f"parameter vector has shape {w.shape}, expected ({dataset.p},)")
    return w


def _check_indices(indices: Iterable[int], n: int) -> np.ndarray:
    if not isinstance(indices, np.ndarray):
        indices = list(indices)
    idx = np.sort(np.asarray(indices, dtype=np.int64).reshape(-1))
    if idx.size == 0:
        raise EmptyBatchError("batch has no indices")
    if idx[0] < 0 or idx[-1] >= n:
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise NotFoundError(f"sample index {bad} out of range for n={n}")
    return idx


def _margins(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Elementwise product + row sum: same reduction for one row or many,
    # so single-sample and batch paths agree bit for bit.
    return (x * w).sum(axis=-1)


def _residuals(x: np.ndarray, y: np.ndarray, w: np.ndarray, kind: str) -> np.ndarray:
    z = _margins(x, w)
    if kind == "logistic":
        return expit(z) - y
    return z - y


def _curvatures(x: np.ndarray, w: np.ndarray, kind: str) -> np.ndarray:
    if kind == "logistic":
        s = expit(_margins(x, w))
        return s * (1.0 - s)
    return np.ones(x.shape[0])


def per_sample_gradient(w, dataset: Dataset, index: int, cfg: LossConfig) -> np.ndarray:
    w = _check_w(w, dataset)
    if not 0 <= int(index) < dataset.n:
        raise NotFoundError(f"sample index {index} out of range for n={dataset.n}")
    x = dataset.features[int(index)]
    r = _residuals(x, dataset.labels[int(index)], w, cfg.kind)
    return r * x + cfg.l2 * w


def per_sample_gradients(w, dataset: Dataset, indices, cfg: LossConfig) -> np.ndarray:
    """Row j is the gradient of sample ``indices[j]`` (indices sorted ascending)."""
    w = _check_w(w, dataset)
    idx = _check_indices(indices, dataset.n)
    x = dataset.features[idx]
    r = _residuals(x, dataset.labels[idx], w, cfg.kind)
    return r[:, None] * x + cfg.l2 * w


def batch_gradient_sum(w, dataset: Dataset, indices, cfg: LossConfig) -> np.ndarray:
    # Axis-0 reduction of a C-ordered matrix accumulates row by row.
    return per_sample_gradients(w, dataset, indices, cfg).sum(axis=0)


def per_sample_loss(w, dataset: Dataset, indices, cfg: LossConfig) -> np.ndarray:
    w = _check_w(w, dataset)
    idx = _check_indices(indices, dataset.n)
    z = _margins(dataset.features[idx], w)
    y = dataset.labels[idx]
    if cfg.kind == "logistic":
        data = np.logaddexp(0.0, z) - y * z
    else:
        data = 0.5 * (z - y) ** 2
    return data + 0.5 * cfg.l2 * float(w @ w)


def mean_loss(w, dataset: Dataset, cfg: LossConfig, indices=None) -> float:
    if indices is None:
        indices = np.arange(dataset.n)
    return float(per_sample_loss(w, dataset, indices, cfg).mean())


def exact_hessian(w, dataset: Dataset, indices, cfg: LossConfig, max_dim: int = MAX_DENSE_DIM) -> np.ndarray:
    """Summed Hessian over ``indices``; exactly symmetric by construction."""
    if dataset.p > max_dim:
        raise CapacityError(f"p={dataset.p} exceeds dense Hessian guard {max_dim}")
    w = _check_w(w, dataset)
    idx = _check_indices(indices, dataset.n)
    x = dataset.features[idx]
    xs = x * np.sqrt(_curvatures(x, w, cfg.kind))[:, None]
    # A.T @ A dispatches to a symmetric rank-k update, which fills one
    # triangle and mirrors it, so the result is bit-symmetric.
    h = xs.T @ xs
    h[np.diag_indices_from(h)] += idx.size * cfg.l2
    return h


def exact_hvp(w, dataset: Dataset, indices, cfg: LossConfig, v) -> np.ndarray:
    """Summed-Hessian times ``v`` via the rank-one per-sample structure."""
    w = _check_w(w, dataset)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ContractError(f"vector has shape {v.shape}, expected {w.shape}")
    idx = _check_indices(indices, dataset.n)
    x = dataset.features[idx]
    c = _curvatures(x, w, cfg.kind)
    return x.T @ (c * (x @ v)) + idx.size * cfg.l2 * v


def smoothness_bounds(dataset: Dataset, cfg: LossConfig) -> SmoothnessBounds:
    if cfg.l2 <= 0:
        raise StrongConvexityUnavailable("strong convexity needs l2 > 0")
    sq_norms = np.einsum("ij,ij->i", dataset.features, dataset.features)
    if cfg.kind == "logistic":
        return SmoothnessBounds(mu=cfg.l2, big_l=cfg.l2 + 0.25 * float(sq_norms.max()))
    # x x^T is rank one, so its smallest eigenvalue is 0 unless p == 1.
    min_curv = float(sq_norms.min()) if dataset.p == 1 else 0.0
    return SmoothnessBounds(mu=cfg.l2 + min_curv, big_l=cfg.l2 + float(sq_norms.max()))


def predict_proba(w, features: np.ndarray) -> np.ndarray:
    return expit(np.asarray(features, dtype=np.float64) @ np.asarray(w, dtype=np.float64))


def test_accuracy(w, dataset: Dataset, cfg: LossConfig) -> float:
    if cfg.kind != "logistic":
        raise UnsupportedMetric("accuracy is defined for logistic models only")
    w = _check_w(w, dataset)
    pred = (predict_proba(w, dataset.features) >= 0.5).astype(np.float64)
    return float(np.mean(pred == dataset.labels))


test_accuracy.__test__ = False  # keep pytest from collecting the import
