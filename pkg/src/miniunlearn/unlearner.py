"""Unlearning correction from the last-k training steps.

With ``G(l)`` the first-order gradient correction of step ``l`` and
``H(l) = I - eta/(B - dB_l) * sum_{retained} Hessian`` the step's contraction,
the deviation of the retrained trajectory obeys
``dw_l = H(l) dw_{l-1} + G(l)``. Truncating the recurrence ``k`` steps back
(``dw_{T-k} = 0``) gives the correction applied to ``w_T``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import CapacityError, ConfigError, ContractionViolated, DegenerateBatchError, NotFoundError
from .hvp_lbfgs import DEFAULT_M, CompactFactors, CurvaturePairs, apply_h_lbfgs, build_pairs, compact_factors
from .objective import (
    MAX_DENSE_DIM,
    Dataset,
    SmoothnessBounds,
    batch_gradient_sum,
    exact_hessian,
    exact_hvp,
    smoothness_bounds,
)
from .trainer import StepRecord, TrainingLog, make_rng

Backing = Literal["exact", "lbfgs", "auto"]


@dataclass(frozen=True, eq=False)
class UnlearnSet:
    indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64).reshape(-1))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.n):
            raise NotFoundError(f"unlearn index out of range for dataset of size {self.n}")
        idx.flags.writeable = False
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_ratio(cls, ratio: float, n: int, seed: int) -> "UnlearnSet":
        if not 0.0 <= ratio < 1.0:
            raise ConfigError(f"unlearn ratio must lie in [0, 1), got {ratio}")
        count = int(round(ratio * n))
        return cls(make_rng(seed).choice(n, size=count, replace=False), n)

    @property
    def ratio(self) -> float:
        return self.indices.size / self.n

    def __len__(self) -> int:
        return int(self.indices.size)

    def split(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(unlearned members, retained members) of a batch."""
        mask = np.isin(batch, self.indices)
        return batch[mask], batch[~mask]


@dataclass(frozen=True, eq=False)
class UnlearnResult:
    delta_w: np.ndarray
    unlearned_w: np.ndarray
    k_used: int
    mode: str
    backing: str
    r_estimate: float
    bound: float
    seconds: float = 0.0


def gamma(batch_size: int, delta_b: int) -> float:
    if not 0 <= delta_b < batch_size:
        raise DegenerateBatchError(f"need 0 <= dB < B, got dB={delta_b}, B={batch_size}")
    return -delta_b / batch_size


def gamma_ratio(batch_size: int, delta_b: int) -> float:
    """gamma / (1 + gamma) = -dB / (B - dB)."""
    gamma(batch_size, delta_b)
    return -delta_b / (batch_size - delta_b)


def compute_g(record: StepRecord, unlearn: UnlearnSet, dataset: Dataset, log: TrainingLog,
              form: Literal["batch", "retained"] = "batch") -> np.ndarray:
    """Gradient correction of one step.

    ``form="batch"`` combines the unlearned-sample sum with the cached full
    batch sum; ``form="retained"`` recomputes the retained-sample sum. The two
    are algebraically identical.
    """
    cfg = log.config
    eta, b = cfg.learning_rate, cfg.batch_size
    removed, retained = unlearn.split(record.batch_indices)
    db = removed.size
    if db == 0:
        return np.zeros(dataset.p)
    if db >= b:
        raise DegenerateBatchError(f"step {record.step}: every sample in the batch is unlearned")
    g_removed = batch_gradient_sum(record.w_before, dataset, removed, cfg.loss)
    if form == "batch":
        return (eta / b) * ((b / (b - db)) * g_removed - (db / (b - db)) * record.grad_sum_full)
    g_retained = batch_gradient_sum(record.w_before, dataset, retained, cfg.loss)
    return (eta / b) * (gamma_ratio(b, db) * g_retained + g_removed)


class HOperator:
    """``u -> H(l) u`` for one logged step, exact or L-BFGS backed."""

    def __init__(self, step: int, eta: float, batch_size: int, retained: np.ndarray, delta_b: int,
                 backing: str, *, dataset: Dataset | None = None, w_before=None, loss=None,
                 factors: CompactFactors | None = None, pairs: CurvaturePairs | None = None):
        if delta_b >= batch_size:
            raise DegenerateBatchError(f"step {step}: every sample in the batch is unlearned")
        self.step = step
        self.eta = eta
        self.batch_size = batch_size
        self.batch_retained = retained
        self.delta_b = delta_b
        self.backing = backing
        self._dataset, self._w, self._loss = dataset, w_before, loss
        self.factors, self.pairs = factors, pairs

    @property
    def scale(self) -> float:
        return self.eta / (self.batch_size - self.delta_b)

    def apply(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if self.backing == "exact":
            return u - self.scale * exact_hvp(self._w, self._dataset, self.batch_retained, self._loss, u)
        return apply_h_lbfgs(self.factors, self.pairs, self.eta, self.batch_size, self.delta_b, u)

    __call__ = apply

    def matrix(self, max_dim: int = MAX_DENSE_DIM) -> np.ndarray:
        """Dense H(l); exact backing materializes the Hessian directly."""
        p = self._dataset.p if self._dataset is not None else self.pairs.p
        if p > max_dim:
            raise CapacityError(f"p={p} exceeds dense guard {max_dim}")
        if self.backing == "exact":
            h = exact_hessian(self._w, self._dataset, self.batch_retained, self._loss, max_dim)
            return np.eye(p) - self.scale * h
        return np.column_stack([self.apply(e) for e in np.eye(p)])


def resolve_backing(backing: Backing, p: int, max_dim: int = MAX_DENSE_DIM) -> str:
    if backing == "auto":
        return "exact" if p <= max_dim else "lbfgs"
    if backing not in ("exact", "lbfgs"):
        raise ConfigError(f"unknown backing {backing!r}")
    if backing == "exact" and p > max_dim:
        raise CapacityError(f"exact backing needs p <= {max_dim}, got p={p}; use lbfgs backing")
    return backing


def h_operator(log: TrainingLog, position: int, unlearn: UnlearnSet, dataset: Dataset,
               backing: Backing = "auto", m: int = DEFAULT_M, conjugate: bool = False,
               max_dim: int = MAX_DENSE_DIM) -> HOperator:
    """Operator for ``log.history[position]``."""
    cfg = log.config
    record = log.history[position]
    removed, retained = unlearn.split(record.batch_indices)
    if retained.size == 0:
        raise DegenerateBatchError(f"step {record.step}: every sample in the batch is unlearned")
    kind = resolve_backing(backing, dataset.p, max_dim)
    common = (record.step, cfg.learning_rate, cfg.batch_size, retained, removed.size, kind)
    if kind == "exact":
        return HOperator(*common, dataset=dataset, w_before=record.w_before, loss=cfg.loss)
    if m > log.k:
        raise CapacityError(f"lbfgs backing with m={m} needs {m + 1} snapshots; log holds {log.k + 1}")
    pairs = build_pairs(log, dataset, position, retained, m, conjugate)
    return HOperator(*common, factors=compact_factors(pairs), pairs=pairs)


def _window(log: TrainingLog, k: int | None) -> range:
    k = log.k if k is None else int(k)
    if not 1 <= k <= log.k:
        raise CapacityError(f"k={k} exceeds logged history of {log.k} steps")
    return range(log.k - k, log.k)


def contraction_rate(dataset: Dataset, log: TrainingLog) -> tuple[SmoothnessBounds | None, float]:
    if log.config.loss.l2 <= 0:
        return None, float("nan")
    bounds = smoothness_bounds(dataset, log.config.loss)
    return bounds, bounds.rate(log.config.learning_rate)


def contraction_bound(bounds: SmoothnessBounds, eta: float, k: int, ref_norm: float) -> float:
    """``r**k * ref_norm`` with ``r = max(|1 - eta*mu|, |1 - eta*L|)``.

    A scale diagnostic: ``ref_norm`` stands in for the unknown norm of the
    deviation at the truncation point.
    """
    r = bounds.rate(eta)
    if r >= 1.0:
        raise ContractionViolated(f"contraction factor r={r:.6g} >= 1 (need eta*L < 2 and eta*mu > 0)")
    return r ** int(k) * float(ref_norm)


theorem1_bound = contraction_bound


def _result(log, dataset, delta_w, k, mode, backing, started) -> UnlearnResult:
    bounds, r = contraction_rate(dataset, log)
    bound = float("nan")
    if bounds is not None and r < 1.0:
        bound = contraction_bound(bounds, log.config.learning_rate, k, float(np.linalg.norm(delta_w)))
    delta_w.flags.writeable = False
    w_star = log.final_w + delta_w
    w_star.flags.writeable = False
    return UnlearnResult(delta_w, w_star, k, mode, backing, r, bound, time.perf_counter() - started)


def delta_w_horner(log: TrainingLog, dataset: Dataset, unlearn: UnlearnSet, k: int | None = None,
                   backing: Backing = "auto", m: int = DEFAULT_M, conjugate: bool = False,
                   max_dim: int = MAX_DENSE_DIM, trajectory: list | None = None) -> UnlearnResult:
    """Evaluate ``acc <- H(l) acc + G(l)`` over the last ``k`` logged steps.

    If ``trajectory`` is a list, the accumulator after each step is appended.
    """
    started = time.perf_counter()
    window = _window(log, k)
    kind = resolve_backing(backing, dataset.p, max_dim)
    acc = np.zeros(dataset.p)
    for pos in window:
        record = log.history[pos]
        g = compute_g(record, unlearn, dataset, log)
        # H(l) 0 = 0 exactly; skip building the operator while nothing has accumulated.
        if np.any(acc):
            acc = h_operator(log, pos, unlearn, dataset, kind, m, conjugate, max_dim).apply(acc)
        else:
            _check_batch(record, unlearn)
        acc = acc + g
        if trajectory is not None:
            trajectory.append(acc.copy())
    return _result(log, dataset, acc, len(window), "horner", kind, started)


def _check_batch(record: StepRecord, unlearn: UnlearnSet) -> None:
    _, retained = unlearn.split(record.batch_indices)
    if retained.size == 0:
        raise DegenerateBatchError(f"step {record.step}: every sample in the batch is unlearned")


@dataclass(frozen=True, eq=False)
class BasisSet:
    vectors: np.ndarray  # p x p, columns are the basis vectors

    def __post_init__(self):
        u = np.asarray(self.vectors, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ConfigError("basis must be a square p x p matrix of column vectors")
        gram = u.T @ u
        if np.max(np.abs(gram - np.eye(u.shape[0]))) > 1e-12:
            raise ConfigError("basis vectors are not orthonormal")
        object.__setattr__(self, "vectors", u)

    @classmethod
    def standard(cls, p: int) -> "BasisSet":
        return cls(np.eye(p))

    @classmethod
    def random(cls, p: int, seed: int) -> "BasisSet":
        q, r = np.linalg.qr(make_rng(seed).standard_normal((p, p)))
        return cls(q * np.sign(np.diag(r)))

    @property
    def p(self) -> int:
        return self.vectors.shape[0]


def reconstruct(columns: np.ndarray, basis: BasisSet) -> np.ndarray:
    """``sum_q (H u_q) u_q^T`` from the image columns ``H u_q``."""
    return columns @ basis.vectors.T


def pairwise_product(columns_l: np.ndarray, columns_s: np.ndarray) -> np.ndarray:
    """``H(l) H(s) = sum_q (H(l) u_q)(H(s) u_q)^T`` for symmetric ``H(s)``."""
    return columns_l @ columns_s.T


def delta_w_parallel(log: TrainingLog, dataset: Dataset, unlearn: UnlearnSet, k: int | None = None,
                     basis: BasisSet | None = None, backing: Backing = "auto", m: int = DEFAULT_M,
                     conjugate: bool = False, threads: int = 1,
                     max_dim: int = MAX_DENSE_DIM) -> UnlearnResult:
    """Materialize each H(l) from basis images computed as independent tasks,
    then sum the expanded series of operator products."""
    started = time.perf_counter()
    p = dataset.p
    if p > max_dim:
        raise CapacityError(f"parallel mode materializes p x p matrices; p={p} exceeds {max_dim}. "
                            "Use horner mode.")
    window = _window(log, k)
    kind = resolve_backing(backing, p, max_dim)
    basis = basis or BasisSet.standard(p)
    if basis.p != p:
        raise ConfigError(f"basis dimension {basis.p} does not match p={p}")
    ops = [h_operator(log, pos, unlearn, dataset, kind, m, conjugate, max_dim) for pos in window]
    gs = [compute_g(log.history[pos], unlearn, dataset, log) for pos in window]
    tasks = [(i, q) for i in range(len(ops)) for q in range(p)]

    def run(task):
        i, q = task
        return ops[i].apply(basis.vectors[:, q])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(run, tasks))
    else:
        images = [run(t) for t in tasks]
    columns = [np.column_stack(images[i * p:(i + 1) * p]) for i in range(len(ops))]
    mats = [reconstruct(c, basis) for c in columns]
    # dw = G(s) + sum_{j>=2} H(s) H(s-1) ... H(s-j+2) G(s-j+1), s the last step.
    last = len(mats) - 1
    delta = gs[last].copy()
    prod = np.eye(p)
    for j in range(1, len(mats)):
        prod = prod @ mats[last - j + 1]
        delta = delta + prod @ gs[last - j]
    return _result(log, dataset, delta, len(window), "parallel", kind, started)


def unlearn(log: TrainingLog, dataset: Dataset, unlearn_set: UnlearnSet, k: int | None = None,
            mode: Literal["horner", "parallel"] = "horner", **kwargs) -> UnlearnResult:
    log.check_dataset(dataset)
    if unlearn_set.n != dataset.n:
        raise ConfigError(f"unlearn set built for n={unlearn_set.n}, dataset has n={dataset.n}")
    if mode == "horner":
        kwargs.pop("basis", None)
        kwargs.pop("threads", None)
        return delta_w_horner(log, dataset, unlearn_set, k, **kwargs)
    if mode == "parallel":
        return delta_w_parallel(log, dataset, unlearn_set, k, **kwargs)
    raise ConfigError(f"unknown mode {mode!r}")

