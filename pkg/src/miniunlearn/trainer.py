"""Mini-batch SGD with last-k history capture, and the retraining oracle."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateBatchError, FingerprintMismatch, NumericFailure
from .objective import (
    Dataset,
    LossConfig,
    batch_gradient_sum,
    check_labels,
    smoothness_bounds,
)

log = logging.getLogger(__name__)

#: Recorded in manifests; batch draws are ``Generator.choice(replace=False)``.
PRNG_NAME = f"numpy-{np.__version__}/PCG64/choice-without-replacement"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int  # number of SGD steps T; one batch per step
    batch_size: int
    learning_rate: float
    history_k: int
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    strict: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be > 0")
        if not 1 <= self.history_k <= self.epochs:
            raise ConfigError(f"history_k must lie in [1, {self.epochs}], got {self.history_k}")

    def validate_for(self, dataset: Dataset) -> None:
        if self.batch_size > dataset.n:
            raise ConfigError(f"batch_size {self.batch_size} exceeds dataset size {dataset.n}")
        check_labels(dataset, self.loss)
        if self.loss.l2 > 0:
            big_l = smoothness_bounds(dataset, self.loss).big_l
            if self.learning_rate * big_l >= 1.0:
                msg = (f"eta*L = {self.learning_rate * big_l:.4g} >= 1; "
                       "H(l) is not guaranteed to have eigenvalues in (0, 1)")
                if self.strict:
                    raise ConfigError(msg)
                warnings.warn(msg, RuntimeWarning, stacklevel=3)


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    batch_indices: np.ndarray
    w_before: np.ndarray
    grad_sum_full: np.ndarray


@dataclass(frozen=True, eq=False)
class TrainingLog:
    config: TrainConfig
    final_w: np.ndarray
    history: tuple[StepRecord, ...]
    dataset_fingerprint: str

    def __post_init__(self):
        steps = [r.step for r in self.history]
        if steps != list(range(self.config.epochs - len(steps) + 1, self.config.epochs + 1)):
            raise ConfigError(f"history steps {steps[:3]}... are not contiguous ending at T")

    @property
    def k(self) -> int:
        return len(self.history)

    def check_dataset(self, dataset: Dataset) -> None:
        if dataset.fingerprint() != self.dataset_fingerprint:
            raise FingerprintMismatch("dataset does not match the one this log was trained on")

    def snapshots(self) -> list[np.ndarray]:
        """w_{T-k}, ..., w_T."""
        return [r.w_before for r in self.history] + [self.final_w]

    def replay(self, dataset: Dataset) -> np.ndarray:
        """Re-run the logged steps from the first snapshot."""
        cfg = self.config
        w = self.history[0].w_before.copy()
        for rec in self.history:
            g = batch_gradient_sum(w, dataset, rec.batch_indices, cfg.loss)
            w = w - (cfg.learning_rate / cfg.batch_size) * g
        return w


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Draw ``batch_size`` distinct indices from ``range(n)``, sorted ascending."""
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return np.sort(rng.choice(n, size=batch_size, replace=False)).astype(np.int64)


def batch_schedule(n: int, cfg: TrainConfig):
    """Yield ``(step, batch)`` for steps 1..T from the seeded generator."""
    rng = make_rng(cfg.seed)
    for step in range(1, cfg.epochs + 1):
        yield step, sample_batch(rng, n, cfg.batch_size)


def init_training(dataset: Dataset, cfg: TrainConfig) -> tuple[np.ndarray, TrainingLog]:
    cfg.validate_for(dataset)
    eta, b = cfg.learning_rate, cfg.batch_size
    first_logged = cfg.epochs - cfg.history_k + 1
    w = np.zeros(dataset.p)
    history = []
    for step, batch in batch_schedule(dataset.n, cfg):
        # Overflow shows up as non-finite w below, reported with its step.
        with np.errstate(over="ignore", invalid="ignore"):
            g = batch_gradient_sum(w, dataset, batch, cfg.loss)
        if step >= first_logged:
            batch.flags.writeable = False
            history.append(StepRecord(step, batch, _frozen(w), _frozen(g)))
        with np.errstate(over="ignore", invalid="ignore"):
            w = w - (eta / b) * g
        if not np.all(np.isfinite(w)):
            raise NumericFailure(f"parameters became non-finite at step {step}")
    w = _frozen(w)
    return w, TrainingLog(cfg, w, tuple(history), dataset.fingerprint())


def retrain_oracle(dataset: Dataset, unlearn, cfg: TrainConfig, return_path: bool = False):
    """Retrain on the retained data with the original batch draws.

    Step l uses ``B_l`` minus the unlearned members, scaled by ``1/(B - dB_l)``.
    ``unlearn`` is an UnlearnSet or any iterable of row indices. With
    ``return_path`` the iterates ``w*_0 .. w*_T`` are returned as a list.
    """
    cfg.validate_for(dataset)
    removed = np.asarray(getattr(unlearn, "indices", unlearn), dtype=np.int64)
    eta, b = cfg.learning_rate, cfg.batch_size
    w = np.zeros(dataset.p)
    path = [w] if return_path else None
    for step, batch in batch_schedule(dataset.n, cfg):
        retained = batch[~np.isin(batch, removed)] if removed.size else batch
        db = b - retained.size
        if retained.size == 0:
            raise DegenerateBatchError(f"step {step}: every sample in the batch is unlearned")
        with np.errstate(over="ignore", invalid="ignore"):
            g = batch_gradient_sum(w, dataset, retained, cfg.loss)
            w = w - (eta / (b - db)) * g
        if not np.all(np.isfinite(w)):
            raise NumericFailure(f"retraining diverged at step {step}")
        if return_path:
            path.append(w)
    return path if return_path else w


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a
