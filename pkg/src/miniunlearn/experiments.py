"""Experiment pipelines shared by the CLI and the acceptance checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mia import AttackModel, MiaReport, build_attack_set, mia_report, train_attack
from .objective import Dataset, test_accuracy
from .trainer import TrainingLog, make_rng
from .unlearner import UnlearnSet, unlearn


def truncation_errors(log: TrainingLog, dataset: Dataset, unlearn_set: UnlearnSet, ks, **kwargs):
    """``e(k) = ||dw(k) - dw(full)||`` with the full logged history as reference."""
    full = unlearn(log, dataset, unlearn_set, log.k, **kwargs).delta_w
    errs = np.array([np.linalg.norm(unlearn(log, dataset, unlearn_set, k, **kwargs).delta_w - full)
                     for k in ks])
    return errs, full


def log_slope(ks, errors) -> float:
    """Least-squares slope of ``log(e)`` against ``k``."""
    errors = np.asarray(errors, dtype=np.float64)
    if np.any(errors <= 0):
        return float("-inf")
    return float(np.polyfit(np.asarray(ks, dtype=np.float64), np.log(errors), 1)[0])


def ablate_k(log: TrainingLog, train: Dataset, unlearn_set: UnlearnSet, ks, test: Dataset | None = None,
             reference_w=None, **kwargs) -> list[dict]:
    """One row per k: accuracy on ``test`` (logistic only) and distances.

    ``err_vs_full`` compares against the correction from the whole log.
    """
    full = unlearn(log, train, unlearn_set, log.k, **kwargs).delta_w
    rows = []
    for k in ks:
        res = unlearn(log, train, unlearn_set, k, **kwargs)
        row = {"k": int(k), "delta_norm": float(np.linalg.norm(res.delta_w)),
               "err_vs_full": float(np.linalg.norm(res.delta_w - full))}
        if test is not None and log.config.loss.kind == "logistic":
            row["accuracy"] = test_accuracy(res.unlearned_w, test, log.config.loss)
        if reference_w is not None:
            row["dist_to_retrain"] = float(np.linalg.norm(res.unlearned_w - reference_w))
        rows.append(row)
    return rows


@dataclass(frozen=True, eq=False)
class MiaSplit:
    """Index sets for the attack protocol.

    Half of the holdout trains the attack as non-members, against an equal
    number of retained rows as members; the other halves are evaluated.
    """
    attack_members: np.ndarray
    attack_nonmembers: np.ndarray
    eval_retained: np.ndarray
    eval_holdout: np.ndarray
    seed: int

    def metadata(self) -> dict:
        return {"attack_split": "50/50 holdout, retained matched", "split_seed": self.seed,
                "attack_members": int(self.attack_members.size),
                "attack_nonmembers": int(self.attack_nonmembers.size),
                "eval_retained": int(self.eval_retained.size), "eval_holdout": int(self.eval_holdout.size)}


def mia_split(unlearn_set: UnlearnSet, n_holdout: int, seed: int) -> MiaSplit:
    rng = make_rng(seed)
    retained = np.setdiff1d(np.arange(unlearn_set.n), unlearn_set.indices)
    hperm = rng.permutation(n_holdout)
    half = n_holdout // 2
    rperm = rng.permutation(retained)
    return MiaSplit(np.sort(rperm[:half]), np.sort(hperm[:half]), np.sort(rperm[half:]),
                    np.sort(hperm[half:]), seed)


def mia_experiment(log: TrainingLog, train: Dataset, holdout: Dataset, unlearn_set: UnlearnSet,
                   models: dict, seed: int = 0) -> tuple[dict[str, MiaReport], AttackModel, MiaSplit]:
    """Train the attack on the original model and report on every model."""
    split = mia_split(unlearn_set, holdout.n, seed)
    attack = train_attack(build_attack_set(log.final_w, train.subset(split.attack_members),
                                           holdout.subset(split.attack_nonmembers)), seed)
    unlearned = train.subset(unlearn_set.indices)
    retained = train.subset(split.eval_retained)
    hold = holdout.subset(split.eval_holdout)
    reports = {name: mia_report(attack, w, unlearned, retained, hold, seed=seed) for name, w in models.items()}
    return reports, attack, split
