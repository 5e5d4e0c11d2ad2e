"""Simplified membership-inference attack on logistic models.

Attack features per sample are the target model's loss, its probability for
the true class and the absolute decision margin. A logistic classifier over
those features predicts membership.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import wilcoxon
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .errors import ConfigError
from .objective import Dataset
from .trainer import make_rng

FEATURE_NAMES = ("loss", "true_class_prob", "abs_margin")


@dataclass(frozen=True, eq=False)
class AttackSet:
    features: np.ndarray  # n x 3
    member: np.ndarray  # bool

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("attack features must be finite")

    def __len__(self):
        return self.member.shape[0]


def attack_features(w, data: Dataset) -> np.ndarray:
    z = data.features @ np.asarray(w, dtype=np.float64)
    y = data.labels
    loss = np.logaddexp(0.0, z) - y * z
    p_true = np.where(y == 1.0, expit(z), expit(-z))
    return np.column_stack([loss, p_true, np.abs(z)])


def build_attack_set(model_w, members: Dataset, nonmembers: Dataset) -> AttackSet:
    feats = np.vstack([attack_features(model_w, members), attack_features(model_w, nonmembers)])
    flags = np.concatenate([np.ones(members.n, bool), np.zeros(nonmembers.n, bool)])
    return AttackSet(feats, flags)


class AttackModel:
    def __init__(self, pipeline, seed: int):
        self.pipeline = pipeline
        self.seed = seed

    def score(self, features: np.ndarray) -> np.ndarray:
        """Membership probability."""
        return self.pipeline.predict_proba(features)[:, 1]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.score(features) >= 0.5

    @property
    def coef(self) -> np.ndarray:
        return self.pipeline[-1].coef_.ravel()


def train_attack(attack_set: AttackSet, seed: int = 0, c: float = 100.0) -> AttackModel:
    if np.unique(attack_set.member).size < 2:
        raise ConfigError("attack training needs both members and non-members")
    pipe = make_pipeline(StandardScaler(), LogisticRegression(C=c, random_state=seed, max_iter=1000))
    pipe.fit(attack_set.features, attack_set.member)
    return AttackModel(pipe, seed)


def precision_recall(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, dict]:
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, {"tp": tp, "fp": fp, "fn": fn, "tn": int(np.sum(~pred & ~truth))}


@dataclass(frozen=True)
class MiaReport:
    precision_unlearned: float
    recall_unlearned: float
    precision_retained: float
    recall_retained: float
    attack_auc: float
    counts: dict = field(default_factory=dict)


def _balanced(members: Dataset, nonmembers: Dataset, rng) -> tuple[Dataset, Dataset]:
    size = min(members.n, nonmembers.n)
    pick = lambda d: d.subset(np.sort(rng.choice(d.n, size=size, replace=False)))  # noqa: E731
    return pick(members), pick(nonmembers)


def mia_report(attack: AttackModel, target_w, unlearned: Dataset, retained: Dataset, holdout: Dataset,
               balance: bool = True, seed: int = 0) -> MiaReport:
    """Precision/recall of "member" predictions per population.

    The unlearned population is ``unlearned`` (truth: member) against
    ``holdout`` (truth: non-member); likewise for ``retained``. With
    ``balance`` both sides of each population are subsampled to equal size.
    ``attack_auc`` scores retained against holdout.
    """
    rng = make_rng(seed)
    out, counts = {}, {}
    for name, members in (("unlearned", unlearned), ("retained", retained)):
        mem, non = _balanced(members, holdout, rng) if balance else (members, holdout)
        aset = build_attack_set(target_w, mem, non)
        prec, rec, c = precision_recall(attack.predict(aset.features), aset.member)
        out[name] = (prec, rec)
        counts[name] = {"positives": mem.n, "negatives": non.n, **c}
    aset = build_attack_set(target_w, retained, holdout)
    auc = float(roc_auc_score(aset.member, attack.score(aset.features)))
    return MiaReport(out["unlearned"][0], out["unlearned"][1], out["retained"][0], out["retained"][1],
                     auc, counts)


def score_shift_pvalue(attack: AttackModel, w_before, w_after, population: Dataset) -> float:
    """One-sided Wilcoxon signed-rank p-value for ``score_before > score_after``.

    Scores are paired per sample, so a small value means the second model
    looks less member-like on ``population`` than the first.
    """
    before = attack.score(attack_features(w_before, population))
    after = attack.score(attack_features(w_after, population))
    if np.array_equal(before, after):
        return 1.0
    return float(wilcoxon(before, after, alternative="greater").pvalue)
