import numpy as np
import pytest

from miniunlearn.datasets import SyntheticSpec, generate_synthetic
from miniunlearn.objective import LossConfig
from miniunlearn.trainer import TrainConfig, init_training


@pytest.fixture
def logistic_data():
    return generate_synthetic(SyntheticSpec(n=120, p=6, seed=11))


@pytest.fixture
def quadratic_data():
    return generate_synthetic(SyntheticSpec(n=80, p=5, seed=4, kind="quadratic", label_noise=0.1))


@pytest.fixture
def small_run(logistic_data):
    cfg = TrainConfig(epochs=40, batch_size=12, learning_rate=0.5, history_k=15, seed=3,
                      loss=LossConfig("logistic", 0.01))
    w, log = init_training(logistic_data, cfg)
    return logistic_data, cfg, w, log


def central_diff(f, x, h=1e-6):
    """Independent gradient oracle: central finite differences."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


# Deliberately overfit logistic model: p close to n/5 with 30% label noise,
# a large step and weak regularization (eta*L = 0.91).
OVERFIT = dict(n_total=800, p=80, noise=0.3, epochs=3000, batch=40, lr=3.5, l2=0.01, k=10, ratio=0.15, seed=0)


@pytest.fixture(scope="session")
def overfit_run():
    from dataclasses import replace

    from miniunlearn.datasets import train_test_split
    from miniunlearn.trainer import retrain_oracle
    from miniunlearn.unlearner import UnlearnSet, unlearn

    c = OVERFIT
    full = generate_synthetic(SyntheticSpec(n=c["n_total"], p=c["p"], seed=c["seed"], label_noise=c["noise"]))
    train, holdout = train_test_split(full, 0.5, c["seed"])
    train = replace(train, sample_ids=None)
    cfg = TrainConfig(c["epochs"], c["batch"], c["lr"], c["k"], seed=c["seed"],
                      loss=LossConfig("logistic", c["l2"]), strict=True)
    w, log = init_training(train, cfg)
    uset = UnlearnSet.from_ratio(c["ratio"], train.n, seed=c["seed"] + 1)
    models = {"original": w, "mini": unlearn(log, train, uset).unlearned_w,
              "retrain": retrain_oracle(train, uset, cfg)}
    return {"train": train, "holdout": holdout, "log": log, "uset": uset, "models": models, "seed": c["seed"]}


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
