import numpy as np
import pytest

from miniunlearn.datasets import SyntheticSpec, generate_synthetic
from miniunlearn.errors import ConfigError, DataError, DegenerateBatchError, FingerprintMismatch, NumericFailure
from miniunlearn.objective import Dataset, LossConfig, per_sample_gradient
from miniunlearn.trainer import (
    TrainConfig,
    batch_schedule,
    init_training,
    make_rng,
    retrain_oracle,
    sample_batch,
)

# Frozen once from PCG64(42) with Generator.choice(10, 3, replace=False), sorted.
GOLDEN_SEED42_N10_B3 = [[0, 6, 9], [0, 6, 9], [4, 7, 8], [1, 4, 6], [1, 3, 4], [3, 5, 8]]


def test_batch_sequence_is_frozen():
    rng = make_rng(42)
    assert [sample_batch(rng, 10, 3).tolist() for _ in range(6)] == GOLDEN_SEED42_N10_B3


def test_batches_distinct_and_sorted():
    cfg = TrainConfig(epochs=50, batch_size=7, learning_rate=0.1, history_k=1, seed=1)
    for _, b in batch_schedule(20, cfg):
        assert np.all(np.diff(b) > 0)
        assert b.min() >= 0 and b.max() < 20


def test_history_holds_last_k_steps(small_run):
    ds, cfg, w, log = small_run
    assert log.k == 15
    assert [r.step for r in log.history] == list(range(26, 41))
    assert np.array_equal(log.final_w, w)
    assert len(log.snapshots()) == 16


def test_replay_reproduces_final_parameters(small_run):
    ds, _, w, log = small_run
    assert np.array_equal(log.replay(ds), w)


def test_logged_gradient_sums_match_naive_oracle(small_run):
    ds, cfg, _, log = small_run
    rec = log.history[4]
    naive = sum(per_sample_gradient(rec.w_before, ds, int(i), cfg.loss) for i in rec.batch_indices)
    np.testing.assert_allclose(rec.grad_sum_full, naive, rtol=1e-14, atol=1e-15)


def test_log_is_frozen(small_run):
    *_, log = small_run
    with pytest.raises(ValueError):
        log.history[0].w_before[0] = 1.0


def _naive_retrain(ds, removed, cfg):
    # Plain-loop oracle written without the package's batch helpers.
    removed = set(int(i) for i in removed)
    w = np.zeros(ds.p)
    rng = make_rng(cfg.seed)
    for _ in range(cfg.epochs):
        batch = sorted(rng.choice(ds.n, size=cfg.batch_size, replace=False).tolist())
        keep = [i for i in batch if i not in removed]
        g = np.zeros(ds.p)
        for i in keep:
            x, y = ds.features[i], ds.labels[i]
            g += (1 / (1 + np.exp(-x @ w)) - y) * x + cfg.loss.l2 * w
        w = w - cfg.learning_rate / len(keep) * g
    return w


def test_retrain_oracle_matches_naive_loop(small_run):
    ds, cfg, _, _ = small_run
    removed = [0, 5, 17, 40, 77]
    np.testing.assert_allclose(retrain_oracle(ds, removed, cfg), _naive_retrain(ds, removed, cfg),
                               rtol=1e-12, atol=1e-14)


def test_retrain_without_removal_is_bitwise_original(small_run):
    ds, cfg, w, _ = small_run
    assert np.array_equal(retrain_oracle(ds, [], cfg), w)


def test_retrain_path(small_run):
    ds, cfg, w, _ = small_run
    path = retrain_oracle(ds, [], cfg, return_path=True)
    assert len(path) == cfg.epochs + 1
    assert not np.any(path[0]) and np.array_equal(path[-1], w)


def test_retrain_degenerate_batch():
    ds = Dataset(np.eye(3), [0.0, 1.0, 0.0])
    cfg = TrainConfig(epochs=5, batch_size=3, learning_rate=0.1, history_k=1)
    with pytest.raises(DegenerateBatchError):
        retrain_oracle(ds, [0, 1, 2], cfg)


def test_config_validation(logistic_data):
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, batch_size=2, learning_rate=0.1, history_k=6)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, batch_size=2, learning_rate=-1.0, history_k=1)
    with pytest.raises(ConfigError):
        init_training(logistic_data, TrainConfig(epochs=5, batch_size=1000, learning_rate=0.1, history_k=1))


def test_large_step_warns_or_fails(logistic_data):
    cfg = TrainConfig(epochs=3, batch_size=4, learning_rate=5.0, history_k=1)
    with pytest.warns(RuntimeWarning, match="eta\\*L"):
        init_training(logistic_data, cfg)
    with pytest.raises(ConfigError):
        init_training(logistic_data, TrainConfig(3, 4, 5.0, 1, strict=True))


def test_logistic_rejects_real_labels(quadratic_data):
    with pytest.raises(DataError):
        init_training(quadratic_data, TrainConfig(3, 4, 0.1, 1))


def test_divergence_names_the_step():
    ds = generate_synthetic(SyntheticSpec(n=20, p=3, seed=0, kind="quadratic", feature_scale=10.0))
    cfg = TrainConfig(epochs=2000, batch_size=5, learning_rate=1.0, history_k=1,
                      loss=LossConfig("quadratic", 0.0))
    with pytest.raises(NumericFailure, match="step"):
        init_training(ds, cfg)


def test_fingerprint_check(small_run, quadratic_data):
    ds, _, _, log = small_run
    log.check_dataset(ds)
    with pytest.raises(FingerprintMismatch):
        log.check_dataset(quadratic_data)


def test_full_batch_draw_is_every_index():
    assert sample_batch(make_rng(0), 6, 6).tolist() == list(range(6))


def test_one_full_batch_quadratic_step_closed_form(quadratic_data):
    ds = quadratic_data
    eta = 0.1
    cfg = TrainConfig(epochs=1, batch_size=ds.n, learning_rate=eta, history_k=1,
                      loss=LossConfig("quadratic", 0.0))
    w, _ = init_training(ds, cfg)
    np.testing.assert_allclose(w, eta / ds.n * (ds.labels @ ds.features), rtol=1e-13)


def test_same_seed_same_schedule():
    cfg = TrainConfig(epochs=20, batch_size=4, learning_rate=0.1, history_k=1, seed=9)
    a = [b.tolist() for _, b in batch_schedule(30, cfg)]
    assert a == [b.tolist() for _, b in batch_schedule(30, cfg)]
