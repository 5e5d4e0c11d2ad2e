import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miniunlearn.datasets import SyntheticSpec, generate_synthetic
from miniunlearn.errors import CapacityError, ContractError, ConvexityError, DegenerateBatchError
from miniunlearn.hvp_lbfgs import (
    CurvaturePairs,
    apply_h_lbfgs,
    build_pairs,
    compact_factors,
    compact_matrix,
    hvp_compact,
    pairs_from_snapshots,
    snapshot_window,
)
from miniunlearn.objective import LossConfig, exact_hessian, exact_hvp, smoothness_bounds
from miniunlearn.trainer import TrainConfig, init_training


def bfgs_oracle(s, y):
    """Explicit BFGS updates from sigma*I, one pair at a time."""
    sigma = (y[:, -1] @ s[:, -1]) / (s[:, -1] @ s[:, -1])
    b = sigma * np.eye(s.shape[0])
    for i in range(s.shape[1]):
        bs = b @ s[:, i]
        b = b - np.outer(bs, bs) / (s[:, i] @ bs) + np.outer(y[:, i], y[:, i]) / (y[:, i] @ s[:, i])
    return b


def random_spd_pairs(rng, p, m):
    a = rng.standard_normal((p, p))
    a = a @ a.T + p * np.eye(p)
    s = rng.standard_normal((p, m))
    return a, CurvaturePairs(s, a @ s)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), p=st.integers(2, 8), m=st.integers(1, 4))
def test_compact_form_matches_explicit_bfgs(seed, p, m):
    rng = np.random.default_rng(seed)
    _, pairs = random_spd_pairs(rng, p, min(m, p))
    dense = compact_matrix(compact_factors(pairs), pairs)
    oracle = bfgs_oracle(pairs.delta_w, pairs.delta_g)
    assert np.max(np.abs(dense - oracle)) <= 1e-9 * np.max(np.abs(oracle))


def test_scalar_case_closed_form():
    rng = np.random.default_rng(0)
    s = rng.standard_normal(4)
    y = s + 0.3 * rng.standard_normal(4)
    pairs = CurvaturePairs(s[:, None], y[:, None])
    f = compact_factors(pairs)
    sigma = (y @ s) / (s @ s)
    closed = sigma * (np.eye(4) - np.outer(s, s) / (s @ s)) + np.outer(y, y) / (y @ s)
    assert f.sigma == pytest.approx(sigma, rel=1e-15)
    np.testing.assert_allclose(f.d_diag, [y @ s])
    np.testing.assert_array_equal(f.l_tri, [[0.0]])
    np.testing.assert_allclose(compact_matrix(f, pairs), closed, rtol=1e-12, atol=1e-14)


def test_sigma_is_rayleigh_quotient():
    a = np.diag([2.0, 1.0])
    pairs = CurvaturePairs(np.array([[1.0], [0.0]]), a @ np.array([[1.0], [0.0]]))
    assert compact_factors(pairs).sigma == 2.0


def test_factor_reconstruction():
    rng = np.random.default_rng(1)
    _, pairs = random_spd_pairs(rng, 6, 2)
    f = compact_factors(pairs)
    inner = f.sigma * f.gram_ww + (f.l_tri / f.d_diag) @ f.l_tri.T
    np.testing.assert_allclose(f.chol_j @ f.chol_j.T, inner, rtol=1e-10)
    d = np.diag(f.d_diag)
    middle = np.block([[-d, f.l_tri.T], [f.l_tri, f.sigma * f.gram_ww]])
    np.testing.assert_allclose(f.lower_block @ f.upper_block, middle, rtol=1e-10, atol=1e-12)


def test_secant_equation_holds_for_last_pair():
    rng = np.random.default_rng(2)
    _, pairs = random_spd_pairs(rng, 7, 3)
    f = compact_factors(pairs)
    np.testing.assert_allclose(hvp_compact(f, pairs, pairs.delta_w[:, -1]), pairs.delta_g[:, -1], rtol=1e-10)


def test_linearity_and_symmetry():
    rng = np.random.default_rng(3)
    _, pairs = random_spd_pairs(rng, 9, 2)
    f = compact_factors(pairs)
    u, v = rng.standard_normal((2, 9))
    lhs = hvp_compact(f, pairs, 2.5 * u - 0.7 * v)
    rhs = 2.5 * hvp_compact(f, pairs, u) - 0.7 * hvp_compact(f, pairs, v)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10)
    a, b = u @ hvp_compact(f, pairs, v), v @ hvp_compact(f, pairs, u)
    assert a == pytest.approx(b, rel=1e-10)
    np.testing.assert_array_equal(hvp_compact(f, pairs, np.zeros(9)), np.zeros(9))


def test_conjugated_pairs_recover_quadratic_hessian():
    rng = np.random.default_rng(4)
    a, pairs = random_spd_pairs(rng, 6, 6)
    conj = pairs.conjugated()
    dense = compact_matrix(compact_factors(conj), conj)
    assert np.max(np.abs(dense - a)) <= 1e-8 * np.max(np.abs(a))


def test_generic_pairs_satisfy_only_the_last_secant():
    # Plain BFGS over non-conjugate pairs does not reproduce A; the
    # conjugated variant above does. Kept as a record of that gap.
    rng = np.random.default_rng(4)
    a, pairs = random_spd_pairs(rng, 6, 6)
    dense = compact_matrix(compact_factors(pairs), pairs)
    assert np.max(np.abs(dense - a)) > 1e-3 * np.max(np.abs(a))


def test_literal_ldl_reading_breaks_secant_equation():
    # With L D L^T in place of L D^-1 L^T the product no longer maps the
    # last step onto the last gradient difference.
    from scipy.linalg import cholesky, solve

    rng = np.random.default_rng(5)
    _, pairs = random_spd_pairs(rng, 5, 3)
    s, y = pairs.delta_w, pairs.delta_g
    sy = s.T @ y
    d, low = np.diag(np.diag(sy)), np.tril(sy, -1)
    sigma = (y[:, -1] @ s[:, -1]) / (s[:, -1] @ s[:, -1])
    j = cholesky(sigma * s.T @ s + low @ d @ low.T, lower=True)
    dh = np.sqrt(d)
    lower = np.block([[dh, np.zeros((3, 3))], [-low @ np.linalg.inv(dh), j]])
    upper = np.block([[-dh, np.linalg.inv(dh) @ low.T], [np.zeros((3, 3)), j.T]])
    coef = solve(lower @ upper, np.concatenate([y.T @ s[:, -1], sigma * s.T @ s[:, -1]]))
    hs = sigma * s[:, -1] - (y @ coef[:3] + sigma * s @ coef[3:])
    assert np.linalg.norm(hs - y[:, -1]) > 1e-3 * np.linalg.norm(y[:, -1])


def test_curvature_rejections():
    w = [np.ones(3), np.ones(3)]
    with pytest.raises(ConvexityError):
        pairs_from_snapshots(w, [np.zeros(3), np.ones(3)])
    with pytest.raises(ConvexityError):
        CurvaturePairs(np.array([[1.0], [0.0]]), np.array([[-1.0], [0.0]]))
    with pytest.raises(ContractError):
        CurvaturePairs(np.ones((3, 2)), np.ones((3, 1)))


def test_snapshot_window():
    assert list(snapshot_window(11, 10, 2)) == [8, 9, 10]
    assert list(snapshot_window(11, 0, 2)) == [0, 1, 2]
    assert list(snapshot_window(3, 1, 2)) == [0, 1, 2]
    with pytest.raises(CapacityError):
        snapshot_window(3, 0, 3)


@pytest.fixture(scope="module")
def quad_run():
    ds = generate_synthetic(SyntheticSpec(n=60, p=5, seed=2, kind="quadratic", label_noise=0.2))
    cfg = TrainConfig(epochs=20, batch_size=10, learning_rate=0.05, history_k=8, seed=1,
                      loss=LossConfig("quadratic", 0.01))
    _, log = init_training(ds, cfg)
    return ds, cfg, log


def test_quadratic_pairs_are_linear_in_hessian(quad_run):
    ds, cfg, log = quad_run
    batch = log.history[-1].batch_indices
    pairs = build_pairs(log, ds, 7, batch, m=3)
    a = exact_hessian(np.zeros(ds.p), ds, batch, cfg.loss)
    np.testing.assert_allclose(pairs.delta_g, a @ pairs.delta_w, rtol=1e-10, atol=1e-13)


def test_quadratic_p_pairs_exact_hvp(quad_run):
    ds, cfg, log = quad_run
    batch = log.history[-1].batch_indices
    pairs = build_pairs(log, ds, 7, batch, m=ds.p, conjugate=True)
    f = compact_factors(pairs)
    for u in np.random.default_rng(6).standard_normal((10, ds.p)):
        ref = exact_hvp(log.final_w, ds, batch, cfg.loss, u)
        assert np.linalg.norm(hvp_compact(f, pairs, u) - ref) <= 1e-8 * np.linalg.norm(ref)
        h_ref = u - cfg.learning_rate / cfg.batch_size * ref
        h = apply_h_lbfgs(f, pairs, cfg.learning_rate, cfg.batch_size, 0, u)
        assert np.linalg.norm(h - h_ref) <= 1e-8 * np.linalg.norm(h_ref)


def test_build_pairs_capacity(quad_run):
    ds, _, log = quad_run
    with pytest.raises(CapacityError):
        build_pairs(log, ds, 0, log.history[0].batch_indices, m=log.k + 1)


def test_apply_identity_and_degenerate():
    rng = np.random.default_rng(7)
    _, pairs = random_spd_pairs(rng, 4, 2)
    f = compact_factors(pairs)
    u = rng.standard_normal(4)
    np.testing.assert_array_equal(apply_h_lbfgs(f, pairs, 0.0, 8, 2, u), u)
    with pytest.raises(DegenerateBatchError):
        apply_h_lbfgs(f, pairs, 0.1, 8, 8, u)


@pytest.fixture(scope="module")
def logistic_run():
    ds = generate_synthetic(SyntheticSpec(n=500, p=10, seed=0))
    cfg = TrainConfig(epochs=200, batch_size=32, learning_rate=0.01, history_k=10, seed=7,
                      loss=LossConfig("logistic", 0.005))
    _, log = init_training(ds, cfg)
    return ds, cfg, log


def test_logistic_curvature_positive(logistic_run):
    ds, _, log = logistic_run
    for pos in range(log.k):
        pairs = build_pairs(log, ds, pos, log.history[pos].batch_indices)
        assert np.all(np.einsum("ij,ij->j", pairs.delta_w, pairs.delta_g) > 0)


def test_contraction_norm_bound(logistic_run):
    ds, cfg, log = logistic_run
    b = smoothness_bounds(ds, cfg.loss)
    bound = 1 - cfg.learning_rate * b.mu
    rng = np.random.default_rng(8)
    rec = log.history[-1]
    pairs = build_pairs(log, ds, log.k - 1, rec.batch_indices)
    f = compact_factors(pairs)
    scale = cfg.learning_rate / cfg.batch_size
    for _ in range(100):
        u = rng.standard_normal(ds.p)
        u /= np.linalg.norm(u)
        exact = u - scale * exact_hvp(rec.w_before, ds, rec.batch_indices, cfg.loss, u)
        assert np.linalg.norm(exact) <= bound + 1e-12
        approx = apply_h_lbfgs(f, pairs, cfg.learning_rate, cfg.batch_size, 0, u)
        assert np.linalg.norm(approx) <= 1.1 * bound


def _raw_hvp_errors(ds, cfg, log, m=2):
    rng = np.random.default_rng(9)
    rec = log.history[-1]
    pairs = build_pairs(log, ds, log.k - 1, rec.batch_indices, m=m)
    f = compact_factors(pairs)
    errs = []
    for _ in range(100):
        u = rng.standard_normal(ds.p)
        ref = exact_hvp(rec.w_before, ds, rec.batch_indices, cfg.loss, u)
        errs.append(np.linalg.norm(hvp_compact(f, pairs, u) - ref) / np.linalg.norm(ref))
    return np.array(errs)


@pytest.mark.xfail(strict=True, reason="two secant pairs span a 2-D subspace of a 10-D Hessian; off that "
                                       "subspace the product is sigma*u, so raw HVP error is tens of percent")
def test_raw_hvp_within_five_percent_m2(logistic_run):
    assert _raw_hvp_errors(*logistic_run).max() <= 0.05
