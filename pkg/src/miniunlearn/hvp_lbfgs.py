"""Compact-representation quasi-Newton Hessian-vector products.

Given secant pairs ``S = [dw_0 .. dw_{m-1}]`` and ``Y = [dg_0 .. dg_{m-1}]``
the direct BFGS matrix started from ``sigma * I`` is

    B = sigma*I - [Y  sigma*S] M^{-1} [Y^T; sigma*S^T],
    M = [[-D, L^T], [L, sigma*S^T S]],

with ``D = diag(S^T Y)`` and ``L`` the strictly lower part of ``S^T Y``.
``M`` is factored as a lower times an upper block-triangular matrix through
the Cholesky factor ``J J^T = sigma*S^T S + L D^{-1} L^T``, so a product
``B u`` costs two small triangular solves and O(m p) work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .errors import CapacityError, ContractError, ConvexityError, DegenerateBatchError, FactorizationError
from .objective import Dataset, LossConfig, batch_gradient_sum

DEFAULT_M = 2


@dataclass(frozen=True, eq=False)
class CurvaturePairs:
    delta_w: np.ndarray  # p x m, columns are parameter differences
    delta_g: np.ndarray  # p x m, columns are gradient differences

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.delta_w, dtype=np.float64))
        y = np.atleast_2d(np.asarray(self.delta_g, dtype=np.float64))
        if s.shape != y.shape or s.shape[1] < 1:
            raise ContractError(f"pair matrices must both be p x m, got {s.shape} and {y.shape}")
        curv = np.einsum("ij,ij->j", s, y)
        bad = np.flatnonzero(~(curv > 0))
        if bad.size:
            raise ConvexityError(f"secant pair {bad[0]} has curvature dg.dw = {curv[bad[0]]:.3g} <= 0")
        object.__setattr__(self, "delta_w", s)
        object.__setattr__(self, "delta_g", y)

    @property
    def m(self) -> int:
        return self.delta_w.shape[1]

    @property
    def p(self) -> int:
        return self.delta_w.shape[0]

    def conjugated(self) -> "CurvaturePairs":
        """Recombine the pairs so that ``S^T Y`` becomes the identity.

        ``S' = S R^{-1}``, ``Y' = Y R^{-1}`` with ``R^T R = sym(S^T Y)``. The
        span is unchanged. For a quadratic the new directions are conjugate,
        and BFGS then satisfies every secant equation, not only the last one.
        """
        sy = self.delta_w.T @ self.delta_g
        try:
            r = cholesky(0.5 * (sy + sy.T), lower=False)
        except LinAlgError as exc:
            raise FactorizationError("S^T Y is not positive definite; cannot conjugate pairs") from exc
        s = solve_triangular(r, self.delta_w.T, trans="T", lower=False).T
        y = solve_triangular(r, self.delta_g.T, trans="T", lower=False).T
        return CurvaturePairs(s, y)


@dataclass(frozen=True, eq=False)
class CompactFactors:
    sigma: float
    gram_ww: np.ndarray
    gram_wg: np.ndarray
    d_diag: np.ndarray  # diagonal entries of S^T Y
    l_tri: np.ndarray  # strictly lower part of S^T Y
    chol_j: np.ndarray
    lower_block: np.ndarray  # [[D^1/2, 0], [-L D^-1/2, J]]
    upper_block: np.ndarray  # [[-D^1/2, D^-1/2 L^T], [0, J^T]]


def pairs_from_snapshots(params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> CurvaturePairs:
    """Consecutive differences of ``m + 1`` parameter and gradient snapshots."""
    w = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if w.shape != g.shape or w.ndim != 2 or w.shape[0] < 2:
        raise ContractError("need m + 1 >= 2 matching parameter and gradient snapshots")
    return CurvaturePairs(np.diff(w, axis=0).T, np.diff(g, axis=0).T)


def snapshot_window(n_snapshots: int, base: int, m: int) -> range:
    """Positions of the m + 1 snapshots used for the operator at ``base``.

    The window ends at ``base`` when enough earlier snapshots exist and
    otherwise extends forward.
    """
    if m < 1:
        raise ContractError("history size m must be >= 1")
    if m + 1 > n_snapshots:
        raise CapacityError(f"m={m} needs {m + 1} parameter snapshots, log has {n_snapshots}")
    start = min(max(base - m, 0), n_snapshots - m - 1)
    return range(start, start + m + 1)


def build_pairs(log, dataset: Dataset, position: int, retained: np.ndarray, m: int = DEFAULT_M,
                conjugate: bool = False) -> CurvaturePairs:
    """Secant pairs for the history step at ``position`` (0-based in ``log.history``).

    Gradients are retained-batch sums of that step, evaluated at nearby logged
    parameter snapshots, so every pair probes the same summed Hessian.
    """
    snaps = log.snapshots()
    idx = snapshot_window(len(snaps), position, m)
    params = [snaps[i] for i in idx]
    grads = [batch_gradient_sum(w, dataset, retained, log.config.loss) for w in params]
    pairs = pairs_from_snapshots(params, grads)
    return pairs.conjugated() if conjugate else pairs


def compact_factors(pairs: CurvaturePairs, jitter: float = 1e-10) -> CompactFactors:
    s, y = pairs.delta_w, pairs.delta_g
    m = pairs.m
    ss = s.T @ s
    sy = s.T @ y
    d = np.diag(sy).copy()
    low = np.tril(sy, -1)
    sigma = float(y[:, -1] @ s[:, -1]) / float(s[:, -1] @ s[:, -1])
    inner = sigma * ss + (low / d) @ low.T
    try:
        j = cholesky(inner, lower=True)
    except LinAlgError:
        bump = jitter * np.trace(inner) / m
        try:
            j = cholesky(inner + bump * np.eye(m), lower=True)
        except LinAlgError as exc:
            cond = np.linalg.cond(inner)
            raise FactorizationError(
                f"sigma*S^T S + L D^-1 L^T not positive definite (cond={cond:.3g})") from exc
    sqrt_d = np.sqrt(d)
    lower = np.zeros((2 * m, 2 * m))
    lower[:m, :m] = np.diag(sqrt_d)
    lower[m:, :m] = -low / sqrt_d
    lower[m:, m:] = j
    upper = np.zeros((2 * m, 2 * m))
    upper[:m, :m] = -np.diag(sqrt_d)
    upper[:m, m:] = low.T / sqrt_d[:, None]
    upper[m:, m:] = j.T
    return CompactFactors(sigma, ss, sy, d, low, j, lower, upper)


def hvp_compact(factors: CompactFactors, pairs: CurvaturePairs, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (pairs.p,):
        raise ContractError(f"vector has shape {u.shape}, expected ({pairs.p},)")
    sigma = factors.sigma
    s, y = pairs.delta_w, pairs.delta_g
    rhs = np.concatenate([y.T @ u, sigma * (s.T @ u)])
    try:
        z = solve_triangular(factors.lower_block, rhs, lower=True, check_finite=True)
        coef = solve_triangular(factors.upper_block, z, lower=False, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise FactorizationError(f"triangular solve failed: {exc}") from exc
    m = pairs.m
    return sigma * u - (y @ coef[:m] + sigma * (s @ coef[m:]))


def apply_h_lbfgs(factors: CompactFactors, pairs: CurvaturePairs, eta: float, batch_size: int,
                  delta_b: int, u) -> np.ndarray:
    """``u - eta/(B - dB) * Hbar u`` with ``Hbar`` the compact approximation."""
    if delta_b >= batch_size:
        raise DegenerateBatchError(f"dB={delta_b} >= B={batch_size}")
    u = np.asarray(u, dtype=np.float64)
    return u - (eta / (batch_size - delta_b)) * hvp_compact(factors, pairs, u)


def compact_matrix(factors: CompactFactors, pairs: CurvaturePairs) -> np.ndarray:
    """Dense ``Hbar`` column by column (diagnostics and tests only)."""
    eye = np.eye(pairs.p)
    return np.column_stack([hvp_compact(factors, pairs, e) for e in eye])
