"""Windowed least-squares ARX regression with a shared denominator.

Each (tie m, generator n) pair contributes a block

    P(j) = L[j] . a_reg + M[j] . b,
    L[j] = [P(j-1) ... P(j-k)],   M[j] = [u(j) ... u(j-k)],

with rows ordered newest first. The regression coefficients carry the
opposite sign of the transfer-function denominator 1 + a1 z^-1 + ...; the
public ``a`` is always ``-a_reg``.

Ridge convention: every solve adds ``0.5 * lam * ||x||^2`` with
``lam = ridge * trace(normal matrix) / dim`` (or ``ridge`` itself when the
trace is zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_RIDGE = 1e-8
DEFAULT_K = 8
DEFAULT_N = 250


class IdentificationError(ValueError):
    pass


class SingularSystemError(IdentificationError):
    pass


@dataclass(frozen=True)
class ArxStructure:
    k: int
    pairs: tuple[tuple[int, int], ...]
    Ts: float = 0.02

    def __post_init__(self):
        if self.k < 2:
            raise IdentificationError("order k must be >= 2 to admit a complex pair")
        if not self.pairs:
            raise IdentificationError("at least one (tie, gen) pair required")


@dataclass(frozen=True, eq=False)
class RegressionBlock:
    L: np.ndarray
    M: np.ndarray
    Bvec: np.ndarray
    pair: tuple[int, int] = (0, 0)

    @property
    def k(self) -> int:
        return self.L.shape[1]

    @property
    def N(self) -> int:
        return self.L.shape[0]

    @property
    def rank_deficient(self) -> bool:
        X = np.hstack([self.L, self.M])
        if not np.any(X):
            return True
        return np.linalg.matrix_rank(X) < X.shape[1]

    def residual(self, a_reg: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.Bvec - self.L @ a_reg - self.M @ b


@dataclass
class ArxEstimate:
    a: np.ndarray
    b: dict[tuple[int, int], np.ndarray]
    Ts: float = 0.02
    converged: bool = True
    iterations: int = 0

    @property
    def k(self) -> int:
        return len(self.a)

    @property
    def unstable(self) -> bool:
        """True when some denominator root lies on or outside the unit circle."""
        from widearea.modal import pole_roots
        return bool(np.any(np.abs(pole_roots(self.a)) >= 1.0))


def _ridge(lam_rel: float, G: np.ndarray) -> float:
    tr = float(np.trace(G))
    return lam_rel * tr / G.shape[0] if tr > 0 else lam_rel


def build_regression(
    P: Sequence[float],
    u: Sequence[float],
    k: int = DEFAULT_K,
    N: int = DEFAULT_N,
    detrend: bool = False,
    start: int = 0,
    pre: int | None = None,
    pair: tuple[int, int] = (0, 0),
) -> RegressionBlock:
    """Assemble one block from samples ``start .. start+N+k-1``.

    With ``detrend`` the mean of the first ``pre`` samples of each series
    (default ``start``; the first sample when that is zero) is removed.
    """
    P = np.asarray(P, dtype=float)
    u = np.asarray(u, dtype=float)
    if P.shape != u.shape or P.ndim != 1:
        raise IdentificationError("P and u must be aligned 1-D series")
    if k < 1 or N < 1:
        raise IdentificationError("k and N must be positive")
    if start < 0:
        raise IdentificationError(f"window start {start} precedes the record")
    if len(P) < start + N + k:
        raise IdentificationError(f"need {start + N + k} samples, have {len(P)}")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(u))):
        raise IdentificationError("non-finite samples")
    if detrend:
        pre = start if pre is None else pre
        P = P - (P[:pre].mean() if pre > 0 else P[0])
        u = u - (u[:pre].mean() if pre > 0 else u[0])
    j = start + k + N - 1
    rows = j - np.arange(N)
    L = np.column_stack([P[rows - i] for i in range(1, k + 1)])
    M = np.column_stack([u[rows - i] for i in range(0, k + 1)])
    return RegressionBlock(L=L, M=M, Bvec=P[rows].copy(), pair=pair)


def joint_lstsq(block: RegressionBlock, ridge: float = DEFAULT_RIDGE) -> tuple[np.ndarray, np.ndarray]:
    """Unpooled LS of one block for (a, b), used for initialization."""
    X = np.hstack([block.L, block.M])
    G = X.T @ X
    lam = _ridge(ridge, G)
    theta = np.linalg.solve(G + lam * np.eye(G.shape[0]), X.T @ block.Bvec)
    k = block.k
    return -theta[:k], theta[k:]


def b_ridge(block: RegressionBlock, ridge: float) -> float:
    return _ridge(ridge, block.M.T @ block.M)


def a_ridge(blocks: Sequence[RegressionBlock], ridge: float) -> float:
    G = sum(b.L.T @ b.L for b in blocks)
    return _ridge(ridge, G)


def solve_a_given_b(
    blocks: Sequence[RegressionBlock],
    b: Sequence[np.ndarray],
    ridge: float = DEFAULT_RIDGE,
) -> np.ndarray:
    """Pooled area-level denominator with the numerators held fixed."""
    if len(blocks) != len(b):
        raise IdentificationError("one numerator per block required")
    k = blocks[0].k
    if any(bl.k != k for bl in blocks):
        raise IdentificationError("blocks must share the model order")
    G = np.zeros((k, k))
    rhs = np.zeros(k)
    for bl, bb in zip(blocks, b):
        bb = np.asarray(bb, dtype=float)
        if bb.shape != (k + 1,):
            raise IdentificationError(f"numerator must have {k + 1} coefficients")
        G += bl.L.T @ bl.L
        rhs += bl.L.T @ (bl.Bvec - bl.M @ bb)
    if ridge > 0:
        G = G + _ridge(ridge, G) * np.eye(k)
    elif np.linalg.matrix_rank(G) < k:
        raise SingularSystemError("normal equations singular; use ridge > 0")
    return -np.linalg.solve(G, rhs)


def solve_b_given_a(block: RegressionBlock, a: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Numerator of one pair with the denominator held fixed."""
    a_reg = -np.asarray(a, dtype=float)
    r = block.Bvec - block.L @ a_reg
    if ridge > 0:
        G = block.M.T @ block.M
        return np.linalg.solve(G + _ridge(ridge, G) * np.eye(G.shape[0]), block.M.T @ r)
    return np.linalg.pinv(block.M) @ r


def pooled_residual(blocks: Sequence[RegressionBlock], a: np.ndarray, b: Sequence[np.ndarray]) -> float:
    a_reg = -np.asarray(a, dtype=float)
    return float(sum(np.sum(bl.residual(a_reg, bb) ** 2) for bl, bb in zip(blocks, b)))


def simulate_arx(a: Sequence[float], b: Sequence[float], u: Sequence[float]) -> np.ndarray:
    """Noiseless output of (b0 + b1 q^-1 ...)/(1 + a1 q^-1 ...) driven by u from rest."""
    from scipy.signal import lfilter
    return lfilter(np.asarray(b, float), np.concatenate([[1.0], np.asarray(a, float)]), np.asarray(u, float))
