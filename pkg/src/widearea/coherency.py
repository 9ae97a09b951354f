"""Coherent generator grouping by spectral clustering of speed windows.

Similarity between generators i and j is

    S_ij = exp(-||dw_i - dw_j|| / (2 sigma^2))

with the Euclidean norm over the window. The leading k eigenvectors of the
normalized similarity D^-1/2 S D^-1/2 are obtained either exactly or through
a Nystrom approximation on a seeded landmark subset, row-normalized, and
clustered by seeded k-means.

Because the distance enters unsquared, multiplying every series by c is
undone by sigma -> sqrt(c) sigma. The default sigma = sqrt(median(d)/2)
puts 2 sigma^2 at the median pairwise distance and is therefore scale
adaptive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.cluster import KMeans


class CoherencyError(ValueError):
    pass


class DegenerateSpectrumError(CoherencyError):
    pass


EIGEN_GAP_MIN = 1e-12
DEFAULT_WINDOW_S = 10.0


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    S: np.ndarray
    sigma: float

    @property
    def n(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class Grouping:
    k: int
    assignment: tuple[int, ...]
    labels: tuple[str, ...] = ()
    sigma: float = float("nan")
    landmarks: int = 0
    seed: int = 0

    def groups(self) -> list[list[int]]:
        return [[i for i, c in enumerate(self.assignment) if c == g] for g in range(1, self.k + 1)]

    def to_dict(self) -> dict:
        names = self.labels or tuple(str(i + 1) for i in range(len(self.assignment)))
        return {"sigma": self.sigma, "k": self.k, "landmarks": self.landmarks, "seed": self.seed,
                "assignment": {nm: c for nm, c in zip(names, self.assignment)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _as_windows(windows) -> np.ndarray:
    X = np.asarray(windows, dtype=float)
    if X.ndim != 2:
        raise CoherencyError("windows must be a (generators, samples) array")
    if X.shape[0] < 2:
        raise CoherencyError("need at least 2 generators")
    if np.isnan(X).any():
        raise CoherencyError("NaN in input windows")
    if not np.isfinite(X).all():
        raise CoherencyError("non-finite input windows")
    return X


def default_sigma(windows) -> float:
    X = _as_windows(windows)
    med = float(np.median(pdist(X)))
    if med <= 0:
        return 1.0
    return math.sqrt(med / 2.0)


def similarity(windows, sigma: float | None = None) -> SimilarityMatrix:
    X = _as_windows(windows)
    if sigma is None:
        sigma = default_sigma(X)
    if not sigma > 0:
        raise CoherencyError("sigma must be positive")
    d = squareform(pdist(X))
    S = np.exp(-d / (2.0 * sigma**2))
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(S=S, sigma=float(sigma))


def _check_gap(vals_desc: np.ndarray, k: int) -> None:
    if k < len(vals_desc) and vals_desc[k - 1] - vals_desc[k] < EIGEN_GAP_MIN:
        raise DegenerateSpectrumError(
            f"eigen-gap {vals_desc[k - 1] - vals_desc[k]:.3e} below {EIGEN_GAP_MIN:g} at k={k}")


def spectral_embedding(S: np.ndarray, k: int) -> np.ndarray:
    """Exact leading-k eigenvectors of D^-1/2 S D^-1/2 (columns by descending eigenvalue)."""
    d = S.sum(axis=1)
    Dm = 1.0 / np.sqrt(d)
    N = Dm[:, None] * S * Dm[None, :]
    vals, vecs = np.linalg.eigh(0.5 * (N + N.T))
    order = np.argsort(-vals, kind="stable")
    _check_gap(vals[order], k)
    return vecs[:, order[:k]]


def landmark_indices(n: int, landmarks: int, seed: int) -> np.ndarray:
    if not 1 <= landmarks <= n:
        raise CoherencyError(f"landmarks must lie in [1, {n}]")
    if landmarks == n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=landmarks, replace=False))


def nystrom_embedding(S: np.ndarray, k: int, landmarks: int, seed: int = 0) -> np.ndarray:
    """Leading-k eigenvectors of the Nystrom-approximated normalized similarity.

    Only the columns S[:, idx] are used: S ~ C W^+ C'. With R = D^-1/2 C W^+1/2
    the normalized matrix is R R', whose eigenvectors are the left singular
    vectors of R.
    """
    n = S.shape[0]
    idx = landmark_indices(n, landmarks, seed)
    C = S[:, idx]
    W = C[idx, :]
    w, V = np.linalg.eigh(0.5 * (W + W.T))
    tol = max(w.max(), 0.0) * len(w) * np.finfo(float).eps
    inv_sqrt = np.where(w > tol, 1.0 / np.sqrt(np.where(w > tol, w, 1.0)), 0.0)
    W_is = (V * inv_sqrt) @ V.T
    d = C @ (W_is @ (W_is @ (C.T @ np.ones(n))))
    if np.any(d <= 0):
        raise CoherencyError("Nystrom degree estimate not positive; use more landmarks")
    R = (C / np.sqrt(d)[:, None]) @ W_is
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    _check_gap(np.concatenate([s**2, np.zeros(max(0, n - len(s)))]), k)
    if k > U.shape[1]:
        raise CoherencyError("k exceeds the number of landmarks")
    return U[:, :k]


def _relabel(labels: np.ndarray) -> tuple[int, ...]:
    seen: dict[int, int] = {}
    out = []
    for lab in labels:
        if lab not in seen:
            seen[lab] = len(seen) + 1
        out.append(seen[lab])
    return tuple(out)


def cluster_rows(E: np.ndarray, k: int, seed: int = 0) -> tuple[int, ...]:
    nrm = np.linalg.norm(E, axis=1, keepdims=True)
    Y = E / np.where(nrm > 0, nrm, 1.0)
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, random_state=seed)
    return _relabel(km.fit_predict(Y))


def group(
    windows,
    k: int,
    sigma: float | None = None,
    landmarks: int | None = None,
    seed: int = 0,
    labels: Sequence[str] = (),
    exact: bool = False,
) -> Grouping:
    """Seeded spectral clustering of generator speed windows into k groups.

    ``landmarks`` defaults to n; ``exact=True`` bypasses Nystrom and
    eigendecomposes the full normalized similarity. Cluster ids are 1-based
    in order of first appearance.
    """
    X = _as_windows(windows)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise CoherencyError(f"k must lie in [1, {n}]")
    landmarks = n if landmarks is None else int(landmarks)
    landmark_indices(n, landmarks, seed)
    sm = similarity(X, sigma)
    if k == 1:
        assignment = (1,) * n
    else:
        if exact:
            E = spectral_embedding(sm.S, k)
        else:
            E = nystrom_embedding(sm.S, k, landmarks, seed)
        assignment = cluster_rows(E, k, seed)
    if len(set(assignment)) != k:
        raise CoherencyError("k-means produced an empty cluster")
    return Grouping(k=k, assignment=assignment, labels=tuple(labels), sigma=sm.sigma,
                    landmarks=landmarks, seed=seed)


def speed_windows(record, gen_labels: Sequence[str], start: int, length: int) -> np.ndarray:
    """(generators, samples) array of speed deviations from a SimRecord."""
    X = np.vstack([np.asarray(record[f"{g}.speed"])[start:start + length] for g in gen_labels])
    if X.shape[1] < length:
        raise CoherencyError(f"record too short for a {length}-sample window")
    return X
