"""Weighted Lloyd k-means with k-means++ seeding and restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    history: list  # within-cluster sum of squares after each Lloyd step of the best run
    n_iter: int

    def __iter__(self):
        # unpacks as (labels, centers)
        return iter((self.labels, self.centers))


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X, w, k, rng) -> np.ndarray:
    n = len(X)
    first = rng.choice(n, p=w / w.sum())
    centers = [X[first]]
    d2 = _sqdist(X, X[first:first + 1])[:, 0]
    for _ in range(1, k):
        p = w * d2
        tot = p.sum()
        # all remaining points coincide with a center: any choice is as good
        idx = rng.choice(n, p=p / tot) if tot > 0 else rng.choice(n, p=w / w.sum())
        centers.append(X[idx])
        d2 = np.minimum(d2, _sqdist(X, X[idx:idx + 1])[:, 0])
    return np.array(centers)


def _lloyd(X, w, C, max_iter, tol):
    history = []
    labels = None
    for it in range(1, max_iter + 1):
        D = _sqdist(X, C)
        labels = D.argmin(axis=1)
        mind = D[np.arange(len(X)), labels]
        history.append(float(np.dot(w, mind)))
        newC = C.copy()
        for j in range(len(C)):
            mask = labels == j
            wj = w[mask].sum()
            if wj > 0:
                newC[j] = (w[mask, None] * X[mask]).sum(axis=0) / wj
            else:
                # empty cluster: move it onto the point farthest from its center
                far = int(np.argmax(w * mind))
                newC[j] = X[far]
                mind[far] = 0.0
        shift = float(np.max(np.abs(newC - C)))
        C = newC
        if shift <= tol:
            break
    D = _sqdist(X, C)
    labels = D.argmin(axis=1)
    inertia = float(np.dot(w, D[np.arange(len(X)), labels]))
    history.append(inertia)
    return labels, C, inertia, history, it


def kmeans(features, n_clusters: int, seed=0, restarts: int = 50, max_iter: int = 300, tol: float = 1e-10,
           sample_weight=None) -> KMeansResult:
    """Best-of-``restarts`` weighted k-means.

    Parameters
    ----------
    features : (n, p) array
    n_clusters : number of clusters, 1 <= n_clusters <= n
    seed : int or SeedSequence; each restart uses its own spawned stream
    sample_weight : optional non-negative weights per row

    Returns
    -------
    KMeansResult with the lowest within-cluster sum of squares (first wins on ties).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("features must be a non-empty 2-d array")
    n = len(X)
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must be in 1..{n}, got {n_clusters}")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("sample_weight must be non-negative with a positive sum")
    best = None
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for child in ss.spawn(restarts):
        rng = np.random.default_rng(child)
        C0 = _plusplus(X, w, n_clusters, rng)
        labels, C, inertia, history, it = _lloyd(X, w, C0, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, C, inertia, history, it)
    return best
