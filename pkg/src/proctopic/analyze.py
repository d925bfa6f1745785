"""Post-fit analysis: examinee clustering, the CR index and bootstrap standard errors."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .estep import BatchState
from .kmeans import KMeansResult, kmeans
from .model import EventSequence, ModelParams, ProcTopicError
from .simulate import StopRule, max_events, simulate_corpus

log = logging.getLogger(__name__)

__all__ = [
    "BootstrapResult",
    "BootstrapUnstable",
    "KMeansResult",
    "ShapeMismatch",
    "bootstrap_se",
    "cr_index",
    "kmeans",
    "norm_gamma_features",
    "silhouette_scores",
]


class ShapeMismatch(ProcTopicError):
    pass


class BootstrapUnstable(ProcTopicError):
    pass


def _gammas(states) -> np.ndarray:
    if isinstance(states, BatchState):
        return np.asarray(states.gamma)
    if isinstance(states, np.ndarray):
        return states
    out = []
    for s in states:
        out.append(s["gamma"] if isinstance(s, dict) else s.gamma)
    return np.asarray(out, dtype=np.float64)


def norm_gamma_features(states) -> np.ndarray:
    """m x K^2 matrix of row-normalized gamma_i, rows concatenated.

    ``states`` may be a BatchState, a list of VariationalStates, a list of
    dicts with a "gamma" entry (as read from states.jsonl) or an (m, K, K)
    array.
    """
    g = _gammas(states)
    if g.ndim != 3 or g.shape[1] != g.shape[2]:
        raise ShapeMismatch(f"expected (m, K, K) gammas, got {g.shape}")
    return (g / g.sum(axis=2, keepdims=True)).reshape(len(g), -1)


def silhouette_scores(features, ks=range(2, 9), seed=0, restarts: int = 50) -> dict:
    """Mean silhouette width of the k-means partition for each k (guidance only)."""
    from sklearn.metrics import silhouette_score

    X = np.asarray(features, dtype=np.float64)
    out = {}
    for k in ks:
        if not 2 <= k < len(X):
            continue
        res = kmeans(X, k, seed=seed, restarts=restarts)
        if len(np.unique(res.labels)) < 2:
            out[k] = float("nan")
            continue
        out[k] = float(silhouette_score(X, res.labels))
    return out


def cr_index(B_true, B_hat, cutoff: float) -> float:
    """Share of (k, v) cells on the same side of ``cutoff`` in both matrices.

    A cell counts as a member when its value is >= cutoff. Labels must be
    aligned beforehand.
    """
    A = np.asarray(B_true, dtype=np.float64)
    H = np.asarray(B_hat, dtype=np.float64)
    if A.shape != H.shape:
        raise ShapeMismatch(f"{A.shape} vs {H.shape}")
    return float(np.mean((A >= cutoff) == (H >= cutoff)))


# --- parametric bootstrap ------------------------------------------------------------


SE_FIELDS = ("B", "G", "p0", "norm_R", "a", "d")


def _summary(p: ModelParams) -> dict:
    return {"B": p.B, "G": p.G, "p0": p.p0, "norm_R": p.norm_R(), "a": np.array(p.a), "d": np.array(p.d)}


@dataclass
class BootstrapResult:
    se: dict
    estimates: list = field(default_factory=list)
    n_failed: int = 0

    def write(self, path) -> None:
        """Long-format table: parameter, row, col, se (1-based indices)."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["parameter", "row", "col", "se"])
            for name in SE_FIELDS:
                arr = np.atleast_2d(self.se[name])
                if np.ndim(self.se[name]) == 1:
                    arr = arr.T
                for (i, j), v in np.ndenumerate(arr):
                    w.writerow([name, i + 1, j + 1, format(float(v), ".17g")])


def _stop_rules(template, m):
    if isinstance(template, StopRule):
        if m is None:
            raise ValueError("m is required with a single stop rule")
        return [template] * m
    rules = []
    for t in template:
        if isinstance(t, StopRule):
            rules.append(t)
        elif isinstance(t, EventSequence):
            rules.append(max_events(len(t)))
        else:
            rules.append(max_events(int(t)))
    return rules


def bootstrap_se(params: ModelParams, fit_config, n_boot: int = 100, template=None, seed=0, m=None,
                 warm_start: bool = True, min_success: float = 0.8) -> BootstrapResult:
    """Parametric bootstrap standard errors of a fitted model.

    Each replicate simulates a corpus from ``params`` with the stop design of
    ``template`` (a stop rule plus ``m``, or one stop rule, EventSequence or
    length per examinee), refits it with ``fit_config`` and aligns labels to
    ``params``. With ``warm_start`` the refit starts at ``params``. Failing
    replicates are dropped; fewer than ``min_success * n_boot`` successes
    raise BootstrapUnstable.

    Returns
    -------
    BootstrapResult whose ``se`` holds elementwise sample standard
    deviations (ddof=1) for B, G, p0, norm(R), a and d.
    """
    from .fit import align_labels, fit

    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    rules = _stop_rules(template, m)
    estimates, failed = [], 0
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(n_boot)):
        seqs, _ = simulate_corpus(params, len(rules), rules, seed=child)
        try:
            cfg = replace(fit_config, K=params.K)
            rep = fit(seqs, cfg, init=params if warm_start else None, V=params.V)
        except ProcTopicError as exc:
            log.warning("bootstrap replicate %d failed: %s", r, exc)
            failed += 1
            continue
        p = rep.params
        estimates.append(_summary(p.permute(align_labels(p, params))))
    if len(estimates) < max(2, min_success * n_boot):
        raise BootstrapUnstable(f"only {len(estimates)} of {n_boot} replicates succeeded")
    se = {k: np.std(np.stack([e[k] for e in estimates]), axis=0, ddof=1) for k in SE_FIELDS}
    return BootstrapResult(se=se, estimates=estimates, n_failed=failed)
