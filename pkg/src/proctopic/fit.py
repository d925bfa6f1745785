"""Forward-backward variational EM driver."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from . import fb
from .estep import BatchState, estep_batch, init_batch
from .model import EPS, Corpus, ModelParams, ProcTopicError, VariationalState, save_params
from .mstep import SuffStats, mstep, qfunction
from .special import digamma

log = logging.getLogger(__name__)


class AllRestartsFailed(ProcTopicError):
    pass


@dataclass
class FitConfig:
    K: int
    max_iters: int = 1000
    rel_tol: float = 1e-6
    restarts: int = 20
    seed: int = 0
    parallelism: int | None = None
    use_time: bool = True
    min_iters: int = 2

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class FitReport:
    params: ModelParams
    corpus: Corpus
    batch: BatchState
    trace: np.ndarray  # rows: (Q, ELBO) after each M-step
    iterations: int
    best_restart: int
    elbo: float
    restart_elbos: list = field(default_factory=list)
    q_before_mstep: np.ndarray | None = None
    converged: bool = False
    use_time: bool = True

    @property
    def states(self) -> list[VariationalState]:
        return self.batch.states(self.corpus)

    def permuted(self, perm) -> "FitReport":
        """Report with topics relabelled so new topic j is old topic perm[j]."""
        p = np.asarray(perm)
        b = self.batch
        batch = BatchState(
            gamma=b.gamma[:, p][:, :, p], kappa=b.kappa, a_tilde=b.a_tilde, d_tilde=b.d_tilde,
            phi=b.phi[:, p], joint=b.joint[:, p][:, :, p], T=b.T[:, p][:, :, p], W=b.W[:, p][:, :, p],
            loglik=b.loglik, entropy=b.entropy,
        )
        return FitReport(params=self.params.permute(p), corpus=self.corpus, batch=batch, trace=self.trace,
                         iterations=self.iterations, best_restart=self.best_restart, elbo=self.elbo,
                         restart_elbos=self.restart_elbos, q_before_mstep=self.q_before_mstep,
                         converged=self.converged, use_time=self.use_time)


# --- objective -----------------------------------------------------------------


def dirichlet_entropy(gamma: np.ndarray) -> np.ndarray:
    """Entropy of Dir(gamma) along the last axis."""
    g0 = gamma.sum(axis=-1)
    K = gamma.shape[-1]
    return (gammaln(gamma).sum(axis=-1) - gammaln(g0) + (g0 - K) * digamma(g0)
            - ((gamma - 1.0) * digamma(gamma)).sum(axis=-1))


def gamma_entropy(shape, rate):
    shape = np.asarray(shape, dtype=np.float64)
    return shape - np.log(rate) + gammaln(shape) + (1.0 - shape) * digamma(shape)


def entropy_terms(state: BatchState, use_time: bool = True) -> float:
    h = float(np.sum(state.entropy)) + float(np.sum(dirichlet_entropy(state.gamma)))
    if use_time:
        h += float(np.sum(gamma_entropy(state.a_tilde, state.d_tilde)))
    return h


def elbo(corpus, state, params: ModelParams, use_time: bool = True) -> float:
    """Evidence lower bound: Q plus the entropy of every variational factor.

    ``corpus`` may be a Corpus or a list of EventSequences; ``state`` a
    BatchState or a list of VariationalStates.
    """
    if not isinstance(corpus, Corpus):
        corpus = Corpus(corpus, V=params.V)
    if not isinstance(state, BatchState):
        state = BatchState.from_states(corpus, list(state))
    stats = SuffStats.collect(corpus, state)
    return qfunction(params, stats, use_time) + entropy_terms(state, use_time)


# --- initialization --------------------------------------------------------------


def init_params(corpus, K: int, seed=0) -> ModelParams:
    """Random start: B mixes Dirichlet(1) rows with empirical event frequencies."""
    if not isinstance(corpus, Corpus):
        corpus = Corpus(corpus)
    rng = np.random.default_rng(seed)
    V = corpus.V
    freq = np.bincount(corpus.events, minlength=V) / corpus.n_events
    B = 0.5 * rng.dirichlet(np.ones(V), size=K) + 0.5 * freq[None, :]
    B = np.maximum(B, EPS)
    B /= B.sum(axis=1, keepdims=True)
    n_trans = float(np.sum(corpus.lengths - 1))
    total_gap = float(corpus.gaps.sum())
    g = math.log(n_trans / total_gap) if n_trans > 0 and total_gap > 0 else 0.0
    return ModelParams(B=B, G=np.full((K, K), g), p0=np.full(K, 1.0 / K), R=np.ones((K, K)), a=1.0, d=1.0)


def init_params_cooccurrence(corpus, K: int, seed=0) -> ModelParams:
    """Data-driven start: group events with similar neighbours, one group per topic.

    Each event is described by its smoothed next-event and previous-event
    distributions; weighted k-means (weights = event frequency) splits the
    vocabulary into K groups and topic k starts with the empirical
    frequencies up-weighted tenfold on group k. G, p0, R, a, d are set as in
    :func:`init_params`. Falls back to :func:`init_params` when V < K.
    """
    from .kmeans import kmeans

    if not isinstance(corpus, Corpus):
        corpus = Corpus(corpus)
    base = init_params(corpus, K, seed)
    V = corpus.V
    freq = np.bincount(corpus.events, minlength=V).astype(np.float64)
    present = np.flatnonzero(freq > 0)
    if len(present) < K:
        return base
    inner = np.ones(corpus.n_events, dtype=bool)
    inner[corpus.first] = False
    nxt = corpus.events[inner]
    prv = corpus.events[np.flatnonzero(inner) - 1]
    M = np.zeros((V, V))
    np.add.at(M, (prv, nxt), 1.0)
    f = freq / freq.sum()
    out_d = (M + f[None, :]) / (M.sum(axis=1, keepdims=True) + 1.0)
    in_d = (M.T + f[None, :]) / (M.sum(axis=0)[:, None] + 1.0)
    X = np.hstack([out_d, in_d])[present]
    res = kmeans(X, K, seed=seed, restarts=10, sample_weight=freq[present])
    B = np.tile(0.1 * f, (K, 1))
    for j, v in enumerate(present):
        B[res.labels[j], v] = f[v]
    B = np.maximum(B, EPS)
    B /= B.sum(axis=1, keepdims=True)
    return base.replace(B=B)


# --- driver ----------------------------------------------------------------------


def _run_restart(corpus: Corpus, params: ModelParams, config: FitConfig):
    state = init_batch(corpus, params)
    trace, q_pre = [], []
    prev_q = None
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        state = estep_batch(corpus, params, state, config.use_time)
        stats = SuffStats.collect(corpus, state)
        q_pre.append(qfunction(params, stats, config.use_time))
        params = mstep(params, stats, config.use_time)
        q = qfunction(params, stats, config.use_time)
        trace.append((q, q + entropy_terms(state, config.use_time)))
        if prev_q is not None and it >= config.min_iters and abs(q - prev_q) <= config.rel_tol * abs(q):
            converged = True
            break
        prev_q = q
    return params, state, np.array(trace), np.array(q_pre), it, converged


def fit(seqs, config: FitConfig, init: ModelParams | None = None, V: int | None = None) -> FitReport:
    """Fit the model with ``config.restarts`` random starts; keep the highest final ELBO.

    Even-numbered restarts start from :func:`init_params_cooccurrence`,
    odd ones from :func:`init_params`; ``init``, if given, replaces the
    start of restart 0. ``V`` fixes the vocabulary size when some event
    ids never occur. The returned parameters are put on the scale with
    prior mean frailty 1 (see :func:`canonical_scale`); ``trace`` holds
    the unscaled values.
    """
    if V is None and init is not None:
        V = init.V
    corpus = seqs if isinstance(seqs, Corpus) else Corpus(seqs, V=V)
    if config.parallelism:
        import numba

        numba.set_num_threads(min(int(config.parallelism), numba.config.NUMBA_NUM_THREADS))
    children = np.random.SeedSequence(config.seed).spawn(config.restarts)
    best = None
    elbos = []
    for r, child in enumerate(children):
        if r == 0 and init is not None:
            start = init
        elif r % 2 == 0:
            start = init_params_cooccurrence(corpus, config.K, child)
        else:
            start = init_params(corpus, config.K, child)
        try:
            params, state, trace, q_pre, iters, conv = _run_restart(corpus, start, config)
        except fb.Underflow as exc:
            log.warning("restart %d failed: %s", r, exc)
            elbos.append(float("nan"))
            continue
        final = float(trace[-1, 1])
        elbos.append(final)
        if best is None or final > best[0]:
            best = (final, r, params, state, trace, q_pre, iters, conv)
    if best is None:
        raise AllRestartsFailed(f"all {config.restarts} restarts hit chain underflow")
    final, r, params, state, trace, q_pre, iters, conv = best
    params, state = canonical_scale(params, state)
    return FitReport(params=params, corpus=corpus, batch=state, trace=trace, iterations=iters, best_restart=r,
                     elbo=final, restart_elbos=elbos, q_before_mstep=q_pre, converged=conv,
                     use_time=config.use_time)


def canonical_scale(params: ModelParams, state: BatchState | None = None):
    """Move (G, d) along the likelihood's flat direction so that d = a.

    Scaling every frailty by c and shifting G by -log c leaves the model
    unchanged, so only G + log(a/d)-type combinations are identified. This
    picks the representative whose prior mean frailty a/d is 1. The ELBO of
    ``state`` is unchanged; Q shifts by a constant because the Gamma
    entropies do.
    """
    c = params.a / params.d
    out = params.replace(G=params.G + math.log(c), d=params.a)
    if state is None:
        return out
    st = BatchState(gamma=state.gamma, kappa=state.kappa / c, a_tilde=state.a_tilde, d_tilde=state.d_tilde * c,
                    phi=state.phi, joint=state.joint, T=state.T, W=state.W, loglik=state.loglik,
                    entropy=state.entropy)
    return out, st


def align_labels(fitted: ModelParams, reference: ModelParams) -> np.ndarray:
    """Permutation ``perm`` with fitted topic perm[j] matched to reference topic j.

    Minimizes total variation between matched emission rows (Hungarian method).
    """
    if fitted.B.shape != reference.B.shape:
        raise ValueError(f"shape mismatch {fitted.B.shape} vs {reference.B.shape}")
    cost = 0.5 * np.abs(reference.B[:, None, :] - fitted.B[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return perm


# --- bundle I/O ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_report(report: FitReport, out_dir) -> None:
    """Write params.json, states.jsonl and trace.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(report.params, out / "params.json")
    b = report.batch
    with open(out / "states.jsonl", "w", encoding="utf-8") as fh:
        for i, seq in enumerate(report.corpus.sequences):
            sl = report.corpus.slice(i)
            rec = {
                "examinee_id": str(seq.examinee_id),
                "gamma": b.gamma[i].tolist(),
                "kappa": float(b.kappa[i]),
                "a_tilde": float(b.a_tilde[i]),
                "d_tilde": float(b.d_tilde[i]),
                "phi": b.phi[sl].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
    with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "Q", "ELBO"])
        for it, (q, e) in enumerate(report.trace, start=1):
            w.writerow([it, _fmt(q), _fmt(e)])
    meta = {
        "K": report.params.K,
        "V": report.params.V,
        "use_time": report.use_time,
        "iterations": report.iterations,
        "best_restart": report.best_restart,
        "elbo": report.elbo,
        "converged": report.converged,
        "restart_elbos": report.restart_elbos,
    }
    (out / "fit.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def load_states(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
