"""Per-examinee variational updates.

One sweep runs the chain (q(z)) with the current Dirichlet and frailty
factors, then refreshes gamma, the variational transition matrix and the
Gamma factor (a_tilde, d_tilde, kappa) from the new chain posteriors.

The chain is driven by the unnormalized weights exp(E_q[log lambda]),
which is the exact coordinate-ascent update for q(z); ``trans`` stored on
the state is the same matrix with rows renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fb
from .model import Corpus, EventSequence, ModelParams, VariationalState
from .special import digamma


def expected_log_lambda(gamma: np.ndarray) -> np.ndarray:
    """E[log lambda] under independent Dirichlet rows; works on (..., K, K)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    return digamma(gamma) - digamma(gamma.sum(axis=-1, keepdims=True))


def update_gamma(r: np.ndarray, phi_joint: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if len(phi_joint) == 0:
        return r.copy()
    return r + np.asarray(phi_joint).sum(axis=0)


def update_trans(gamma: np.ndarray) -> np.ndarray:
    elog = expected_log_lambda(gamma)
    w = np.exp(elog - elog.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def update_frailty(seq: EventSequence, params: ModelParams, phi_joint: np.ndarray, G: np.ndarray | None = None):
    """Return (a_tilde, d_tilde, kappa) of the Gamma factor q(xi)."""
    G = params.G if G is None else np.asarray(G)
    a_tilde = len(seq) + params.a - 1.0
    d_tilde = params.d
    if len(seq) > 1:
        rate = (np.asarray(phi_joint) * np.exp(G)).sum(axis=(1, 2))
        d_tilde = params.d + float(np.dot(rate, np.diff(seq.times)))
    return a_tilde, d_tilde, a_tilde / d_tilde


def init_state(seq: EventSequence, params: ModelParams) -> VariationalState:
    """Prior-mean start: gamma = R, trans = norm(R), kappa = a/d."""
    K, N = params.K, len(seq)
    return VariationalState(
        gamma=params.R.copy(),
        trans=params.norm_R(),
        kappa=params.a / params.d,
        a_tilde=params.a,
        d_tilde=params.d,
        phi=np.full((N, K), 1.0 / K),
        phi_joint=np.full((max(N - 1, 0), K, K), 1.0 / K**2),
    )


def run_estep(seq: EventSequence, params: ModelParams, state: VariationalState, use_time: bool = True) -> VariationalState:
    """One coordinate sweep for a single examinee."""
    weights = np.exp(expected_log_lambda(state.gamma))
    phi, joint, loglik, ent = fb.run_chain(seq, params, weights, state.kappa, use_time)
    gamma = update_gamma(params.R, joint)
    if use_time:
        a_tilde, d_tilde, kappa = update_frailty(seq, params, joint)
    else:
        a_tilde, d_tilde = len(seq) + params.a - 1.0, params.d
        kappa = a_tilde / d_tilde
    return VariationalState(
        gamma=gamma,
        trans=update_trans(gamma),
        kappa=kappa,
        a_tilde=a_tilde,
        d_tilde=d_tilde,
        phi=phi,
        phi_joint=joint,
        chain_entropy=ent,
        loglik_q=loglik,
    )


@dataclass
class BatchState:
    """Variational state of a whole corpus in packed arrays.

    ``phi`` and ``joint`` are indexed by the corpus' flat event index;
    ``joint[j]`` is the pairwise posterior of the transition into event j
    (unused at each sequence start). ``T``/``W`` are per-examinee sums of
    the pairwise posteriors and of posterior-weighted gaps.
    """

    gamma: np.ndarray
    kappa: np.ndarray
    a_tilde: np.ndarray
    d_tilde: np.ndarray
    phi: np.ndarray
    joint: np.ndarray
    T: np.ndarray
    W: np.ndarray
    loglik: np.ndarray
    entropy: np.ndarray

    @property
    def trans(self) -> np.ndarray:
        return update_trans(self.gamma)

    def state(self, corpus: Corpus, i: int) -> VariationalState:
        sl = corpus.slice(i)
        return VariationalState(
            gamma=self.gamma[i].copy(),
            trans=update_trans(self.gamma[i]),
            kappa=float(self.kappa[i]),
            a_tilde=float(self.a_tilde[i]),
            d_tilde=float(self.d_tilde[i]),
            phi=self.phi[sl].copy(),
            phi_joint=self.joint[sl.start + 1:sl.stop].copy(),
            chain_entropy=float(self.entropy[i]),
            loglik_q=float(self.loglik[i]),
        )

    def states(self, corpus: Corpus) -> list[VariationalState]:
        return [self.state(corpus, i) for i in range(corpus.m)]

    @classmethod
    def from_states(cls, corpus: Corpus, states) -> "BatchState":
        K = states[0].gamma.shape[0]
        out = init_batch(corpus, K=K)
        for i, st in enumerate(states):
            sl = corpus.slice(i)
            out.gamma[i] = st.gamma
            out.kappa[i] = st.kappa
            out.a_tilde[i] = st.a_tilde
            out.d_tilde[i] = st.d_tilde
            out.phi[sl] = st.phi
            out.joint[sl.start + 1:sl.stop] = st.phi_joint
            if len(st.phi_joint):
                out.T[i] = st.phi_joint.sum(axis=0)
                out.W[i] = np.tensordot(corpus.gaps[sl.start + 1:sl.stop], st.phi_joint, axes=1)
            out.entropy[i] = st.chain_entropy
            out.loglik[i] = st.loglik_q
        return out


def init_batch(corpus: Corpus, params: ModelParams | None = None, K: int | None = None) -> BatchState:
    K = params.K if params is not None else K
    m, n = corpus.m, corpus.n_events
    if params is not None:
        gamma = np.broadcast_to(params.R, (m, K, K)).copy()
        a_tilde = np.full(m, params.a)
        d_tilde = np.full(m, params.d)
    else:
        gamma = np.ones((m, K, K))
        a_tilde = np.ones(m)
        d_tilde = np.ones(m)
    joint = np.full((n, K, K), 1.0 / K**2)
    joint[corpus.first] = 0.0
    return BatchState(
        gamma=gamma,
        kappa=a_tilde / d_tilde,
        a_tilde=a_tilde,
        d_tilde=d_tilde,
        phi=np.full((n, K), 1.0 / K),
        joint=joint,
        T=np.zeros((m, K, K)),
        W=np.zeros((m, K, K)),
        loglik=np.zeros(m),
        entropy=np.zeros(m),
    )


def estep_batch(corpus: Corpus, params: ModelParams, state: BatchState, use_time: bool = True) -> BatchState:
    """Run one sweep for every examinee; raises fb.Underflow naming the first failure."""
    K, m, n = params.K, corpus.m, corpus.n_events
    log_w = expected_log_lambda(state.gamma)
    phi = np.empty((n, K))
    joint = np.zeros((n, K, K))
    T = np.empty((m, K, K))
    W = np.empty((m, K, K))
    loglik = np.empty(m)
    entropy = np.empty(m)
    ok = np.zeros(m, dtype=np.bool_)
    fb._chain_batch(corpus.events, corpus.gaps, corpus.offsets, *fb.floored(params), params.log_p0, params.log_B, log_w,
                    params.G, params.H, np.ascontiguousarray(state.kappa, dtype=np.float64), bool(use_time),
                    phi, joint, T, W, loglik, entropy, ok)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise fb.Underflow(f"chain underflow for examinee {corpus.sequences[bad].examinee_id}")
    gamma = params.R[None, :, :] + T
    a_tilde = corpus.lengths + params.a - 1.0
    if use_time:
        d_tilde = params.d + (W * params.H[None]).sum(axis=(1, 2))
    else:
        d_tilde = np.full(m, params.d)
    return BatchState(gamma=gamma, kappa=a_tilde / d_tilde, a_tilde=a_tilde.astype(np.float64), d_tilde=d_tilde,
                      phi=phi, joint=joint, T=T, W=W, loglik=loglik, entropy=entropy)
