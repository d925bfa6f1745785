"""Global parameter updates maximizing the expected complete-data log-likelihood Q.

B, G, p0 and d have closed forms; a is moved by gradient ascent with
backtracking and each row of R by Newton-Raphson using the
diagonal-plus-rank-one structure of its Hessian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.special import gammaln

from .estep import BatchState, expected_log_lambda
from .model import EPS, Corpus, ModelParams, ProcTopicError
from .special import digamma, digamma_scalar, trigamma, trigamma_scalar

log = logging.getLogger(__name__)

G_FREEZE_MASS = 1e-8


class EmptyTopic(ProcTopicError):
    pass


class LineSearchFailed(ProcTopicError):
    pass


class NewtonDiverged(ProcTopicError):
    pass


@dataclass
class SuffStats:
    """Corpus-level sufficient statistics of the variational state.

    Attributes
    ----------
    m : number of examinees
    counts : K x V posterior event counts, sum_i sum_n phi_in[k] 1{e_in = v}
    first : length-K sum of first-event posteriors
    first_all : m x K first-event posteriors
    trans : K x K summed pairwise posteriors
    kappa_gap : K x K sum_i kappa_i sum_n phi~ dt
    elog_lambda : m x K x K expected log transition probabilities
    trans_elog : scalar sum_i <T_i, E log lambda_i>
    elog_xi : length-m Psi(a~_i) - log d~_i
    kappa : length-m a~_i / d~_i
    lengths : length-m sequence lengths
    """

    m: int
    counts: np.ndarray
    first: np.ndarray
    first_all: np.ndarray
    trans: np.ndarray
    kappa_gap: np.ndarray
    elog_lambda: np.ndarray
    trans_elog: float
    elog_xi: np.ndarray
    kappa: np.ndarray
    a_tilde: np.ndarray
    d_tilde: np.ndarray
    lengths: np.ndarray

    @classmethod
    def collect(cls, corpus: Corpus, state: BatchState) -> "SuffStats":
        K = state.phi.shape[1]
        counts = np.stack([np.bincount(corpus.events, weights=state.phi[:, k], minlength=corpus.V) for k in range(K)])
        first_all = state.phi[corpus.first]
        elog = expected_log_lambda(state.gamma)
        return cls(
            m=corpus.m,
            counts=counts,
            first=first_all.sum(axis=0),
            first_all=first_all,
            trans=state.T.sum(axis=0),
            kappa_gap=np.tensordot(state.kappa, state.W, axes=1),
            elog_lambda=elog,
            trans_elog=float(np.sum(state.T * elog)),
            elog_xi=digamma(state.a_tilde) - np.log(state.d_tilde),
            kappa=np.asarray(state.kappa, dtype=np.float64),
            a_tilde=np.asarray(state.a_tilde, dtype=np.float64),
            d_tilde=np.asarray(state.d_tilde, dtype=np.float64),
            lengths=corpus.lengths,
        )


def _dirichlet_lognorm(R: np.ndarray) -> float:
    return float(np.sum(gammaln(R.sum(axis=1)) - gammaln(R).sum(axis=1)))


def q_frailty(a: float, d: float, stats: SuffStats) -> float:
    return float(np.sum((stats.lengths + a - 2.0) * stats.elog_xi)
                 + stats.m * (a * math.log(d) - math.lgamma(a)) - d * stats.kappa.sum())


def qfunction(params: ModelParams, stats: SuffStats, use_time: bool = True) -> float:
    """Expected complete-data log-likelihood under the variational state."""
    q = float(np.sum(stats.counts * params.log_B))
    q += float(np.dot(stats.first, params.log_p0))
    q += stats.trans_elog
    q += float(np.sum((params.R - 1.0) * stats.elog_lambda.sum(axis=0)))
    q += stats.m * _dirichlet_lognorm(params.R)
    if use_time:
        q += float(np.sum(stats.trans * params.G) - np.sum(stats.kappa_gap * params.H))
        q += q_frailty(params.a, params.d, stats)
    return q


# --- closed forms -------------------------------------------------------------


def update_B(counts: np.ndarray, prev_B: np.ndarray | None = None) -> np.ndarray:
    """Row-normalized posterior event counts, floored at EPS.

    A topic with no posterior mass keeps its previous row.
    """
    counts = np.asarray(counts, dtype=np.float64)
    tot = counts.sum(axis=1, keepdims=True)
    B = np.empty_like(counts)
    for k in range(counts.shape[0]):
        if tot[k, 0] > 0:
            B[k] = counts[k] / tot[k, 0]
        elif prev_B is not None:
            log.warning("topic %d has no posterior mass; keeping previous emission row", k)
            B[k] = prev_B[k]
        else:
            raise EmptyTopic(f"topic {k} has no posterior mass")
    low = B < EPS
    if low.any():
        B = np.where(low, EPS, B)
        B /= B.sum(axis=1, keepdims=True)
    return B


def emission_counts(phi: np.ndarray, events: np.ndarray, V: int) -> np.ndarray:
    return np.stack([np.bincount(events, weights=phi[:, k], minlength=V) for k in range(phi.shape[1])])


def update_G(trans_mass: np.ndarray, kappa_gap_mass: np.ndarray, prev_G: np.ndarray) -> np.ndarray:
    """g = log(sum phi~ / sum kappa phi~ dt); cells with negligible mass keep prev_G."""
    trans_mass = np.asarray(trans_mass, dtype=np.float64)
    kappa_gap_mass = np.asarray(kappa_gap_mass, dtype=np.float64)
    G = np.array(prev_G, dtype=np.float64)
    ok = (trans_mass >= G_FREEZE_MASS) & (kappa_gap_mass > 0)
    G[ok] = np.log(trans_mass[ok] / kappa_gap_mass[ok])
    return G


def g_gradient(G: np.ndarray, stats: SuffStats) -> np.ndarray:
    """dQ/dG = transition mass - exp(G) * kappa-weighted gap mass."""
    return stats.trans - np.exp(G) * stats.kappa_gap


def update_p0(first_phi: np.ndarray) -> np.ndarray:
    first_phi = np.asarray(first_phi, dtype=np.float64)
    p0 = first_phi.sum(axis=0) / first_phi.shape[0]
    return p0 / p0.sum()


def update_d(a: float, kappa: np.ndarray) -> float:
    kappa = np.asarray(kappa, dtype=np.float64)
    return len(kappa) * a / float(kappa.sum())


def _q_a(a: float, coef: float, m: int) -> float:
    return a * coef - m * math.lgamma(a)


def a_gradient(a: float, a_tilde: np.ndarray, d_tilde: np.ndarray, d: float) -> float:
    """dQ/da = sum_i(Psi(a~_i) - log d~_i) + m log d - m Psi(a)."""
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    m = len(a_tilde)
    return float(np.sum(digamma(a_tilde) - np.log(d_tilde))) + m * math.log(d) - m * digamma_scalar(a)


def update_a(a_prev: float, a_tilde: np.ndarray, d_tilde: np.ndarray, d: float,
             max_iter: int = 10_000, tol: float = 1e-10) -> float:
    """Maximize Q(a) = a * sum_i(Psi(a~_i) - log d~_i + log d) - m log Gamma(a).

    Plain gradient ascent, step 1/m, halving until Q does not decrease and a
    stays positive (at most 50 halvings per step).
    """
    a_tilde = np.asarray(a_tilde, dtype=np.float64)
    m = len(a_tilde)
    coef = float(np.sum(digamma(a_tilde) - np.log(d_tilde))) + m * math.log(d)
    a = float(a_prev)
    q = _q_a(a, coef, m)
    for it in range(max_iter):
        grad = coef - m * digamma_scalar(a)
        if abs(grad) <= tol * m:
            break
        step = 1.0 / m
        for _ in range(50):
            cand = a + step * grad
            if cand > 0:
                qc = _q_a(cand, coef, m)
                if qc >= q:
                    break
            step *= 0.5
        else:
            if it == 0:
                log.warning("line search for a failed; keeping a=%g", a_prev)
                return float(a_prev)
            break
        if abs(cand - a) <= 1e-15 * max(1.0, a):
            a, q = cand, qc
            break
        a, q = cand, qc
    return a


# --- R: Newton with Sherman-Morrison solve -------------------------------------


def newton_direction(r: np.ndarray, grad: np.ndarray, m: int) -> np.ndarray:
    """H^{-1} g for H = m (diag(-trigamma(r)) + trigamma(sum r) 11^T), in O(K)."""
    dvec = -trigamma(r)
    c = trigamma(float(np.sum(r)))
    c_tilde = np.sum(grad / dvec) / (1.0 / c + np.sum(1.0 / dvec))
    return (grad - c_tilde) / (m * dvec)


def dirichlet_hessian(r: np.ndarray, m: int) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return m * (np.diag(-trigamma(r)) + trigamma(float(r.sum())) * np.ones((len(r), len(r))))


def r_gradient(r: np.ndarray, elog_sum: np.ndarray, m: int) -> np.ndarray:
    return elog_sum + m * (digamma(float(np.sum(r))) - digamma(r))


def _q_row(r: np.ndarray, elog_sum: np.ndarray, m: int) -> float:
    return float(np.dot(r, elog_sum) + m * (math.lgamma(float(r.sum())) - np.sum(gammaln(r))))


@nb.njit(cache=True)
def _q_row_jit(r, elog_sum, m):
    q = m * math.lgamma(r.sum())
    for s in range(r.shape[0]):
        q += r[s] * elog_sum[s] - m * math.lgamma(r[s])
    return q


@nb.njit(cache=True)
def _newton_row(r, elog_sum, m, max_iter, tol):
    """Compiled Newton-Raphson with step halving; same steps as the Python helpers."""
    K = r.shape[0]
    q = _q_row_jit(r, elog_sum, m)
    grad = np.empty(K)
    dvec = np.empty(K)
    cand = np.empty(K)
    for _ in range(max_iter):
        ps = digamma_scalar(r.sum())
        gmax = 0.0
        for s in range(K):
            grad[s] = elog_sum[s] + m * (ps - digamma_scalar(r[s]))
            gmax = max(gmax, abs(grad[s]))
        if gmax < tol:
            break
        c = trigamma_scalar(r.sum())
        num = 0.0
        den = 1.0 / c
        for s in range(K):
            dvec[s] = -trigamma_scalar(r[s])
            num += grad[s] / dvec[s]
            den += 1.0 / dvec[s]
        c_tilde = num / den
        lam = 1.0
        found = False
        qc = q
        for _h in range(50):
            good = True
            for s in range(K):
                cand[s] = r[s] - lam * (grad[s] - c_tilde) / (m * dvec[s])
                if not (cand[s] > 0.0 and math.isfinite(cand[s])):
                    good = False
            if good:
                qc = _q_row_jit(cand, elog_sum, m)
                if qc >= q:
                    found = True
                    break
            lam *= 0.5
        if not found:
            # no ascent possible at float precision
            break
        rmax = r.max()
        moved = 0.0
        for s in range(K):
            moved = max(moved, abs(cand[s] - r[s]))
            r[s] = cand[s]
        q = qc
        if moved <= 1e-14 * rmax:
            break
    return r


def update_R_row(r_prev: np.ndarray, elog_sum: np.ndarray, m: int, max_iter: int = 100, tol: float = 1e-8) -> np.ndarray:
    """Newton-Raphson for one Dirichlet row: ascent on Q(r), step halving keeps r > 0."""
    r = _newton_row(np.array(r_prev, dtype=np.float64), np.ascontiguousarray(elog_sum, dtype=np.float64),
                    float(m), max_iter, tol)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        log.warning("Newton update for R diverged; keeping previous row")
        return np.array(r_prev, dtype=np.float64)
    return r


def update_R(r_prev: np.ndarray, gamma: np.ndarray | None = None, elog_lambda: np.ndarray | None = None) -> np.ndarray:
    """Row-wise Dirichlet maximum likelihood from the examinees' q(lambda) factors.

    Pass either ``gamma`` (m x K x K) or precomputed ``elog_lambda``.
    """
    elog = expected_log_lambda(gamma) if elog_lambda is None else np.asarray(elog_lambda)
    m = elog.shape[0]
    elog_sum = elog.sum(axis=0)
    r_prev = np.asarray(r_prev, dtype=np.float64)
    return np.stack([update_R_row(r_prev[k], elog_sum[k], m) for k in range(r_prev.shape[0])])


def mstep(params: ModelParams, stats: SuffStats, use_time: bool = True) -> ModelParams:
    """One M-step in the order B, G, p0, d, a, R."""
    B = update_B(stats.counts, params.B)
    p = params.replace(B=B)
    if use_time:
        p = p.replace(G=update_G(stats.trans, stats.kappa_gap, params.G))
    p = p.replace(p0=update_p0(stats.first_all))
    if use_time:
        d = update_d(p.a, stats.kappa)
        p = p.replace(d=d)
        p = p.replace(a=update_a(p.a, stats.a_tilde, stats.d_tilde, d))
    p = p.replace(R=update_R(params.R, elog_lambda=stats.elog_lambda))
    return p
