"""Scaled forward-backward recursions for one examinee's topic chain.

The chain is the variational q(z): an inhomogeneous Markov chain whose step
potential for the transition into event n is

    w[k', k] * exp(g[k', k] - kappa * exp(g[k', k]) * dt_n) * b[k, e_n]

with ``w`` a positive K x K weight matrix (the variational transition
matrix, or its unnormalized exp E[log lambda] form). The gap dt_n belongs to
the transition z_{n-1} -> z_n. With ``use_time=False`` the time factor is
dropped entirely.

The batch kernel runs linear-space scaled recursions and falls back to log-space recursions with a
log-sum-exp per cell when a message leaves double range. The per-examinee
message API always works in log space.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba as nb
import numpy as np

from .model import EPS, EventSequence, ModelParams, ProcTopicError

# prefer OpenMP: probing an outdated TBB first only produces a warning
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


class Underflow(ProcTopicError):
    """A forward/backward row summed to zero: the observation is impossible under the chain."""


@dataclass
class ChainMessages:
    """Forward/backward messages kept in log space.

    ``exp(log_fwd[n])`` is the normalized forward row (sums to 1);
    ``log_scale[n]`` is the log of step n's normalizer, so their sum is the
    log normalizer of the chain; ``exp(log_bwd)`` are the scaled backward
    messages with the last row equal to one.
    """

    log_fwd: np.ndarray
    log_scale: np.ndarray
    log_bwd: np.ndarray | None = None

    @property
    def fwd(self) -> np.ndarray:
        return np.exp(self.log_fwd)

    @property
    def bwd(self) -> np.ndarray | None:
        return None if self.log_bwd is None else np.exp(self.log_bwd)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def loglik_q(self) -> float:
        return float(np.sum(self.log_scale))


# --- numba kernels -----------------------------------------------------------


@nb.njit(cache=True)
def _log_potentials(events, gaps, log_B, log_w, G, H, kappa, use_time, lpot):
    """lpot[n-1, k', k] = log step potential into event n, emission included."""
    N = events.shape[0]
    K = log_B.shape[0]
    for n in range(1, N):
        for kp in range(K):
            for k in range(K):
                lp = log_w[kp, k] + log_B[k, events[n]]
                if use_time:
                    lp += G[kp, k] - kappa * H[kp, k] * gaps[n]
                lpot[n - 1, kp, k] = lp


@nb.njit(cache=True)
def _forward(events, log_p0, log_B, lpot, la, log_scale):
    """Log-normalized forward rows (logsumexp of each row is 0). Returns False on underflow."""
    N = la.shape[0]
    K = la.shape[1]
    mx = -np.inf
    for k in range(K):
        la[0, k] = log_p0[k] + log_B[k, events[0]]
        if la[0, k] > mx:
            mx = la[0, k]
    if not math.isfinite(mx):
        return False
    tot = 0.0
    for k in range(K):
        tot += math.exp(la[0, k] - mx)
    c = mx + math.log(tot)
    log_scale[0] = c
    for k in range(K):
        la[0, k] -= c
    for n in range(1, N):
        rmx = -np.inf
        for k in range(K):
            kmx = -np.inf
            for kp in range(K):
                v = la[n - 1, kp] + lpot[n - 1, kp, k]
                if v > kmx:
                    kmx = v
            if kmx == -np.inf:
                la[n, k] = -np.inf
                continue
            s = 0.0
            for kp in range(K):
                s += math.exp(la[n - 1, kp] + lpot[n - 1, kp, k] - kmx)
            la[n, k] = kmx + math.log(s)
            if la[n, k] > rmx:
                rmx = la[n, k]
        if not math.isfinite(rmx):
            return False
        tot = 0.0
        for k in range(K):
            tot += math.exp(la[n, k] - rmx)
        c = rmx + math.log(tot)
        log_scale[n] = c
        for k in range(K):
            la[n, k] -= c
    return True


@nb.njit(cache=True)
def _backward(lpot, log_scale, lb):
    """Log of the scaled backward messages; the last row is 0 (all-ones)."""
    N = lb.shape[0]
    K = lb.shape[1]
    for k in range(K):
        lb[N - 1, k] = 0.0
    for n in range(N - 2, -1, -1):
        rmx = -np.inf
        for kp in range(K):
            kmx = -np.inf
            for k in range(K):
                v = lpot[n, kp, k] + lb[n + 1, k]
                if v > kmx:
                    kmx = v
            if kmx == -np.inf:
                lb[n, kp] = -np.inf
                continue
            s = 0.0
            for k in range(K):
                s += math.exp(lpot[n, kp, k] + lb[n + 1, k] - kmx)
            lb[n, kp] = kmx + math.log(s) - log_scale[n + 1]
            if lb[n, kp] > rmx:
                rmx = lb[n, kp]
        if not math.isfinite(rmx):
            return False
    return True


@nb.njit(cache=True)
def _posteriors(la, lb, lpot, log_scale, phi, joint):
    """phi[n] ∝ f b; joint[n-1] (transition into n) ∝ f[n-1] pot b[n]. ``joint`` may alias ``lpot``."""
    N = la.shape[0]
    K = la.shape[1]
    for n in range(N):
        mx = -np.inf
        for k in range(K):
            v = la[n, k] + lb[n, k]
            if v > mx:
                mx = v
        tot = 0.0
        for k in range(K):
            phi[n, k] = math.exp(la[n, k] + lb[n, k] - mx)
            tot += phi[n, k]
        for k in range(K):
            phi[n, k] /= tot
    for n in range(1, N):
        mx = -np.inf
        for kp in range(K):
            for k in range(K):
                v = la[n - 1, kp] + lpot[n - 1, kp, k] + lb[n, k]
                joint[n - 1, kp, k] = v
                if v > mx:
                    mx = v
        tot = 0.0
        for kp in range(K):
            for k in range(K):
                v = math.exp(joint[n - 1, kp, k] - mx)
                joint[n - 1, kp, k] = v
                tot += v
        for kp in range(K):
            for k in range(K):
                joint[n - 1, kp, k] /= tot


@nb.njit(cache=True)
def _scaled_chain(events, gaps, p0, B, log_w, G, H, kappa, use_time, pot, phi, log_scale):
    """Fast path: linear-space scaled recursions.

    Step potentials are built directly in linear space (one exp per cell
    with time, none without), written into ``pot`` and then overwritten
    with the normalized joint posteriors. Returns False when a message row
    or normalizer leaves double range; ``pot`` must then be rebuilt.
    """
    N = phi.shape[0]
    K = phi.shape[1]
    f = np.empty((N, K))
    b = np.empty((N, K))
    cs = np.empty(N)
    base = np.empty((K, K))
    rate = np.empty((K, K))
    for kp in range(K):
        for k in range(K):
            lw = log_w[kp, k]
            if use_time:
                lw += G[kp, k]
                rate[kp, k] = kappa * H[kp, k]
            base[kp, k] = math.exp(lw)
    tot = 0.0
    for k in range(K):
        f[0, k] = p0[k] * B[k, events[0]]
        tot += f[0, k]
    if not (tot > 0.0 and math.isfinite(tot)):
        return False
    for k in range(K):
        f[0, k] /= tot
    cs[0] = tot
    log_scale[0] = math.log(tot)
    for n in range(1, N):
        e = events[n]
        dt = gaps[n]
        tot = 0.0
        for k in range(K):
            bk = B[k, e]
            acc = 0.0
            for kp in range(K):
                v = base[kp, k] * bk
                if use_time:
                    v *= math.exp(-rate[kp, k] * dt)
                pot[n - 1, kp, k] = v
                acc += f[n - 1, kp] * v
            f[n, k] = acc
            tot += acc
        if not (tot > 0.0 and math.isfinite(tot)):
            return False
        for k in range(K):
            f[n, k] /= tot
        cs[n] = tot
        log_scale[n] = math.log(tot)
    for k in range(K):
        b[N - 1, k] = 1.0
    for n in range(N - 2, -1, -1):
        c = cs[n + 1]
        tot = 0.0
        for kp in range(K):
            acc = 0.0
            for k in range(K):
                acc += pot[n, kp, k] * b[n + 1, k]
            b[n, kp] = acc / c
            tot += b[n, kp]
        if not (tot > 0.0 and math.isfinite(tot)):
            return False
    for n in range(N):
        tot = 0.0
        for k in range(K):
            phi[n, k] = f[n, k] * b[n, k]
            tot += phi[n, k]
        if not (tot > 0.0 and math.isfinite(tot)):
            return False
        for k in range(K):
            phi[n, k] /= tot
    for n in range(1, N):
        tot = 0.0
        for kp in range(K):
            fk = f[n - 1, kp]
            for k in range(K):
                v = fk * pot[n - 1, kp, k] * b[n, k]
                pot[n - 1, kp, k] = v
                tot += v
        if not (tot > 0.0 and math.isfinite(tot)):
            return False
        for kp in range(K):
            for k in range(K):
                pot[n - 1, kp, k] /= tot
    return True


@nb.njit(cache=True)
def _run_chain(events, gaps, p0, B, log_p0, log_B, log_w, G, H, kappa, use_time, phi, joint, stats_T, stats_W):
    """Full chain for one sequence.

    Writes phi (N x K), joint (N-1 x K x K), per-sequence transition totals
    stats_T and gap-weighted totals stats_W. Returns (ok, loglik_q, entropy).
    The scaled recursions run first; if they leave double range the chain
    is redone in log space.
    """
    N = events.shape[0]
    K = log_B.shape[0]
    log_scale = np.empty(N)
    if not _scaled_chain(events, gaps, p0, B, log_w, G, H, kappa, use_time, joint, phi, log_scale):
        _log_potentials(events, gaps, log_B, log_w, G, H, kappa, use_time, joint)
        la = np.empty((N, K))
        lb = np.empty((N, K))
        if not _forward(events, log_p0, log_B, joint, la, log_scale):
            return False, 0.0, 0.0
        if not _backward(joint, log_scale, lb):
            return False, 0.0, 0.0
        _posteriors(la, lb, joint, log_scale, phi, joint)
    loglik = 0.0
    for n in range(N):
        loglik += log_scale[n]
    # E_q[log unnormalized chain weight]
    e_log = 0.0
    for k in range(K):
        if phi[0, k] > 0.0:
            e_log += phi[0, k] * log_p0[k]
    for n in range(N):
        for k in range(K):
            if phi[n, k] > 0.0:
                e_log += phi[n, k] * log_B[k, events[n]]
    for kp in range(K):
        for k in range(K):
            stats_T[kp, k] = 0.0
            stats_W[kp, k] = 0.0
    for n in range(1, N):
        for kp in range(K):
            for k in range(K):
                p = joint[n - 1, kp, k]
                stats_T[kp, k] += p
                stats_W[kp, k] += p * gaps[n]
    for kp in range(K):
        for k in range(K):
            if stats_T[kp, k] > 0.0:
                e_log += stats_T[kp, k] * log_w[kp, k]
                if use_time:
                    e_log += stats_T[kp, k] * G[kp, k] - kappa * H[kp, k] * stats_W[kp, k]
    return True, loglik, loglik - e_log


@nb.njit(cache=True, parallel=True)
def _chain_batch(events, gaps, offsets, p0, B, log_p0, log_B, log_w_all, G, H, kappa_all, use_time,
                 phi, joint, stats_T, stats_W, loglik, entropy, ok):
    m = offsets.shape[0] - 1
    for i in nb.prange(m):
        s = offsets[i]
        e = offsets[i + 1]
        res = _run_chain(events[s:e], gaps[s:e], p0, B, log_p0, log_B, log_w_all[i], G, H, kappa_all[i],
                         use_time, phi[s:e], joint[s + 1:e], stats_T[i], stats_W[i])
        ok[i] = res[0]
        loglik[i] = res[1]
        entropy[i] = res[2]


# --- per-examinee API --------------------------------------------------------


def floored(params: ModelParams):
    """(p0, B) with the same EPS floor as the log-space parameters."""
    return np.maximum(params.p0, EPS), np.maximum(params.B, EPS)


def _prepare(seq: EventSequence, params: ModelParams, trans, kappa, use_time):
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(trans, dtype=np.float64))
    lpot = np.empty((max(len(seq) - 1, 0), params.K, params.K))
    _log_potentials(seq.events, seq.gaps, params.log_B, log_w, params.G, params.H, float(kappa), bool(use_time), lpot)
    return lpot


def forward_pass(seq: EventSequence, params: ModelParams, trans, kappa: float, use_time: bool = True) -> ChainMessages:
    """Normalized forward messages; the backward part is left unset."""
    lpot = _prepare(seq, params, trans, kappa, use_time)
    la = np.empty((len(seq), params.K))
    log_scale = np.empty(len(seq))
    if not _forward(seq.events, params.log_p0, params.log_B, lpot, la, log_scale):
        raise Underflow(f"forward pass underflow for examinee {seq.examinee_id}")
    return ChainMessages(log_fwd=la, log_scale=log_scale)


def backward_pass(seq: EventSequence, params: ModelParams, trans, kappa: float, msgs: ChainMessages,
                  use_time: bool = True) -> ChainMessages:
    """Scaled backward messages, using the normalizers of ``msgs``."""
    lpot = _prepare(seq, params, trans, kappa, use_time)
    lb = np.empty_like(msgs.log_fwd)
    if not _backward(lpot, msgs.log_scale, lb):
        raise Underflow(f"backward pass underflow for examinee {seq.examinee_id}")
    return ChainMessages(log_fwd=msgs.log_fwd, log_scale=msgs.log_scale, log_bwd=lb)


def posteriors(seq: EventSequence, params: ModelParams, msgs: ChainMessages, trans, kappa: float,
               use_time: bool = True):
    """Return (phi, phi_joint): marginal and pairwise topic posteriors."""
    if msgs.log_bwd is None:
        raise ValueError("posteriors need backward messages")
    lpot = _prepare(seq, params, trans, kappa, use_time)
    phi = np.empty_like(msgs.log_fwd)
    _posteriors(msgs.log_fwd, msgs.log_bwd, lpot, msgs.log_scale, phi, lpot)
    return phi, lpot


def run_chain(seq: EventSequence, params: ModelParams, trans, kappa: float, use_time: bool = True):
    """Forward, backward and posteriors in one call.

    Returns ``(phi, phi_joint, loglik_q, entropy)`` where ``entropy`` is the
    entropy of the chain distribution q(z).
    """
    K, N = params.K, len(seq)
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(trans, dtype=np.float64))
    phi = np.empty((N, K))
    joint = np.empty((max(N - 1, 0), K, K))
    T = np.empty((K, K))
    W = np.empty((K, K))
    ok, loglik, ent = _run_chain(seq.events, seq.gaps, *floored(params), params.log_p0, params.log_B, log_w, params.G,
                                 params.H, float(kappa), bool(use_time), phi, joint, T, W)
    if not ok:
        raise Underflow(f"chain underflow for examinee {seq.examinee_id}")
    return phi, joint, loglik, ent
