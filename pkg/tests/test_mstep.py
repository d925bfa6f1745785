import math

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import gammaln

from oracles import random_params, random_sequence
from proctopic.estep import estep_batch, init_batch
from proctopic.model import EPS, Corpus, EventSequence, ModelParams
from proctopic.mstep import (
    EmptyTopic,
    SuffStats,
    a_gradient,
    dirichlet_hessian,
    g_gradient,
    mstep,
    newton_direction,
    qfunction,
    r_gradient,
    update_a,
    update_B,
    update_d,
    update_G,
    update_p0,
    update_R,
    update_R_row,
)
from proctopic.special import digamma, trigamma


def _stats(seed, K=None, V=5, m=None, sweeps=2):
    rng = np.random.default_rng(seed)
    K = K or int(rng.integers(2, 5))
    m = m or int(rng.integers(2, 12))
    params = random_params(rng, K, V)
    seqs = [random_sequence(rng, int(rng.integers(1, 25)), V, examinee_id=i) for i in range(m)]
    corpus = Corpus(seqs, V=V)
    state = init_batch(corpus, params)
    for _ in range(sweeps):
        state = estep_batch(corpus, params, state)
    return params, SuffStats.collect(corpus, state), corpus, state


# --- Q ----------------------------------------------------------------------------


def _one_event(a, d):
    params = ModelParams(B=[[1.0]], G=[[0.0]], p0=[1.0], R=[[1.0]], a=a, d=d)
    corpus = Corpus([EventSequence(0, [0], [1.0])])
    state = estep_batch(corpus, params, init_batch(corpus, params))
    return params, SuffStats.collect(corpus, state)


def test_q_single_event_hand_value():
    params, stats = _one_event(1.0, 1.0)
    assert qfunction(params, stats) == pytest.approx(-1.0, abs=1e-12)
    params, stats = _one_event(2.0, 3.0)
    # (N + a - 2)(Psi(a~) - log d~) + a log d - log Gamma(a) - d a~/d~ with a~ = 2, d~ = 3
    want = digamma(2.0) - math.log(3) + 2 * math.log(3) - 0.0 - 2.0
    assert qfunction(params, stats) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_q_invariant_under_relabeling(seed):
    params, stats, corpus, state = _stats(seed)
    K = params.K
    perm = np.random.default_rng(seed).permutation(K)
    state.phi = state.phi[:, perm]
    state.joint = state.joint[:, perm][:, :, perm]
    state.T = state.T[:, perm][:, :, perm]
    state.W = state.W[:, perm][:, :, perm]
    state.gamma = state.gamma[:, perm][:, :, perm]
    permuted = SuffStats.collect(corpus, state)
    assert qfunction(params.permute(perm), permuted) == pytest.approx(qfunction(params, stats), rel=1e-12)


def _blocks(params, stats):
    """Apply the M-step blocks one at a time; yields Q after each."""
    p = params
    yield qfunction(p, stats)
    p = p.replace(B=update_B(stats.counts, p.B))
    yield qfunction(p, stats)
    p = p.replace(G=update_G(stats.trans, stats.kappa_gap, p.G))
    yield qfunction(p, stats)
    p = p.replace(p0=update_p0(stats.first_all))
    yield qfunction(p, stats)
    p = p.replace(d=update_d(p.a, stats.kappa))
    yield qfunction(p, stats)
    p = p.replace(a=update_a(p.a, stats.a_tilde, stats.d_tilde, p.d))
    yield qfunction(p, stats)
    p = p.replace(R=update_R(p.R, elog_lambda=stats.elog_lambda))
    yield qfunction(p, stats)


@pytest.mark.parametrize("seed", range(100))
def test_every_block_update_increases_q(seed):
    params, stats, _, _ = _stats(seed)
    qs = np.array(list(_blocks(params, stats)))
    assert np.all(np.diff(qs) >= -1e-8 * np.maximum(1.0, np.abs(qs[1:]))), np.diff(qs)
    assert qfunction(mstep(params, stats), stats) == pytest.approx(qs[-1], rel=1e-12)


# --- closed forms -------------------------------------------------------------------


def test_update_B_point_mass():
    counts = np.array([[0.0, 5.0, 0.0], [1.0, 1.0, 1.0]])
    B = update_B(counts)
    np.testing.assert_allclose(B[0], [EPS, 1 - 2 * EPS, EPS], atol=1e-15)
    np.testing.assert_allclose(B.sum(1), 1.0, atol=1e-15)


def test_update_B_uniform_phi_gives_frequencies():
    events = np.array([0, 1, 1, 2, 1, 0])
    phi = np.full((6, 3), 1 / 3)
    from proctopic.mstep import emission_counts

    B = update_B(emission_counts(phi, events, 3))
    np.testing.assert_allclose(B, np.tile([2 / 6, 3 / 6, 1 / 6], (3, 1)), atol=1e-15)


def test_update_B_empty_topic():
    counts = np.array([[1.0, 2.0], [0.0, 0.0]])
    with pytest.raises(EmptyTopic):
        update_B(counts)
    prev = np.array([[0.5, 0.5], [0.2, 0.8]])
    np.testing.assert_array_equal(update_B(counts, prev)[1], prev[1])


def test_update_G_single_transition():
    G = update_G(np.array([[1.0]]), np.array([[2.0]]), np.zeros((1, 1)))
    assert G[0, 0] == pytest.approx(math.log(0.5), abs=1e-15)


def test_update_G_time_rescaling_shifts_by_log_c():
    params, stats, _, _ = _stats(4)
    c = 3.7
    G1 = update_G(stats.trans, stats.kappa_gap, params.G)
    G2 = update_G(stats.trans, c * stats.kappa_gap, params.G)
    np.testing.assert_allclose(G2, G1 - math.log(c), atol=1e-12)


def test_update_G_keeps_cells_without_mass():
    prev = np.array([[0.3, -0.2], [1.0, 0.0]])
    G = update_G(np.array([[2.0, 0.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]), prev)
    assert G[0, 1] == -0.2 and G[0, 0] == pytest.approx(math.log(2))


def test_update_p0():
    np.testing.assert_allclose(update_p0(np.array([[1.0, 0.0], [0.0, 1.0]])), [0.5, 0.5])
    row = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(update_p0(np.tile(row, (4, 1))), row, atol=1e-15)


def test_update_d():
    assert update_d(2.0, np.array([2.0, 1.0, 3.0])) == pytest.approx(1.0)
    assert update_d(1.0, np.array([2.0])) == 0.5


# --- a ------------------------------------------------------------------------------


def test_update_a_stationary():
    a = 1.7
    # Psi(a~) - log d~ + log d = Psi(a) makes the gradient vanish
    a_tilde = np.array([3.0])
    d_tilde = np.array([math.exp(digamma(3.0) - digamma(a))])
    assert abs(a_gradient(a, a_tilde, d_tilde, 1.0)) < 1e-12
    assert update_a(a, a_tilde, d_tilde, 1.0) == a


@pytest.mark.parametrize("a_t,d_t,d,a0", [(5.0, 2.0, 1.5, 1.0), (2.0, 7.0, 0.5, 3.0), (40.0, 35.0, 1.0, 0.3)])
def test_update_a_matches_bisection(a_t, d_t, d, a0):
    target = digamma(a_t) - math.log(d_t) + math.log(d)
    root = brentq(lambda x: digamma(x) - target, 1e-8, 1e6, xtol=1e-14)
    a = update_a(a0, np.array([a_t]), np.array([d_t]), d)
    assert a == pytest.approx(root, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_update_a_never_decreases_q(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 50))
    a_t = rng.uniform(1, 60, m)
    d_t = rng.uniform(0.5, 40, m)
    d = float(rng.uniform(0.2, 3))
    a0 = float(rng.uniform(0.05, 10))

    def q(a):
        return a * (np.sum(digamma(a_t) - np.log(d_t)) + m * math.log(d)) - m * math.lgamma(a)

    assert q(update_a(a0, a_t, d_t, d)) >= q(a0) - 1e-10


# --- R ------------------------------------------------------------------------------


def test_update_R_stationary_when_gamma_equals_r():
    r = np.array([[2.0, 0.7, 1.3], [0.4, 5.0, 2.2], [1.0, 1.0, 1.0]])
    gamma = np.broadcast_to(r, (30, 3, 3))
    np.testing.assert_allclose(update_R(r, gamma), r, rtol=1e-12)


def _dense_newton_2x2(r, elog_sum, m, iters=200):
    r = r.copy()
    for _ in range(iters):
        g = elog_sum + m * (digamma(r.sum()) - digamma(r))
        H = dirichlet_hessian(r, m)
        det = H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0]
        inv = np.array([[H[1, 1], -H[0, 1]], [-H[1, 0], H[0, 0]]]) / det
        step = inv @ g
        lam = 1.0
        while np.any(r - lam * step <= 0):
            lam /= 2
        r = r - lam * step
    return r


@pytest.mark.parametrize("seed", range(5))
def test_update_R_matches_dense_newton(seed):
    rng = np.random.default_rng(seed)
    m = 50
    gamma = rng.gamma(3.0, size=(m, 2, 2)) + 0.5
    from proctopic.estep import expected_log_lambda

    elog_sum = expected_log_lambda(gamma).sum(axis=0)
    for k in range(2):
        want = _dense_newton_2x2(np.ones(2), elog_sum[k], m)
        got = update_R_row(np.ones(2), elog_sum[k], m)
        np.testing.assert_allclose(got, want, atol=1e-8, rtol=1e-8)


@pytest.mark.parametrize("K", [2, 3, 5, 8])
def test_sherman_morrison_equals_dense_solve(K):
    rng = np.random.default_rng(K)
    for _ in range(20):
        r = rng.uniform(0.05, 20, K)
        g = rng.normal(size=K) * 10
        m = int(rng.integers(1, 500))
        want = np.linalg.solve(dirichlet_hessian(r, m), g)
        got = newton_direction(r, g, m)
        assert np.max(np.abs(got - want)) <= 1e-10 * max(1.0, np.max(np.abs(want)))


# --- gradient checks ------------------------------------------------------------------


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


@pytest.mark.parametrize("seed", range(5))
def test_g_gradient_finite_differences(seed):
    params, stats, _, _ = _stats(seed)
    G = params.G
    h = 1e-5
    fd = np.zeros_like(G)
    for idx in np.ndindex(G.shape):
        Gp, Gm = G.copy(), G.copy()
        Gp[idx] += h
        Gm[idx] -= h
        fd[idx] = (qfunction(params.replace(G=Gp), stats) - qfunction(params.replace(G=Gm), stats)) / (2 * h)
    assert _rel(g_gradient(G, stats), fd) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_a_gradient_finite_differences(seed):
    params, stats, _, _ = _stats(seed)
    h = 1e-6 * params.a
    fd = (qfunction(params.replace(a=params.a + h), stats) - qfunction(params.replace(a=params.a - h), stats)) / (2 * h)
    an = a_gradient(params.a, stats.a_tilde, stats.d_tilde, params.d)
    assert abs(an - fd) <= 1e-6 * max(abs(fd), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_r_gradient_finite_differences(seed):
    params, stats, _, _ = _stats(seed)
    elog_sum = stats.elog_lambda.sum(axis=0)
    h = 1e-6
    for k in range(params.K):
        fd = np.zeros(params.K)
        for s in range(params.K):
            Rp, Rm = params.R.copy(), params.R.copy()
            Rp[k, s] += h
            Rm[k, s] -= h
            fd[s] = (qfunction(params.replace(R=Rp), stats) - qfunction(params.replace(R=Rm), stats)) / (2 * h)
        an = r_gradient(params.R[k], elog_sum[k], stats.m)
        assert _rel(an, fd) <= 1e-6


def test_hessian_matches_gradient_differences():
    r = np.array([0.8, 2.5, 4.0])
    elog = np.array([-3.0, -1.0, -0.5])
    h = 1e-6
    H = np.zeros((3, 3))
    for s in range(3):
        e = np.zeros(3)
        e[s] = h
        H[:, s] = (r_gradient(r + e, elog, 7) - r_gradient(r - e, elog, 7)) / (2 * h)
    assert _rel(dirichlet_hessian(r, 7), H) <= 1e-6
    assert dirichlet_hessian(r, 7)[0, 0] == pytest.approx(7 * (trigamma(r.sum()) - trigamma(0.8)))


def test_dirichlet_lognorm_in_q_uses_gammaln():
    # Q's R-part for one row equals the Dirichlet log-normalizer plus the linear term
    params, stats, _, _ = _stats(2, K=2)
    R2 = params.R * 1.5
    diff = qfunction(params.replace(R=R2), stats) - qfunction(params, stats)
    elog = stats.elog_lambda.sum(axis=0)
    want = np.sum((R2 - params.R) * elog) + stats.m * np.sum(
        gammaln(R2.sum(1)) - gammaln(R2).sum(1) - gammaln(params.R.sum(1)) + gammaln(params.R).sum(1))
    assert diff == pytest.approx(want, rel=1e-10)
