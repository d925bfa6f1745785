import math

import numpy as np
import pytest

from oracles import log_marginal, log_marginal_quadrature, random_params, random_sequence
from proctopic.estep import init_state, run_estep
from proctopic.fit import (
    FitConfig,
    align_labels,
    canonical_scale,
    elbo,
    fit,
    init_params,
    init_params_cooccurrence,
    load_states,
    save_report,
)
from proctopic.model import Corpus, EventSequence, ModelParams, load_params, validate_params
from proctopic.simulate import max_events, simulate_corpus


def _fixed_point(seq, params, sweeps=300, use_time=True):
    st = init_state(seq, params)
    for _ in range(sweeps):
        st = run_estep(seq, params, st, use_time)
    return st


@pytest.mark.parametrize("seed", range(10))
def test_single_topic_elbo_is_exact(seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng, 1, 4)
    seq = random_sequence(rng, int(rng.integers(1, 12)), 4)
    st = _fixed_point(seq, params, sweeps=3)
    assert elbo([seq], [st], params) == pytest.approx(log_marginal(seq, params), abs=1e-8)


def test_single_topic_closed_form_by_hand():
    params = ModelParams(B=[[0.25, 0.75]], G=[[0.4]], p0=[1.0], R=[[2.0]], a=1.5, d=2.0)
    seq = EventSequence(0, [1, 0, 1], [0.5, 1.5, 4.0])
    st = _fixed_point(seq, params, sweeps=2)
    h = math.exp(0.4)
    rate = h * (1.0 + 2.5)
    # Gamma-Exponential marginal with two gaps
    want = (math.log(0.75 * 0.25 * 0.75) + 2 * 0.4 + 1.5 * math.log(2.0) - math.lgamma(1.5)
            + math.lgamma(3.5) - 3.5 * math.log(2.0 + rate))
    assert elbo([seq], [st], params) == pytest.approx(want, abs=1e-8)


@pytest.mark.parametrize("seed", range(30))
def test_elbo_below_log_marginal(seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng, 2, 3)
    seq = random_sequence(rng, int(rng.integers(1, 7)), 3)
    use_time = seed % 3 != 0
    st = _fixed_point(seq, params, use_time=use_time)
    bound = elbo([seq], [st], params, use_time)
    assert bound <= log_marginal(seq, params, use_time) + 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_marginal_oracles_agree(seed):
    rng = np.random.default_rng(100 + seed)
    params = random_params(rng, 2, 3)
    seq = random_sequence(rng, 5, 3)
    assert log_marginal_quadrature(seq, params) == pytest.approx(log_marginal(seq, params), abs=1e-9)


def test_elbo_invariant_under_relabeling():
    rng = np.random.default_rng(3)
    params = random_params(rng, 3, 4)
    seqs = [random_sequence(rng, 8, 4, i) for i in range(3)]
    states = [_fixed_point(s, params, 20) for s in seqs]
    perm = np.array([1, 2, 0])
    moved = []
    for st in states:
        st2 = type(st)(**{**st.__dict__})
        st2.gamma = st.gamma[np.ix_(perm, perm)]
        st2.trans = st.trans[np.ix_(perm, perm)]
        st2.phi = st.phi[:, perm]
        st2.phi_joint = st.phi_joint[:, perm][:, :, perm]
        moved.append(st2)
    assert elbo(seqs, moved, params.permute(perm)) == pytest.approx(elbo(seqs, states, params), rel=1e-12)


# --- initialization -------------------------------------------------------------------


def _corpus(seed=0, m=30, K=3, V=6, n=20):
    rng = np.random.default_rng(seed)
    params = random_params(rng, K, V)
    seqs, _ = simulate_corpus(params, m, max_events(n), seed=seed)
    return params, Corpus(seqs, V=V)


def test_init_deterministic():
    _, c = _corpus()
    for f in (init_params, init_params_cooccurrence):
        a, b = f(c, 3, seed=7), f(c, 3, seed=7)
        assert np.array_equal(a.B, b.B) and np.array_equal(a.G, b.G)
        validate_params(a)
        np.testing.assert_allclose(a.p0, 1 / 3)


def test_init_G_matches_global_rate():
    rng = np.random.default_rng(0)
    seqs = []
    for i in range(200):
        t = np.cumsum(rng.exponential(0.5, size=20))
        seqs.append(EventSequence(i, rng.integers(0, 3, 20), t))
    p = init_params(Corpus(seqs), 2, seed=1)
    np.testing.assert_allclose(p.G, math.log(2.0), atol=0.1)


# --- driver ---------------------------------------------------------------------------


def test_single_event_single_examinee():
    seqs = [EventSequence(0, [1], [2.0])]
    rep = fit(seqs, FitConfig(K=2, restarts=1, seed=0))
    assert rep.iterations <= 2
    np.testing.assert_allclose(rep.params.p0, rep.batch.phi[0], atol=1e-12)


def test_fit_is_deterministic():
    _, c = _corpus(1)
    cfg = FitConfig(K=3, restarts=3, seed=11, max_iters=40)
    r1, r2 = fit(c.sequences, cfg, V=c.V), fit(c.sequences, cfg, V=c.V)
    assert np.array_equal(r1.params.B, r2.params.B) and np.array_equal(r1.trace, r2.trace)
    assert r1.restart_elbos == r2.restart_elbos


def test_best_restart_has_highest_elbo():
    _, c = _corpus(2)
    rep = fit(c.sequences, FitConfig(K=3, restarts=4, seed=0, max_iters=30), V=c.V)
    assert rep.elbo == max(rep.restart_elbos)
    assert rep.restart_elbos[rep.best_restart] == rep.elbo


@pytest.mark.parametrize("seed", range(10))
def test_elbo_trace_never_decreases(seed):
    _, c = _corpus(seed, m=15, n=15)
    rep = fit(c.sequences, FitConfig(K=3, restarts=1, seed=seed, max_iters=100), V=c.V)
    assert np.all(np.diff(rep.trace[:, 1]) >= -1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_mstep_half_never_decreases_q(seed):
    _, c = _corpus(seed, m=15, n=15)
    rep = fit(c.sequences, FitConfig(K=3, restarts=1, seed=seed, max_iters=100), V=c.V)
    # Q before the M-step vs after it, same variational state
    assert np.all(rep.trace[:, 0] - rep.q_before_mstep >= -1e-8)


def test_canonical_scale_keeps_elbo():
    _, c = _corpus(4)
    rep = fit(c.sequences, FitConfig(K=3, restarts=1, seed=0, max_iters=30), V=c.V)
    assert rep.params.d == pytest.approx(rep.params.a, rel=1e-15)
    # an equivalent point off the canonical scale: frailties x3, intensities /3
    raw = rep.params.replace(G=rep.params.G - math.log(3.0), d=rep.params.d / 3.0)
    e0 = elbo(c, rep.batch, rep.params)
    raw_state = type(rep.batch)(**{**rep.batch.__dict__, "kappa": rep.batch.kappa * 3.0,
                                   "d_tilde": rep.batch.d_tilde / 3.0})
    assert elbo(c, raw_state, raw) == pytest.approx(e0, rel=1e-12)
    p2, st2 = canonical_scale(raw, raw_state)
    np.testing.assert_allclose(p2.G, rep.params.G, atol=1e-12)
    assert elbo(c, st2, p2) == pytest.approx(e0, rel=1e-12)


def test_fit_recovers_simple_truth():
    B = np.array([[0.45, 0.45, 0.05, 0.05], [0.05, 0.05, 0.45, 0.45]])
    truth = ModelParams(B=B, G=np.array([[1.0, -0.5], [0.0, 0.5]]), p0=[0.5, 0.5],
                        R=np.array([[8.0, 2.0], [3.0, 7.0]]), a=2.0, d=2.0)
    seqs, _ = simulate_corpus(truth, 200, max_events(60), seed=5)
    rep = fit(seqs, FitConfig(K=2, restarts=2, seed=1, max_iters=300), V=4)
    q = rep.params.permute(align_labels(rep.params, truth))
    assert np.max(np.abs(q.B - truth.B)) < 0.03
    assert np.max(np.abs(q.norm_R() - truth.norm_R())) < 0.05
    assert np.max(np.abs(q.G - truth.G)) < 0.25


# --- label alignment --------------------------------------------------------------------


def test_align_identity_and_swap():
    rng = np.random.default_rng(0)
    p = random_params(rng, 3, 6)
    np.testing.assert_array_equal(align_labels(p, p), [0, 1, 2])
    q = p.permute([1, 0, 2])
    np.testing.assert_array_equal(align_labels(q, p), [1, 0, 2])
    np.testing.assert_allclose(q.permute(align_labels(q, p)).B, p.B)


def test_align_planted_permutations():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        ref = random_params(rng, 4, 8)
        tv = 0.5 * np.abs(ref.B[:, None] - ref.B[None]).sum(axis=2)
        margin = tv[~np.eye(4, dtype=bool)].min() / 2
        noise = rng.normal(size=ref.B.shape)
        noise -= noise.mean(axis=1, keepdims=True)
        # total variation of the perturbation stays below half the closest pair's distance
        noise *= 0.99 * margin / (0.5 * np.abs(noise).sum(axis=1, keepdims=True))
        Bp = np.clip(ref.B + noise * 0.5, 1e-9, None)
        Bp /= Bp.sum(axis=1, keepdims=True)
        perm = rng.permutation(4)
        fitted = ref.replace(B=Bp).permute(perm)
        hits += np.array_equal(fitted.permute(align_labels(fitted, ref)).B, ref.replace(B=Bp).B)
    assert hits == 100


# --- bundle ---------------------------------------------------------------------------------


def test_save_report_round_trip(tmp_path):
    _, c = _corpus(6, m=5)
    rep = fit(c.sequences, FitConfig(K=2, restarts=1, seed=0, max_iters=10), V=c.V)
    save_report(rep, tmp_path)
    p = load_params(tmp_path / "params.json")
    assert np.array_equal(p.B, rep.params.B) and p.a == rep.params.a
    states = load_states(tmp_path / "states.jsonl")
    assert len(states) == 5 and len(states[0]["phi"]) == len(c.sequences[0])
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "iteration,Q,ELBO" and len(rows) == rep.iterations + 1


def test_config_validation():
    for bad in (dict(K=0), dict(K=2, max_iters=0), dict(K=2, rel_tol=0.0), dict(K=2, restarts=0)):
        with pytest.raises(ValueError):
            FitConfig(**bad)
