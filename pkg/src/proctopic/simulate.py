"""Draw synthetic examinee processes from the generative model."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .model import EventSequence, LatentPath, ModelParams, ProcTopicError, validate_params

RUNAWAY_LIMIT = 1_000_000


class RunawaySequence(ProcTopicError):
    pass


class InvalidBlock(ProcTopicError):
    pass


@dataclass(frozen=True)
class StopRule:
    """When to end a simulated sequence.

    Any combination may be set; the first condition met ends the sequence.
    ``terminal_event`` is a 0-based event id and the terminal event itself
    is kept as the last event. ``max_time`` drops the event that would cross it.
    """

    terminal_event: int | None = None
    max_events: int | None = None
    max_time: float | None = None

    def __post_init__(self):
        if self.terminal_event is None and self.max_events is None and self.max_time is None:
            raise ValueError("StopRule needs at least one condition")
        if self.max_events is not None and self.max_events < 1:
            raise ValueError("max_events must be >= 1")


def terminal_event(v: int) -> StopRule:
    return StopRule(terminal_event=v)


def max_events(n: int) -> StopRule:
    return StopRule(max_events=n)


def max_time(tau: float) -> StopRule:
    return StopRule(max_time=tau)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _cum_rows(P: np.ndarray) -> list[list[float]]:
    c = np.cumsum(P, axis=1)
    c /= c[:, -1:]
    return [row.tolist() for row in c]


def _draw(cum: list[float], u: float) -> int:
    return min(bisect.bisect_right(cum, u), len(cum) - 1)


def sample_examinee(params: ModelParams, stop: StopRule, seed=None, examinee_id=0):
    """Simulate one examinee; returns (EventSequence, LatentPath).

    The model leaves the first timestamp unspecified; it is drawn here as a
    gap with rate xi * exp(g[z1, z1]) from time 0.
    """
    rng = _rng(seed)
    K = params.K
    xi = float(rng.gamma(params.a, 1.0 / params.d))
    lam = np.stack([rng.dirichlet(params.R[k]) for k in range(K)])
    cum_lam = _cum_rows(lam)
    cum_B = _cum_rows(params.B)
    cum_p0 = np.cumsum(params.p0 / params.p0.sum()).tolist()
    H = params.H
    limit = stop.max_events if stop.max_events is not None else RUNAWAY_LIMIT

    z = _draw(cum_p0, rng.random())
    t = float(rng.exponential(1.0 / (xi * H[z, z])))
    topics, events, times = [z], [_draw(cum_B[z], rng.random())], [t]
    block = 4096
    while True:
        if stop.terminal_event is not None and events[-1] == stop.terminal_event:
            break
        if len(events) >= limit:
            if stop.max_events is None:
                raise RunawaySequence(f"examinee {examinee_id} exceeded {RUNAWAY_LIMIT} events")
            break
        if (len(events) - 1) % block == 0:
            u = rng.random((block, 2))
            x = rng.standard_exponential(block)
            j = 0
        znew = _draw(cum_lam[z], u[j, 0])
        t_next = t + x[j] / (xi * H[z, znew])
        if stop.max_time is not None and t_next > stop.max_time:
            break
        z, t = znew, t_next
        topics.append(z)
        events.append(_draw(cum_B[z], u[j, 1]))
        times.append(t)
        j += 1
    seq = EventSequence(examinee_id, np.array(events), np.array(times),
                        tau=stop.max_time if stop.max_time is not None else None)
    return seq, LatentPath(topics=np.array(topics), lam=lam, xi=xi)


def simulate_corpus(params: ModelParams, m: int, stop, seed=0, id_prefix: str = ""):
    """Simulate ``m`` independent examinees; ``stop`` may be a list with one rule per examinee.

    Each examinee draws from its own child of ``SeedSequence(seed)``;
    ``seed`` may also be a SeedSequence.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    validate_params(params)
    rules = list(stop) if isinstance(stop, (list, tuple)) else [stop] * m
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(m)
    seqs, paths = [], []
    for i in range(m):
        s, p = sample_examinee(params, rules[i], np.random.default_rng(children[i]), f"{id_prefix}{i + 1}")
        seqs.append(s)
        paths.append(p)
    return seqs, paths


# --- study designs ---------------------------------------------------------------


def _load(name: str) -> dict:
    return json.loads(resources.files("proctopic.data").joinpath(name).read_text(encoding="utf-8"))


def study1_spec() -> dict:
    return _load("study1.json")


STUDY1_LABELS = ("A", "B", "C", "D", "E", "T")


def study1_generator(m: int, seed=0) -> list[EventSequence]:
    """Concatenate i.i.d. event patterns until the terminal pattern T; unit gaps."""
    if m < 1:
        raise ValueError("m must be >= 1")
    spec = study1_spec()
    idx = {lab: i for i, lab in enumerate(spec["labels"])}
    patterns = [[idx[x] for x in p] for p in spec["patterns"]]
    w = np.asarray(spec["weights"], dtype=np.float64)
    w /= w.sum()
    term = idx[spec["terminal"]]
    seqs = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(m)):
        rng = np.random.default_rng(child)
        events: list[int] = []
        while not events or events[-1] != term:
            events.extend(patterns[int(rng.choice(len(patterns), p=w))])
        seqs.append(EventSequence(f"{i + 1}", np.array(events), np.arange(1, len(events) + 1, dtype=np.float64)))
    return seqs


def study2_params() -> ModelParams:
    return ModelParams.from_dict(_load("study2.json"))


def study2_stop() -> StopRule:
    return terminal_event(_load("study2.json")["terminal_event"] - 1)


def study3_params(K: int = 8, V: int = 1000) -> ModelParams:
    """Block emission design with K topics over V events.

    Row k puts (0.3, 0.1, 0.05, 0.02, 0.02, 0.003, 0.001) on events
    9k .. 9k+6 (0-based), 0.01 on the last event and 5e-4 everywhere else.
    G and R follow a cyclic version of the four-topic design: g = 2 on the
    diagonal, 1 for neighbouring topics, -1 otherwise; r = 40/20/5 for the
    same, next and next-but-one topic and 1 otherwise.
    """
    block = np.array([0.3, 0.1, 0.05, 0.02, 0.02, 0.003, 0.001])
    background, last = 5e-4, 0.01
    if 9 * (K - 1) + len(block) > V - 1:
        raise InvalidBlock(f"K={K} blocks do not fit in V={V}")
    B = np.full((K, V), background)
    B[:, -1] = last
    for k in range(K):
        B[k, 9 * k:9 * k + len(block)] = block
    sums = B.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-10):
        raise InvalidBlock(f"rows sum to {sums.min():.12g}..{sums.max():.12g}, not 1")
    B /= sums[:, None]
    G = np.full((K, K), -1.0)
    R = np.ones((K, K))
    for k in range(K):
        G[k, k] = 2.0
        G[k, (k + 1) % K] = 1.0
        G[k, (k - 1) % K] = 1.0
        R[k, k] = 40.0
        R[k, (k + 1) % K] = 20.0
        R[k, (k + 2) % K] = 5.0
    return ModelParams(B=B, G=G, p0=np.full(K, 1.0 / K), R=R, a=1.0, d=1.0)


def preset(name: str):
    """(params, stop rule) for a named study design; study1 has no params (returns None)."""
    if name == "study1":
        return None, None
    if name == "study2":
        return study2_params(), study2_stop()
    if name == "study3":
        return study3_params(), max_events(100)
    raise ValueError(f"unknown preset {name!r}")
