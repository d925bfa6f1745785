"""Domain types, parameter validation and log-density primitives.

Topics and event ids are 0-based inside Python (``0..K-1`` and ``0..V-1``).
File formats written by :mod:`proctopic.ingest` use 1-based event ids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

import numpy as np

EPS = 1e-12
_STOCH_TOL = 1e-10


class ProcTopicError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(ProcTopicError):
    def __init__(self, name: str, expected, got):
        super().__init__(f"{name}: expected shape {expected}, got {got}")
        self.field = name


class NotStochastic(ProcTopicError):
    def __init__(self, name: str, row: int | None = None):
        where = "" if row is None else f" (row {row})"
        super().__init__(f"{name} is not stochastic{where}")
        self.field = name
        self.row = row


class NonPositiveHyperparam(ProcTopicError):
    def __init__(self, name: str):
        super().__init__(f"{name} must be strictly positive")
        self.field = name


class IndexOutOfRange(ProcTopicError):
    pass


class NonPositiveGap(ProcTopicError):
    pass


class InvalidSequence(ProcTopicError):
    pass


@dataclass(frozen=True)
class EventSequence:
    """One examinee's cleaned event stream.

    ``events`` are 0-based event ids, ``times`` strictly increasing
    timestamps in seconds; ``tau`` defaults to the last timestamp.
    """

    examinee_id: Hashable
    events: np.ndarray
    times: np.ndarray
    tau: float | None = None

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64)
        tm = np.asarray(self.times, dtype=np.float64)
        if ev.ndim != 1 or tm.ndim != 1 or len(ev) != len(tm):
            raise InvalidSequence(f"{self.examinee_id}: events and times must be equal-length vectors")
        if len(ev) == 0:
            raise InvalidSequence(f"{self.examinee_id}: empty sequence")
        if np.any(ev < 0):
            raise InvalidSequence(f"{self.examinee_id}: negative event id")
        if tm[0] < 0 or np.any(np.diff(tm) <= 0):
            raise InvalidSequence(f"{self.examinee_id}: times must be non-negative and strictly increasing")
        ev.setflags(write=False)
        tm.setflags(write=False)
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "times", tm)
        if self.tau is None:
            object.__setattr__(self, "tau", float(tm[-1]))

    def __len__(self):
        return len(self.events)

    @property
    def gaps(self) -> np.ndarray:
        """Inter-event gaps; entry n is t_n - t_{n-1} and entry 0 is 0."""
        out = np.zeros(len(self.times))
        out[1:] = np.diff(self.times)
        return out


@dataclass(frozen=True)
class ModelParams:
    """Global parameters (B, G, p0, R, a, d) of the topic-transition model."""

    B: np.ndarray
    G: np.ndarray
    p0: np.ndarray
    R: np.ndarray
    a: float
    d: float

    def __post_init__(self):
        for name in ("B", "G", "p0", "R"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "d", float(self.d))

    @property
    def K(self) -> int:
        return self.B.shape[0]

    @property
    def V(self) -> int:
        return self.B.shape[1]

    @property
    def H(self) -> np.ndarray:
        return np.exp(self.G)

    @property
    def log_B(self) -> np.ndarray:
        return np.log(np.maximum(self.B, EPS))

    @property
    def log_p0(self) -> np.ndarray:
        return np.log(np.maximum(self.p0, EPS))

    def norm_R(self) -> np.ndarray:
        return self.R / self.R.sum(axis=1, keepdims=True)

    def replace(self, **changes) -> "ModelParams":
        kw = dict(B=self.B, G=self.G, p0=self.p0, R=self.R, a=self.a, d=self.d)
        kw.update(changes)
        return ModelParams(**kw)

    def permute(self, perm) -> "ModelParams":
        """Relabel topics so that new topic j is old topic ``perm[j]``."""
        p = np.asarray(perm)
        return self.replace(B=self.B[p], G=self.G[np.ix_(p, p)], p0=self.p0[p], R=self.R[np.ix_(p, p)])

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "V": self.V,
            "B": self.B.tolist(),
            "G": self.G.tolist(),
            "p0": self.p0.tolist(),
            "R": self.R.tolist(),
            "a": self.a,
            "d": self.d,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        params = cls(B=data["B"], G=data["G"], p0=data["p0"], R=data["R"], a=data["a"], d=data["d"])
        if "K" in data and "V" in data and (int(data["K"]), int(data["V"])) != (params.K, params.V):
            raise DimensionMismatch("B", (data["K"], data["V"]), params.B.shape)
        return params


@dataclass
class VariationalState:
    """Per-examinee variational parameters and chain posteriors.

    ``chain_entropy`` is the entropy of q(z) for the chain that produced
    ``phi``/``phi_joint``; it is needed by the ELBO and cannot be rebuilt
    from the other fields once gamma and kappa have moved on.
    """

    gamma: np.ndarray
    trans: np.ndarray
    kappa: float
    a_tilde: float
    d_tilde: float
    phi: np.ndarray
    phi_joint: np.ndarray
    chain_entropy: float = 0.0
    loglik_q: float = 0.0


@dataclass(frozen=True)
class LatentPath:
    topics: np.ndarray
    lam: np.ndarray
    xi: float


def validate_params(params: ModelParams) -> None:
    """Raise if any ModelParams invariant fails; return None otherwise."""
    B, G, p0, R = params.B, params.G, params.p0, params.R
    if B.ndim != 2:
        raise DimensionMismatch("B", "(K, V)", B.shape)
    K = B.shape[0]
    if G.shape != (K, K):
        raise DimensionMismatch("G", (K, K), G.shape)
    if R.shape != (K, K):
        raise DimensionMismatch("R", (K, K), R.shape)
    if p0.shape != (K,):
        raise DimensionMismatch("p0", (K,), p0.shape)
    if not np.all(np.isfinite(B)) or np.any(B < 0) or np.any(B > 1):
        raise NotStochastic("B")
    sums = B.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > _STOCH_TOL)
    if bad.size:
        raise NotStochastic("B", row=int(bad[0]))
    if np.any(p0 < 0) or not np.all(np.isfinite(p0)) or abs(p0.sum() - 1.0) > _STOCH_TOL:
        raise NotStochastic("p0")
    if not np.all(np.isfinite(G)):
        raise DimensionMismatch("G", "finite entries", "non-finite entries")
    if not np.all(np.isfinite(R)) or np.any(R <= 0):
        raise NonPositiveHyperparam("R")
    if not (params.a > 0 and math.isfinite(params.a)):
        raise NonPositiveHyperparam("a")
    if not (params.d > 0 and math.isfinite(params.d)):
        raise NonPositiveHyperparam("d")


def log_emission(params: ModelParams, k: int, v: int) -> float:
    if not (0 <= k < params.K and 0 <= v < params.V):
        raise IndexOutOfRange(f"(k={k}, v={v}) outside K={params.K}, V={params.V}")
    return math.log(max(params.B[k, v], EPS))


def log_gap_density(params: ModelParams, xi: float, k_prev: int, k: int, dt: float) -> float:
    """Log-density of an Exponential(xi * exp(g[k_prev, k])) gap."""
    if dt <= 0:
        raise NonPositiveGap(f"gap must be positive, got {dt}")
    rate = xi * math.exp(params.G[k_prev, k])
    return math.log(rate) - rate * dt


def save_params(params: ModelParams, path) -> None:
    # json writes floats with repr(), which round-trips bit-exactly
    Path(path).write_text(json.dumps(params.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_params(path) -> ModelParams:
    return ModelParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class Corpus:
    """A list of EventSequences plus flat packed arrays for the kernels.

    ``offsets[i]:offsets[i+1]`` addresses examinee i inside ``events`` and
    ``gaps``; ``gaps`` holds t_n - t_{n-1} with 0 at every sequence start.
    """

    def __init__(self, sequences, V: int | None = None):
        self.sequences = tuple(sequences)
        if not self.sequences:
            raise InvalidSequence("corpus needs at least one sequence")
        lengths = np.array([len(s) for s in self.sequences], dtype=np.int64)
        self.offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(lengths, out=self.offsets[1:])
        self.events = np.concatenate([s.events for s in self.sequences]).astype(np.int64)
        self.gaps = np.concatenate([s.gaps for s in self.sequences])
        self.lengths = lengths
        vmax = int(self.events.max()) + 1
        if V is None:
            V = vmax
        elif V < vmax:
            raise InvalidSequence(f"event id {vmax - 1} outside vocabulary of size {V}")
        self.V = int(V)
        self.first = self.offsets[:-1]

    def __len__(self):
        return len(self.sequences)

    @property
    def m(self) -> int:
        return len(self.sequences)

    @property
    def n_events(self) -> int:
        return int(self.offsets[-1])

    def slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))
