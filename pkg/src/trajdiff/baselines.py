"""Mechanistic mobility generators used as comparison points.

Four generators over a fixed location catalog:

* EPR: explore a new location with probability rho * S^-gamma (S =
  number of distinct visited locations), otherwise return to a visited
  location with probability proportional to its visit count. Exploration
  targets are uniform among unvisited locations.
* dEPR: as EPR, but exploration targets are weighted by the inverse
  squared great-circle distance from the current location.
* dtEPR: dEPR movement plus an i.i.d. dwell time drawn from an empirical
  dwell distribution. The temporal component does not affect locations.
* IPT: per-individual first-order Markov transitions estimated with
  add-one smoothing.

The paper's evaluation names these models without defining them; the
constructions here follow the standard mobility literature, with the
parameter defaults rho = 0.6, gamma = 0.21.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from trajdiff.errors import DataError
from trajdiff.geo import haversine_km

DEFAULT_RHO = 0.6
DEFAULT_GAMMA = 0.21
MIN_DISTANCE_KM = 1e-6
ROW_SUM_TOL = 1e-9


@dataclass
class EprState:
    """Mutable per-simulation state: visit counts and the current location."""

    visit_counts: dict[int, int]
    current: int

    def __post_init__(self):
        if self.visit_counts.get(self.current, 0) <= 0:
            raise DataError("current location must have a positive visit count")

    @property
    def S(self) -> int:
        return len(self.visit_counts)

    def record(self, loc: int) -> None:
        self.visit_counts[loc] = self.visit_counts.get(loc, 0) + 1
        self.current = loc

    @classmethod
    def start_at(cls, loc: int) -> "EprState":
        return cls(visit_counts={int(loc): 1}, current=int(loc))


def _preferential_return(state: EprState, rng: np.random.Generator) -> int:
    locs = np.fromiter(state.visit_counts.keys(), dtype=np.int64)
    counts = np.fromiter(state.visit_counts.values(), dtype=np.float64)
    return int(rng.choice(locs, p=counts / counts.sum()))


def _unvisited(state: EprState, n_locations: int) -> np.ndarray:
    mask = np.ones(n_locations, dtype=bool)
    mask[np.fromiter(state.visit_counts.keys(), dtype=np.int64)] = False
    return np.flatnonzero(mask)


def _explore_probability(state: EprState, rho: float, gamma: float) -> float:
    return rho * state.S ** (-gamma)


def epr_step(state: EprState, n_locations: int, rho: float, gamma: float, rng: np.random.Generator) -> int:
    """One exploration-or-preferential-return move; updates the state."""
    if n_locations < 1:
        raise DataError("empty location catalog")
    if not 0.0 <= rho <= 1.0 or gamma < 0.0:
        raise ValueError(f"need rho in [0, 1] and gamma >= 0, got ({rho}, {gamma})")
    candidates = _unvisited(state, n_locations)
    if candidates.size and rng.random() < _explore_probability(state, rho, gamma):
        nxt = int(rng.choice(candidates))
    else:
        nxt = _preferential_return(state, rng)
    state.record(nxt)
    return nxt


def depr_step(
    state: EprState,
    coords: np.ndarray,
    rho: float,
    gamma: float,
    rng: np.random.Generator,
) -> int:
    """EPR with gravity-weighted exploration: target weight 1/d^2.

    ``coords`` is the (D, 2) lat/lon table; the current location is
    excluded from exploration (it is visited), and distances are floored
    to avoid division blow-ups on co-located entries.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n_locations = coords.shape[0]
    candidates = _unvisited(state, n_locations)
    if candidates.size and rng.random() < _explore_probability(state, rho, gamma):
        cur = coords[state.current]
        d = haversine_km(cur[0], cur[1], coords[candidates, 0], coords[candidates, 1])
        w = 1.0 / np.maximum(d, MIN_DISTANCE_KM) ** 2
        nxt = int(rng.choice(candidates, p=w / w.sum()))
    else:
        nxt = _preferential_return(state, rng)
    state.record(nxt)
    return nxt


def dtepr_step(
    state: EprState,
    coords: np.ndarray,
    rho: float,
    gamma: float,
    dwell_dist: np.ndarray,
    rng: np.random.Generator,
) -> tuple[int, float]:
    """dEPR move plus an i.i.d. dwell duration from the empirical distribution."""
    dwell_dist = np.asarray(dwell_dist, dtype=np.float64)
    if dwell_dist.size == 0:
        raise DataError("empty dwell distribution")
    loc = depr_step(state, coords, rho, gamma, rng)
    dwell = float(rng.choice(dwell_dist))
    return loc, dwell


def ipt_step(state: EprState, transition_matrix: np.ndarray, rng: np.random.Generator) -> int:
    """First-order Markov move from the current location's transition row."""
    transition_matrix = np.asarray(transition_matrix, dtype=np.float64)
    row = transition_matrix[state.current]
    if abs(row.sum() - 1.0) > ROW_SUM_TOL:
        raise DataError(f"transition row {state.current} sums to {row.sum()}, not 1")
    nxt = int(rng.choice(row.size, p=row))
    state.record(nxt)
    return nxt


def transition_matrix_from_sequences(sequences, n_locations: int) -> np.ndarray:
    """Add-one-smoothed first-order transition counts."""
    counts = np.ones((n_locations, n_locations), dtype=np.float64)
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1.0
    return counts / counts.sum(axis=1, keepdims=True)


def empirical_transition_matrix(sequences, n_locations: int) -> np.ndarray:
    """Unsmoothed transition frequencies (rows with no data become uniform)."""
    counts = np.zeros((n_locations, n_locations), dtype=np.float64)
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        for a, b in zip(seq[:-1], seq[1:]):
            counts[a, b] += 1.0
    row_sums = counts.sum(axis=1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / n_locations)
    with np.errstate(invalid="ignore"):
        probs = np.where(row_sums > 0, counts / np.maximum(row_sums, 1.0), uniform)
    return probs


def _run_lengths(seq: np.ndarray) -> list[int]:
    runs, length = [], 1
    for a, b in zip(seq[:-1], seq[1:]):
        if a == b:
            length += 1
        else:
            runs.append(length)
            length = 1
    runs.append(length)
    return runs


@dataclass
class BaselineParams:
    """Everything fit_baseline extracts from an observation corpus."""

    kind: str
    n_locations: int
    initial_dist: np.ndarray  # distribution of first tokens
    visit_counts: dict[int, int]  # pooled corpus visit counts
    dwell_dist: np.ndarray  # run lengths of consecutive repeats
    transitions: dict[str, np.ndarray] = field(default_factory=dict)  # per user
    rho: float = DEFAULT_RHO
    gamma: float = DEFAULT_GAMMA


def fit_baseline(observations, kind: str, n_locations: int | None = None, users=None) -> BaselineParams:
    """Estimate baseline parameters from observed trajectories.

    ``observations`` is a sequence of token arrays; ``users`` optionally
    labels each trajectory for the per-individual IPT matrices (all
    trajectories pool into one individual otherwise).
    """
    observations = [np.asarray(o, dtype=np.int64) for o in observations]
    if not observations:
        raise DataError("empty observation corpus")
    if kind not in ("epr", "depr", "dtepr", "ipt"):
        raise DataError(f"unknown baseline kind {kind!r}")
    if n_locations is None:
        n_locations = int(max(o.max() for o in observations)) + 1
    if users is None:
        users = ["all"] * len(observations)

    firsts = np.array([o[0] for o in observations])
    initial = np.bincount(firsts, minlength=n_locations).astype(np.float64)
    initial /= initial.sum()

    visit_counts: dict[int, int] = {}
    for o in observations:
        for tok in o:
            visit_counts[int(tok)] = visit_counts.get(int(tok), 0) + 1

    dwell = np.concatenate([np.asarray(_run_lengths(o), dtype=np.float64) for o in observations])

    transitions = {}
    if kind == "ipt":
        per_user: dict[str, list] = {}
        for user, o in zip(users, observations):
            per_user.setdefault(str(user), []).append(o)
        for user, seqs in per_user.items():
            transitions[user] = transition_matrix_from_sequences(seqs, n_locations)

    return BaselineParams(
        kind=kind,
        n_locations=n_locations,
        initial_dist=initial,
        visit_counts=visit_counts,
        dwell_dist=dwell,
        transitions=transitions,
    )


def simulate_baseline(
    params: BaselineParams,
    count: int,
    length: int,
    rng: np.random.Generator,
    coords: np.ndarray | None = None,
) -> list[np.ndarray]:
    """Generate ``count`` sequences of ``length`` steps from a fitted baseline."""
    if params.kind in ("depr", "dtepr") and coords is None:
        raise DataError(f"{params.kind} needs location coordinates")
    users = sorted(params.transitions) if params.kind == "ipt" else []
    out = []
    for i in range(count):
        start = int(rng.choice(params.initial_dist.size, p=params.initial_dist))
        state = EprState.start_at(start)
        seq = [start]
        for _ in range(length - 1):
            if params.kind == "epr":
                seq.append(epr_step(state, params.n_locations, params.rho, params.gamma, rng))
            elif params.kind == "depr":
                seq.append(depr_step(state, coords, params.rho, params.gamma, rng))
            elif params.kind == "dtepr":
                loc, _ = dtepr_step(state, coords, params.rho, params.gamma, params.dwell_dist, rng)
                seq.append(loc)
            else:
                matrix = params.transitions[users[i % len(users)]]
                seq.append(ipt_step(state, matrix, rng))
        out.append(np.asarray(seq, dtype=np.int64))
    return out
