"""Exact event-driven simulation of the joint epidemic-network chain.

The simulator keeps per-category aggregate rates current through incremental
bookkeeping (infectious-neighbour counts, connected-pair counts by type) and
draws one exponential waiting time per step.  Waiting times that cross a
phase boundary are discarded and redrawn from the boundary, which is exact
because the chain is memoryless.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    Event,
    EventKind,
    EventLog,
    PAIR_HH,
    PAIR_HI,
    PAIR_II,
    Parameters,
    PhaseSchedule,
    Status,
    check_covariates,
)

__all__ = ["SimConfig", "SimResult", "sample_initial_network",
           "sample_covariates", "simulate", "simulate_nonextinct"]

_STATUS_CODES = {Status.S: 0, Status.E: 1, Status.IA: 2, Status.IS: 3, Status.R: 4}
_CODE_STATUS = {v: k for k, v in _STATUS_CODES.items()}


class _IndexedSet:
    """Set with O(1) add/remove/uniform-sample (swap-with-last removal)."""

    __slots__ = ("items", "pos")

    def __init__(self, items=()):
        self.items = list(items)
        self.pos = {x: k for k, x in enumerate(self.items)}

    def add(self, x):
        self.pos[x] = len(self.items)
        self.items.append(x)

    def remove(self, x):
        k = self.pos.pop(x)
        last = self.items.pop()
        if last != x:
            self.items[k] = last
            self.pos[last] = k

    def sample(self, rng) -> object:
        return self.items[rng.integers(len(self.items))]

    def __contains__(self, x):
        return x in self.pos

    def __len__(self):
        return len(self.items)


def sample_initial_network(n: int, density: float, rng: np.random.Generator) -> frozenset:
    """Erdos-Renyi draw: each unordered pair present independently."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < density
    return frozenset(zip(iu[keep].tolist(), ju[keep].tolist()))


def sample_covariates(spec: Sequence, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw independent covariate columns.

    Each column spec is ("bernoulli", p) or ("normal",); an empty spec gives
    a (n, 0) matrix.
    """
    cols = []
    for item in spec:
        kind = item[0]
        if kind == "bernoulli":
            p = float(item[1]) if len(item) > 1 else 0.5
            cols.append(rng.random(n) < p)
        elif kind == "normal":
            cols.append(rng.standard_normal(n))
        else:
            raise ValueError(f"unknown covariate spec {item!r}")
    if not cols:
        return np.zeros((n, 0))
    return np.column_stack([np.asarray(c, dtype=float) for c in cols])


@dataclass
class SimConfig:
    """Everything the simulator needs apart from the rate parameters.

    ``network`` is either an edge density in [0, 1] or an explicit edge set;
    ``initial_infected`` is a count of uniformly chosen seed E individuals or
    an explicit list of (individual, status) pairs; ``covariates`` is a
    matrix or a column spec understood by :func:`sample_covariates`.
    """

    n: int
    schedule: PhaseSchedule
    network: Union[float, frozenset, set] = 0.05
    initial_infected: Union[int, Sequence[tuple[int, Status]]] = 1
    covariates: Union[np.ndarray, Sequence] = ()

    @property
    def horizon(self) -> float:
        return self.schedule.horizon

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("population size must be at least 2")


@dataclass
class SimResult:
    log: EventLog
    covariates: np.ndarray
    extinct: bool  # all rates vanished before the horizon

    @property
    def attack_rate(self) -> float:
        return self.log.attack_rate()


class _SimState:
    """Mutable chain state with incremental rate bookkeeping."""

    def __init__(self, n, statuses, edges, w_s, w_e):
        self.n = n
        self.codes = np.array([_STATUS_CODES[s] for s in statuses], dtype=np.int64)
        self.nbrs = [set() for _ in range(n)]
        self.ia_nbr = np.zeros(n, dtype=np.int64)
        self.is_nbr = np.zeros(n, dtype=np.int64)
        self.w_s = w_s
        self.w_e = w_e
        infectious_mask = (self.codes == 2) | (self.codes == 3)
        self.exposed = _IndexedSet(np.flatnonzero(self.codes == 1).tolist())
        self.infectious = _IndexedSet(np.flatnonzero(infectious_mask).tolist())
        self.healthy = _IndexedSet(np.flatnonzero(~infectious_mask).tolist())
        self.conn = [_IndexedSet(), _IndexedSet(), _IndexedSet()]
        for (i, j) in edges:
            self._add_link(i, j)

    # -- helpers ---------------------------------------------------------

    def _inf(self, i) -> bool:
        return self.codes[i] == 2 or self.codes[i] == 3

    def _add_link(self, i, j):
        self.nbrs[i].add(j)
        self.nbrs[j].add(i)
        ci, cj = self.codes[i], self.codes[j]
        if ci == 2:
            self.ia_nbr[j] += 1
        elif ci == 3:
            self.is_nbr[j] += 1
        if cj == 2:
            self.ia_nbr[i] += 1
        elif cj == 3:
            self.is_nbr[i] += 1
        pt = int(self._inf(i)) + int(self._inf(j))
        self.conn[pt].add((i, j) if i < j else (j, i))

    def _remove_link(self, i, j):
        self.nbrs[i].discard(j)
        self.nbrs[j].discard(i)
        ci, cj = self.codes[i], self.codes[j]
        if ci == 2:
            self.ia_nbr[j] -= 1
        elif ci == 3:
            self.is_nbr[j] -= 1
        if cj == 2:
            self.ia_nbr[i] -= 1
        elif cj == 3:
            self.is_nbr[i] -= 1
        pt = int(self._inf(i)) + int(self._inf(j))
        self.conn[pt].remove((i, j) if i < j else (j, i))

    def _set_infectious_flag(self, i, becoming: bool):
        """Move i's connected pairs between type sets when its H/I class flips."""
        for j in self.nbrs[i]:
            old = (1 if becoming else 2) if self._inf(j) else (0 if becoming else 1)
            pair = (i, j) if i < j else (j, i)
            self.conn[old].remove(pair)
            self.conn[old + (1 if becoming else -1)].add(pair)

    def expose(self, j):
        self.codes[j] = 1
        self.exposed.add(j)

    def manifest(self, i, sympt: bool):
        """E -> Ia/Is; also used for external onsets (S -> Ia/Is)."""
        self._set_infectious_flag(i, becoming=True)
        if self.codes[i] == 1:
            self.exposed.remove(i)
        self.codes[i] = 3 if sympt else 2
        self.infectious.add(i)
        self.healthy.remove(i)
        arr = self.is_nbr if sympt else self.ia_nbr
        for j in self.nbrs[i]:
            arr[j] += 1

    def recover(self, i):
        sympt = self.codes[i] == 3
        arr = self.is_nbr if sympt else self.ia_nbr
        for j in self.nbrs[i]:
            arr[j] -= 1
        self.codes[i] = 4
        self.infectious.remove(i)
        self.healthy.add(i)
        self._set_infectious_flag(i, becoming=False)

    # -- aggregate rates --------------------------------------------------

    def pressures(self, exp_eta: float) -> np.ndarray:
        """Per-individual exposure intensity, zero off the susceptible set."""
        p = self.w_s * (self.ia_nbr + exp_eta * self.is_nbr)
        p[self.codes != 0] = 0.0
        return p

    def pair_counts(self):
        n_i = len(self.infectious)
        n_h = self.n - n_i
        mc = np.array([len(self.conn[0]), len(self.conn[1]), len(self.conn[2])], dtype=float)
        tot = np.array([n_h * (n_h - 1) / 2.0, float(n_h * n_i), n_i * (n_i - 1) / 2.0])
        return mc, tot - mc

    def recheck(self):
        """Recompute every cached quantity from scratch (debug oracle)."""
        ia = np.zeros(self.n, dtype=np.int64)
        iss = np.zeros(self.n, dtype=np.int64)
        conn = [set(), set(), set()]
        for i in range(self.n):
            for j in self.nbrs[i]:
                if i < j:
                    pt = int(self._inf(i)) + int(self._inf(j))
                    conn[pt].add((i, j))
                if self.codes[j] == 2:
                    ia[i] += 1
                elif self.codes[j] == 3:
                    iss[i] += 1
        assert np.array_equal(ia, self.ia_nbr), "Ia neighbour cache out of sync"
        assert np.array_equal(iss, self.is_nbr), "Is neighbour cache out of sync"
        for pt in range(3):
            assert conn[pt] == set(self.conn[pt].items), f"pair set {pt} out of sync"


def _resolve_initial(config: SimConfig, rng) -> list[Status]:
    statuses = [Status.S] * config.n
    seeds = config.initial_infected
    if isinstance(seeds, int):
        for i in rng.choice(config.n, size=seeds, replace=False):
            statuses[int(i)] = Status.E
    else:
        for i, st in seeds:
            statuses[int(i)] = st
    return statuses


def _weighted_pick(rng, weights: np.ndarray) -> int:
    c = np.cumsum(weights)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def _check_sim_rates(params: Parameters) -> None:
    for name in ("beta", "exp_eta", "phi", "gamma"):
        v = getattr(params, name)
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be a nonnegative finite rate")
    if not 0.0 <= params.p_s <= 1.0:
        raise ValueError("p_s must lie in [0, 1]")
    for name in ("alpha", "omega"):
        arr = getattr(params, name)
        if not (np.isfinite(arr).all() and (arr >= 0).all()):
            raise ValueError(f"{name} rates must be nonnegative and finite")
    if params.external and not (np.isfinite(params.xi) and params.xi >= 0):
        raise ValueError("xi must be a nonnegative finite rate")


def simulate(params: Parameters, config: SimConfig,
             rng: Union[int, np.random.Generator, None] = None,
             validate_rates: bool = False) -> SimResult:
    """Run the exact simulation over (0, T] and return the complete log.

    Boundary-zero rates are admitted (events of that type simply never
    occur); when every aggregate rate vanishes before the horizon the run
    ends early with a truncated, still valid log and ``extinct`` set.  With
    ``validate_rates`` every cached aggregate is re-derived from the raw
    state after each event (slow; intended for tests on small populations).
    """
    _check_sim_rates(params)
    rng = np.random.default_rng(rng)
    n = config.n

    if isinstance(config.covariates, np.ndarray):
        x = check_covariates(config.covariates, n)
    else:
        x = sample_covariates(config.covariates, n, rng)
    if x.shape[1] != params.covariate_dim:
        raise ValueError(
            f"covariate dimension {x.shape[1]} != b_s dimension {params.covariate_dim}")

    if isinstance(config.network, (float, int)):
        edges = sample_initial_network(n, float(config.network), rng)
    else:
        edges = frozenset(tuple(sorted(p)) for p in config.network)

    statuses0 = _resolve_initial(config, rng)
    w_s = np.exp(x @ params.b_s) if x.shape[1] else np.ones(n)
    w_e = (np.exp(x @ params.b_e) if params.external and x.shape[1] else np.ones(n))
    state = _SimState(n, statuses0, edges, w_s, w_e)

    schedule = config.schedule
    bounds = [e for _, e, _ in schedule.intervals]
    phases = [p for _, _, p in schedule.intervals]
    seg = 0
    t = 0.0
    horizon = schedule.horizon
    events: list[Event] = []
    extinct = False

    alpha, omega = params.alpha, params.omega
    beta, exp_eta, phi, gamma = params.beta, params.exp_eta, params.phi, params.gamma
    xi = params.xi if params.external else 0.0

    while True:
        phase = phases[seg]
        boundary = bounds[seg]

        pressure = state.pressures(exp_eta)
        expo_rate = beta * pressure.sum()
        man_rate = phi * len(state.exposed)
        rec_rate = gamma * len(state.infectious)
        mc, md = state.pair_counts()
        act_rates = alpha[phase] * md
        term_rates = omega[phase] * mc
        ext_rate = xi * (state.w_e[state.codes == 0].sum()) if xi else 0.0

        rates = np.concatenate([[expo_rate, man_rate, rec_rate],
                                act_rates, term_rates, [ext_rate]])
        total = rates.sum()
        if total <= 0.0:
            if seg + 1 < len(bounds):
                t, seg = boundary, seg + 1
                continue
            extinct = True
            break

        t_cand = t + rng.exponential(1.0 / total)
        if t_cand > boundary:
            # memoryless restart at the phase boundary
            t = boundary
            if seg + 1 < len(bounds):
                seg += 1
                continue
            break
        if t_cand > horizon:
            break
        t = t_cand

        k = _weighted_pick(rng, rates)
        if k == 0:  # exposure
            j = _weighted_pick(rng, pressure)
            nb = [v for v in state.nbrs[j] if state.codes[v] == 2 or state.codes[v] == 3]
            wts = np.array([exp_eta if state.codes[v] == 3 else 1.0 for v in nb])
            infector = nb[_weighted_pick(rng, wts)]
            state.expose(j)
            events.append(Event(t, EventKind.EXPOSURE, j, partner=infector))
        elif k == 1:  # manifestation
            i = state.exposed.sample(rng)
            sympt = rng.random() < params.p_s
            state.manifest(i, sympt)
            events.append(Event(t, EventKind.MANIFESTATION, i,
                                subtype=Status.IS if sympt else Status.IA))
        elif k == 2:  # recovery
            i = state.infectious.sample(rng)
            state.recover(i)
            events.append(Event(t, EventKind.RECOVERY, i))
        elif k <= 5:  # link activation of pair type k-3
            pt = k - 3
            i, j = _sample_disconnected_pair(state, pt, rng)
            state._add_link(i, j)
            events.append(Event(t, EventKind.LINK_ON, i, partner=j))
        elif k <= 8:  # link termination of pair type k-6
            pt = k - 6
            i, j = state.conn[pt].sample(rng)
            state._remove_link(i, j)
            events.append(Event(t, EventKind.LINK_OFF, i, partner=j))
        else:  # external onset
            wts = np.where(state.codes == 0, state.w_e, 0.0)
            j = _weighted_pick(rng, wts)
            sympt = rng.random() < params.p_s
            state.manifest(j, sympt)
            events.append(Event(t, EventKind.EXTERNAL, j,
                                subtype=Status.IS if sympt else Status.IA))

        if validate_rates:
            state.recheck()

    log = EventLog(horizon=horizon,
                   initial_statuses=tuple(statuses0),
                   initial_edges=edges,
                   schedule=schedule,
                   events=tuple(events))
    return SimResult(log=log, covariates=x, extinct=extinct)


def _sample_disconnected_pair(state: _SimState, pt: int, rng) -> tuple[int, int]:
    """Uniform draw from disconnected pairs of the given type (rejection)."""
    a_set = state.healthy if pt != PAIR_II else state.infectious
    b_set = state.infectious if pt != PAIR_HH else state.healthy
    for _ in range(200):
        i = a_set.sample(rng)
        j = b_set.sample(rng)
        if i != j and j not in state.nbrs[i]:
            return (i, j) if i < j else (j, i)
    # dense corner: enumerate explicitly (healthy and infectious are disjoint,
    # so HI pairs need no i < j dedup)
    if pt == PAIR_HI:
        cands = [(min(i, j), max(i, j))
                 for i in a_set.items for j in b_set.items
                 if j not in state.nbrs[i]]
    else:
        cands = [(i, j)
                 for i in a_set.items for j in b_set.items
                 if i < j and j not in state.nbrs[i]]
    if not cands:
        raise RuntimeError("no disconnected pair of requested type (rate bookkeeping bug)")
    return cands[rng.integers(len(cands))]


def simulate_nonextinct(params: Parameters, config: SimConfig, seed: int,
                        min_attack_rate: float = 0.0,
                        max_retries: int = 100) -> SimResult:
    """Resimulate with spawned seeds until the attack rate reaches the target."""
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(max_retries + 1):
        result = simulate(params, config, np.random.default_rng(child))
        if result.attack_rate >= min_attack_rate:
            return result
    raise RuntimeError(
        f"no run reached attack rate {min_attack_rate} in {max_retries + 1} tries")
