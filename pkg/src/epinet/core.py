"""Shared domain types: statuses, events, parameters, schedules, hazards.

Everything here is immutable after construction and safe to share across
threads; replaying an event log always produces fresh state objects.
"""
from __future__ import annotations

import enum
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Status",
    "EventKind",
    "Event",
    "PhaseSchedule",
    "Parameters",
    "StepHazard",
    "EventLog",
    "CaseRecord",
    "ObservedData",
    "SufficientStats",
    "EventLogError",
    "EstimationError",
    "ImputationError",
    "PAIR_HH",
    "PAIR_HI",
    "PAIR_II",
    "pair_type",
    "rate_lookup",
    "check_covariates",
]


class EventLogError(ValueError):
    """An event sequence violates the model's transition or link rules.

    ``index`` is the position of the offending event (None for header-level
    problems such as a bad initial state).
    """

    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"event {index}: {message}"
        super().__init__(message)


class EstimationError(RuntimeError):
    """A maximum-likelihood solve failed; carries diagnostics when useful."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class ImputationError(RuntimeError):
    """A conditional sampler could not produce a compatible draw."""


class Status(enum.Enum):
    """Disease status. IA/IS are the two infective subtypes."""

    S = "S"
    E = "E"
    IA = "Ia"
    IS = "Is"
    R = "R"

    @property
    def infectious(self) -> bool:
        return self is Status.IA or self is Status.IS

    @property
    def healthy(self) -> bool:
        """Binary network class: healthy covers S, E and R."""
        return not self.infectious


class EventKind(enum.Enum):
    EXPOSURE = "exposure"
    MANIFESTATION = "manifestation"
    RECOVERY = "recovery"
    LINK_ON = "link_activate"
    LINK_OFF = "link_terminate"
    EXTERNAL = "external_onset"

    @property
    def is_link(self) -> bool:
        return self is EventKind.LINK_ON or self is EventKind.LINK_OFF

    @property
    def has_subtype(self) -> bool:
        return self is EventKind.MANIFESTATION or self is EventKind.EXTERNAL


@dataclass(frozen=True, slots=True)
class Event:
    """One transition of the joint chain.

    ``partner`` is the other endpoint for link events and the (optional)
    infector for exposures.  ``subtype`` is set exactly for manifestation
    and external-onset events.
    """

    time: float
    kind: EventKind
    actor: int
    partner: Optional[int] = None
    subtype: Optional[Status] = None


# Unordered pair types for link rates.
PAIR_HH, PAIR_HI, PAIR_II = 0, 1, 2
PAIR_NAMES = ("HH", "HI", "II")


def pair_type(infectious_i: bool, infectious_j: bool) -> int:
    return int(infectious_i) + int(infectious_j)


class PhaseSchedule:
    """Partition of (0, T] into behavioural phases with labels {0, 1}.

    Intervals are half-open ``(start, end]`` so every time in (0, T] maps to
    exactly one phase.
    """

    def __init__(self, intervals: Sequence[tuple[float, float, int]]):
        if not intervals:
            raise ValueError("schedule needs at least one interval")
        ivs = sorted((float(s), float(e), int(p)) for s, e, p in intervals)
        if ivs[0][0] != 0.0:
            raise ValueError("schedule must start at 0")
        for (s0, e0, _), (s1, _, _) in zip(ivs, ivs[1:]):
            if not math.isclose(e0, s1, rel_tol=0, abs_tol=0):
                raise ValueError(f"schedule gap/overlap at {e0} vs {s1}")
        for s, e, p in ivs:
            if e <= s:
                raise ValueError(f"empty interval ({s}, {e}]")
            if p not in (0, 1):
                raise ValueError(f"phase label must be 0 or 1, got {p}")
        self.intervals: tuple[tuple[float, float, int], ...] = tuple(ivs)
        self.horizon = ivs[-1][1]
        self._ends = [e for _, e, _ in ivs]
        self._phases = [p for _, _, p in ivs]

    def phase_at(self, t: float) -> int:
        """Phase containing t; boundary times belong to the earlier interval."""
        if not 0.0 < t <= self.horizon:
            raise ValueError(f"time {t} outside (0, {self.horizon}]")
        return self._phases[bisect_left(self._ends, t)]

    def segments(self, a: float, b: float) -> Iterator[tuple[float, int]]:
        """Yield (duration, phase) pieces of (a, b] split at phase boundaries."""
        if b <= a:
            return
        idx = bisect_left(self._ends, a) if a > 0 else 0
        lo = a
        while lo < b:
            end = self._ends[idx]
            hi = min(end, b)
            yield hi - lo, self._phases[idx]
            lo = hi
            idx += 1

    def measure(self, phase: int) -> float:
        return sum(e - s for s, e, p in self.intervals if p == phase)

    @classmethod
    def single(cls, horizon: float, phase: int = 0) -> "PhaseSchedule":
        return cls([(0.0, horizon, phase)])

    @classmethod
    def split(cls, boundary: float, horizon: float) -> "PhaseSchedule":
        """Phase 0 on (0, boundary], phase 1 on (boundary, horizon]."""
        return cls([(0.0, boundary, 0), (boundary, horizon, 1)])

    def __eq__(self, other) -> bool:
        return isinstance(other, PhaseSchedule) and self.intervals == other.intervals

    def __repr__(self) -> str:
        return f"PhaseSchedule({list(self.intervals)!r})"


@dataclass(frozen=True)
class Parameters:
    """Full parameter vector of the joint epidemic-network chain.

    ``exp_eta`` is the relative infectiousness of Is versus Ia and is the
    scale on which it is stored and solved; ``alpha``/``omega`` are (2, 3)
    arrays indexed [phase, pair type] with pair types (HH, HI, II).  The
    optional external block (``xi``, ``b_e``) models onsets seeded from
    outside the population.
    """

    beta: float
    exp_eta: float
    phi: float
    gamma: float
    p_s: float
    b_s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))
    omega: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))
    xi: Optional[float] = None
    b_e: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "b_s", np.asarray(self.b_s, dtype=float))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float).reshape(2, 3))
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(2, 3))
        if self.b_e is not None:
            object.__setattr__(self, "b_e", np.asarray(self.b_e, dtype=float))

    @property
    def external(self) -> bool:
        return self.xi is not None

    @property
    def covariate_dim(self) -> int:
        return self.b_s.shape[0]

    def validate(self) -> None:
        for name in ("beta", "exp_eta", "phi", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite rate, got {v}")
        if not 0.0 < self.p_s < 1.0:
            raise ValueError(f"p_s must lie in (0, 1), got {self.p_s}")
        if not (np.isfinite(self.b_s).all()):
            raise ValueError("b_s must be finite")
        for name in ("alpha", "omega"):
            arr = getattr(self, name)
            if not (np.isfinite(arr).all() and (arr > 0).all()):
                raise ValueError(f"all {name} rates must be positive and finite")
        if self.external:
            if not (np.isfinite(self.xi) and self.xi > 0):
                raise ValueError(f"xi must be positive, got {self.xi}")
            if self.b_e is None or self.b_e.shape != self.b_s.shape:
                raise ValueError("b_e must match the covariate dimension")

    @property
    def eta(self) -> float:
        return math.log(self.exp_eta)

    # -- flat vector view (fixed ordering shared by score/Hessian code) --

    def names(self) -> list[str]:
        n = ["beta", "exp_eta", "phi", "gamma", "p_s"]
        n += [f"b_S_{j}" for j in range(self.covariate_dim)]
        n += [f"alpha_{ab}{k}" for k in (0, 1) for ab in PAIR_NAMES]
        n += [f"omega_{ab}{k}" for k in (0, 1) for ab in PAIR_NAMES]
        if self.external:
            n += ["xi"] + [f"b_E_{j}" for j in range(self.covariate_dim)]
        return n

    def pack(self) -> np.ndarray:
        parts = [
            [self.beta, self.exp_eta, self.phi, self.gamma, self.p_s],
            self.b_s,
            self.alpha.ravel(),
            self.omega.ravel(),
        ]
        if self.external:
            parts += [[self.xi], self.b_e]
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def replace(self, **kw) -> "Parameters":
        data = {
            "beta": self.beta, "exp_eta": self.exp_eta, "phi": self.phi,
            "gamma": self.gamma, "p_s": self.p_s, "b_s": self.b_s,
            "alpha": self.alpha, "omega": self.omega, "xi": self.xi, "b_e": self.b_e,
        }
        data.update(kw)
        return Parameters(**data)

    @classmethod
    def unpack(cls, vec: np.ndarray, covariate_dim: int, external: bool = False) -> "Parameters":
        vec = np.asarray(vec, dtype=float)
        d = covariate_dim
        expected = 5 + d + 12 + (1 + d if external else 0)
        if vec.shape != (expected,):
            raise ValueError(f"expected vector of length {expected}, got {vec.shape}")
        beta, exp_eta, phi, gamma, p_s = vec[:5]
        b_s = vec[5:5 + d]
        alpha = vec[5 + d:11 + d].reshape(2, 3)
        omega = vec[11 + d:17 + d].reshape(2, 3)
        xi = b_e = None
        if external:
            xi = float(vec[17 + d])
            b_e = vec[18 + d:18 + 2 * d]
        return cls(float(beta), float(exp_eta), float(phi), float(gamma), float(p_s),
                   b_s, alpha, omega, xi, b_e)


def rate_lookup(params: Parameters, status_i: Status, status_j: Status,
                connected: bool, phase: int) -> float:
    """Pairwise link change rate: omega if the pair is connected, alpha if not.

    Symmetric in (i, j) because only the unordered pair type is stored.
    """
    pt = pair_type(status_i.infectious, status_j.infectious)
    table = params.omega if connected else params.alpha
    return float(table[phase, pt])


class StepHazard:
    """Piecewise-constant hazard on (t_min, t_max].

    ``edges`` has n+1 change points and ``levels`` the n nonnegative rates,
    with level j constant on (edges[j], edges[j+1]).
    """

    __slots__ = ("edges", "levels", "_cum")

    def __init__(self, edges: Sequence[float], levels: Sequence[float]):
        self.edges = np.asarray(edges, dtype=float)
        self.levels = np.asarray(levels, dtype=float)
        if self.edges.ndim != 1 or self.levels.shape != (self.edges.shape[0] - 1,):
            raise ValueError("need n+1 edges for n levels")
        if self.levels.shape[0] < 1:
            raise ValueError("need at least one interval")
        if not np.all(np.diff(self.edges) > 0):
            raise ValueError("edges must be strictly increasing")
        if np.any(self.levels < 0):
            raise ValueError("levels must be nonnegative")
        # cumulative integral at each edge, _cum[j] = integral over (t_min, edges[j])
        self._cum = np.concatenate([[0.0], np.cumsum(self.levels * np.diff(self.edges))])

    @property
    def support(self) -> tuple[float, float]:
        return float(self.edges[0]), float(self.edges[-1])

    @property
    def cum_at_edges(self) -> np.ndarray:
        """Integral over (t_min, edges[j]) for each edge j."""
        return self._cum

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.edges)

    def total_integral(self) -> float:
        return float(self._cum[-1])

    def integral_to(self, t: float) -> float:
        """Integral of the hazard over (t_min, t]."""
        lo, hi = self.support
        if not lo <= t <= hi:
            raise ValueError(f"{t} outside support ({lo}, {hi}]")
        j = int(np.searchsorted(self.edges, t, side="left")) - 1
        j = max(j, 0)
        return float(self._cum[j] + self.levels[j] * (t - self.edges[j]))

    def level_at(self, t: float) -> float:
        lo, hi = self.support
        if not lo < t <= hi:
            raise ValueError(f"{t} outside support ({lo}, {hi}]")
        j = int(np.searchsorted(self.edges, t, side="left")) - 1
        return float(self.levels[j])

    @classmethod
    def from_changes(cls, t_min: float, t_max: float,
                     changes: Sequence[tuple[float, float]],
                     initial_level: float) -> "StepHazard":
        """Build from (time, new_level) changes inside (t_min, t_max)."""
        edges = [t_min]
        levels = [initial_level]
        for t, lv in sorted(changes):
            if not t_min < t < t_max:
                raise ValueError(f"change point {t} outside ({t_min}, {t_max})")
            if t == edges[-1]:
                levels[-1] = lv
            else:
                edges.append(t)
                levels.append(lv)
        edges.append(t_max)
        return cls(edges, levels)


def check_covariates(x: np.ndarray, n: int) -> np.ndarray:
    """Validate and return an (n, d) float covariate matrix (d may be 0)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != n:
        raise ValueError(f"covariates must be ({n}, d), got {x.shape}")
    if x.size and not np.isfinite(x).all():
        raise ValueError("covariates must be finite")
    return x


def _norm_pair(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class EventLog:
    """Complete record of one realization: initial state plus sorted events.

    Event times are strictly increasing and lie in (0, horizon]; simultaneous
    events are rejected, which keeps replay and the sufficient statistics
    unambiguous.
    """

    horizon: float
    initial_statuses: tuple[Status, ...]
    initial_edges: frozenset[tuple[int, int]]
    schedule: PhaseSchedule
    events: tuple[Event, ...]

    @property
    def n(self) -> int:
        return len(self.initial_statuses)

    def validate(self) -> None:
        """Replay the full log, raising EventLogError on the first violation."""
        if self.horizon <= 0:
            raise EventLogError("horizon must be positive")
        if self.schedule.horizon != self.horizon:
            raise EventLogError("schedule does not cover (0, horizon]")
        for i, j in self.initial_edges:
            if not (0 <= i < self.n and 0 <= j < self.n and i < j):
                raise EventLogError(f"bad initial edge ({i}, {j})")
        self._replay_upto(len(self.events), check=True)

    def replay(self, t: float) -> tuple[list[Status], set[tuple[int, int]]]:
        """Exact system state at time t: all events with time <= t applied."""
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"query time {t} outside [0, {self.horizon}]")
        k = 0
        while k < len(self.events) and self.events[k].time <= t:
            k += 1
        return self._replay_upto(k, check=False)

    def _replay_upto(self, k: int, check: bool):
        statuses = list(self.initial_statuses)
        adj = set(self.initial_edges)
        n = self.n
        prev_t = 0.0
        for idx in range(k):
            ev = self.events[idx]
            if check:
                if not ev.time > prev_t:
                    raise EventLogError(
                        f"time {ev.time} not strictly after {prev_t}", idx)
                if not (math.isfinite(ev.time) and ev.time <= self.horizon):
                    raise EventLogError(f"time {ev.time} beyond horizon", idx)
                if not 0 <= ev.actor < n:
                    raise EventLogError(f"actor {ev.actor} out of range", idx)
                if ev.kind.has_subtype != (ev.subtype is not None):
                    raise EventLogError(
                        f"{ev.kind.value} subtype must be present iff "
                        "manifestation/external", idx)
                if ev.subtype is not None and not ev.subtype.infectious:
                    raise EventLogError(f"subtype {ev.subtype} is not Ia/Is", idx)
            prev_t = ev.time
            kind = ev.kind
            if kind.is_link:
                if check:
                    if ev.partner is None or not 0 <= ev.partner < n:
                        raise EventLogError("link event needs a valid partner", idx)
                    if ev.partner == ev.actor:
                        raise EventLogError("self-link", idx)
                pair = _norm_pair(ev.actor, ev.partner)
                if kind is EventKind.LINK_ON:
                    if check and pair in adj:
                        raise EventLogError(f"pair {pair} already linked", idx)
                    adj.add(pair)
                else:
                    if check and pair not in adj:
                        raise EventLogError(f"pair {pair} not linked", idx)
                    adj.discard(pair)
            elif kind is EventKind.EXPOSURE:
                if check:
                    if statuses[ev.actor] is not Status.S:
                        raise EventLogError(
                            f"exposure of non-susceptible {ev.actor}", idx)
                    if ev.partner is not None:
                        if not statuses[ev.partner].infectious:
                            raise EventLogError(
                                f"infector {ev.partner} not infectious", idx)
                        if _norm_pair(ev.actor, ev.partner) not in adj:
                            raise EventLogError(
                                f"infector {ev.partner} not a neighbour", idx)
                statuses[ev.actor] = Status.E
            elif kind is EventKind.MANIFESTATION:
                if check and statuses[ev.actor] is not Status.E:
                    raise EventLogError(
                        f"manifestation of non-exposed {ev.actor}", idx)
                statuses[ev.actor] = ev.subtype
            elif kind is EventKind.RECOVERY:
                if check and not statuses[ev.actor].infectious:
                    raise EventLogError(
                        f"recovery of non-infectious {ev.actor}", idx)
                statuses[ev.actor] = Status.R
            else:  # EXTERNAL onset: S -> Ia/Is directly
                if check and statuses[ev.actor] is not Status.S:
                    raise EventLogError(
                        f"external onset of non-susceptible {ev.actor}", idx)
                statuses[ev.actor] = ev.subtype
        return statuses, adj

    def attack_rate(self) -> float:
        """Fraction of the population no longer susceptible at the horizon."""
        statuses, _ = self.replay(self.horizon)
        return sum(1 for s in statuses if s is not Status.S) / self.n


@dataclass(frozen=True)
class CaseRecord:
    """Observed view of one infection case.

    ``recovery_time`` is None when only the containing interval
    ``recovery_bound`` (u, v] is known, or when the case is still infectious
    at the horizon (then ``recovery_bound`` is None too).  For internal cases
    ``exposure_time`` is None when hidden; the plausible latency interval
    defaults to (0, manifest_time).  Individuals seeded in a non-susceptible
    status carry ``initially_infected`` and have no exposure event at all.
    """

    individual: int
    manifest_time: float
    subtype: Status
    external: bool = False
    initially_infected: bool = False
    exposure_time: Optional[float] = None
    recovery_time: Optional[float] = None
    recovery_bound: Optional[tuple[float, float]] = None
    latency: Optional[tuple[float, float]] = None

    @property
    def internal(self) -> bool:
        """True when an exposure event exists for this case."""
        return not self.external and not self.initially_infected

    def __post_init__(self):
        if not self.subtype.infectious:
            raise ValueError("case subtype must be Ia or Is")
        if (self.external or self.initially_infected) \
                and self.exposure_time is not None:
            raise ValueError("external/seeded cases have no exposure time")
        if self.latency is not None:
            lo, hi = self.latency
            if not (0 <= lo < hi <= self.manifest_time):
                raise ValueError(
                    f"latency interval {self.latency} incompatible with "
                    f"manifestation at {self.manifest_time}")
        if self.recovery_bound is not None:
            u, v = self.recovery_bound
            if not u < v:
                raise ValueError(f"empty recovery bound ({u}, {v}]")
            if u < self.manifest_time:
                raise ValueError("recovery bound must start at/after manifestation")


@dataclass(frozen=True)
class ObservedData:
    """The partial view the inference engine works from.

    Network events, manifestation times/subtypes, case labels, covariates and
    initial conditions are always observed; exposure and recovery times may be
    hidden per case.
    """

    horizon: float
    initial_statuses: tuple[Status, ...]
    initial_edges: frozenset[tuple[int, int]]
    schedule: PhaseSchedule
    link_events: tuple[Event, ...]
    cases: tuple[CaseRecord, ...]
    covariates: np.ndarray

    @property
    def n(self) -> int:
        return len(self.initial_statuses)

    @property
    def external_active(self) -> bool:
        return any(c.external for c in self.cases)

    def validate(self) -> None:
        check_covariates(self.covariates, self.n)
        seen = set()
        for c in self.cases:
            if c.individual in seen:
                raise ValueError(f"duplicate case for individual {c.individual}")
            seen.add(c.individual)
            if not 0 < c.manifest_time <= self.horizon:
                if not (c.manifest_time == 0.0
                        and self.initial_statuses[c.individual].infectious):
                    raise ValueError(
                        f"case {c.individual} manifests outside (0, horizon]")
        for ev in self.link_events:
            if not ev.kind.is_link:
                raise ValueError("link_events may only contain link events")


@dataclass
class SufficientStats:
    """Counts and exact time integrals appearing in the complete-data likelihood.

    Per-individual arrays have length N; ``exposure_time``/``manifest_time``
    use the convention that never-occurred events sit at the horizon T.
    ``asympt_pressure``/``sympt_pressure`` are each individual's integrals of
    Ia/Is neighbour counts over their own susceptible period, and
    ``asympt_at_exposure``/``sympt_at_exposure`` the neighbour counts at the
    instant of exposure (zero for never-exposed individuals).
    """

    horizon: float
    n_exposures: int
    n_manifest: int          # internal onsets (manifestation events)
    n_external: int          # external onsets
    n_sympt: int             # Is assignments, internal + external
    n_asympt: int
    n_recoveries: int
    exposed_person_time: float      # integral of E(t)
    infectious_person_time: float   # integral of I(t)
    link_on_counts: np.ndarray      # (2, 3) [phase, pair type]
    link_off_counts: np.ndarray
    disconnected_pair_time: np.ndarray  # (2, 3)
    connected_pair_time: np.ndarray
    asympt_pressure: np.ndarray
    sympt_pressure: np.ndarray
    asympt_at_exposure: np.ndarray
    sympt_at_exposure: np.ndarray
    exposure_time: np.ndarray
    manifest_time: np.ndarray
    ever_exposed: np.ndarray        # bool: exposure event occurred in (0, T]
    ever_external: np.ndarray       # bool: external onset occurred in (0, T]

    @property
    def n(self) -> int:
        return self.asympt_pressure.shape[0]

    @property
    def n_infectious(self) -> int:
        return self.n_manifest + self.n_external

    def check(self) -> None:
        assert self.n_sympt + self.n_asympt == self.n_infectious
        assert (self.link_on_counts >= 0).all() and (self.link_off_counts >= 0).all()
        for arr in (self.disconnected_pair_time, self.connected_pair_time,
                    self.asympt_pressure, self.sympt_pressure):
            assert (np.asarray(arr) >= -1e-12).all()
