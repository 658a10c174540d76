"""Stochastic-EM driver: data preparation, the iteration loop, estimate
averaging, and uncertainty quantification.

Each iteration draws missing exposure times given the previous recovery
times, draws missing recovery times given the new exposure times, and sets
the parameters to the complete-data MLE of the augmented dataset.  The
augmented sufficient statistics are assembled directly from static contact
intervals (never by replaying event logs), which keeps one iteration at a
few milliseconds; the event-log sweep in :mod:`epinet.likelihood` serves as
the equality oracle for this assembly in the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator

from .core import (
    CaseRecord,
    EstimationError,
    Event,
    EventKind,
    EventLog,
    ImputationError,
    ObservedData,
    Parameters,
    Status,
    SufficientStats,
    check_covariates,
)
from .estimators import fit_complete
from .imputation import (
    Recoverer,
    build_pressure_profile,
    exposure_norm_constant,
    sample_exposure_time,
    sample_exposure_time_direct,
    sample_recovery_times,
    sample_truncated_exp,
)
from .likelihood import hessian, score

__all__ = ["MissingnessSpec", "observe", "StemConfig", "ParameterChain",
           "stem_run", "average_estimates", "louis_information",
           "asymptotic_se", "reconstruct_log", "StochasticEM"]


# ---------------------------------------------------------------------------
# observed-data construction
# ---------------------------------------------------------------------------

@dataclass
class MissingnessSpec:
    """Which event times are hidden from the inference engine.

    ``hide_exposure``/``hide_recovery`` are "all", an iterable of individual
    ids, or None.  Hidden recoveries are reported only up to the containing
    cell of a width-``recovery_grid`` survey grid (or an explicit bound).
    """

    hide_exposure: Union[str, Sequence[int], None] = None
    hide_recovery: Union[str, Sequence[int], None] = None
    recovery_grid: float = 7.0
    recovery_bounds: Optional[dict] = None
    latency: Optional[dict] = None

    def hides_exposure(self, i: int) -> bool:
        if self.hide_exposure is None:
            return False
        return self.hide_exposure == "all" or i in set(self.hide_exposure)

    def hides_recovery(self, i: int) -> bool:
        if self.hide_recovery is None:
            return False
        return self.hide_recovery == "all" or i in set(self.hide_recovery)


def observe(log: EventLog, covariates: np.ndarray,
            spec: Optional[MissingnessSpec] = None) -> ObservedData:
    """Project a complete log onto the partially observed view.

    Exposed-but-never-manifested individuals are indistinguishable from
    susceptibles in the observed world and are therefore dropped from the
    case list (their hidden exposure event is not imputed).
    """
    spec = spec or MissingnessSpec()
    x = check_covariates(covariates, log.n)
    horizon = log.horizon

    exposure: dict[int, float] = {}
    manifest: dict[int, tuple[float, Status]] = {}
    external: set[int] = set()
    recovery: dict[int, float] = {}
    link_events = []
    for ev in log.events:
        if ev.kind.is_link:
            link_events.append(ev)
        elif ev.kind is EventKind.EXPOSURE:
            exposure[ev.actor] = ev.time
        elif ev.kind is EventKind.MANIFESTATION:
            manifest[ev.actor] = (ev.time, ev.subtype)
        elif ev.kind is EventKind.EXTERNAL:
            manifest[ev.actor] = (ev.time, ev.subtype)
            external.add(ev.actor)
        else:
            recovery[ev.actor] = ev.time

    cases = []
    for i in range(log.n):
        init = log.initial_statuses[i]
        if init.infectious:
            manifest.setdefault(i, (0.0, init))
        if i not in manifest:
            continue
        m_time, subtype = manifest[i]
        seeded = init is not Status.S
        is_external = i in external
        expo = exposure.get(i)
        latency = None
        if not is_external and not seeded:
            if spec.hides_exposure(i):
                latency = (spec.latency or {}).get(i, (0.0, m_time))
                expo = None
        rec = recovery.get(i)
        bound = None
        if rec is not None and spec.hides_recovery(i):
            if spec.recovery_bounds and i in spec.recovery_bounds:
                lo, hi = spec.recovery_bounds[i]
            else:
                w = spec.recovery_grid
                lo = math.floor(rec / w) * w
                hi = min(lo + w, horizon)
            bound = (max(lo, m_time), hi)
            if not bound[0] < rec <= bound[1]:
                raise ValueError(
                    f"recovery bound {bound} does not contain {rec}")
            rec = None
        cases.append(CaseRecord(
            individual=i, manifest_time=m_time, subtype=subtype,
            external=is_external, initially_infected=seeded,
            exposure_time=expo, recovery_time=rec, recovery_bound=bound,
            latency=latency))

    return ObservedData(
        horizon=horizon, initial_statuses=log.initial_statuses,
        initial_edges=log.initial_edges, schedule=log.schedule,
        link_events=tuple(link_events), cases=tuple(cases), covariates=x)


# ---------------------------------------------------------------------------
# static precomputation
# ---------------------------------------------------------------------------

class _Prep:
    """Static arrays derived once per observed dataset.

    Contact intervals are maximal [start, end) periods during which a pair
    is linked; all dynamic per-iteration statistics are assembled from them
    and the current exposure/recovery vectors.
    """

    def __init__(self, observed: ObservedData):
        observed.validate()
        self.observed = observed
        n = observed.n
        self.n = n
        self.x = observed.covariates
        self.horizon = T = observed.horizon
        self.schedule = observed.schedule

        INF = np.inf
        self.manifest = np.full(n, INF)
        self.sympt = np.zeros(n, dtype=bool)
        self.is_case = np.zeros(n, dtype=bool)
        self.external = np.zeros(n, dtype=bool)
        self.seeded = np.zeros(n, dtype=bool)
        self.obs_exposure = np.full(n, INF)
        self.obs_recovery = np.full(n, INF)
        self.censored_infectious = np.zeros(n, dtype=bool)
        self.hidden_expo: list[int] = []
        self.latency: dict[int, tuple[float, float]] = {}
        self.hidden_rec: list[int] = []
        self.bound: dict[int, tuple[float, float]] = {}

        for c in observed.cases:
            i = c.individual
            self.is_case[i] = True
            self.manifest[i] = c.manifest_time
            self.sympt[i] = c.subtype is Status.IS
            self.external[i] = c.external
            self.seeded[i] = c.initially_infected
            if c.internal:
                if c.exposure_time is not None:
                    self.obs_exposure[i] = c.exposure_time
                else:
                    self.hidden_expo.append(i)
                    self.latency[i] = c.latency or (0.0, c.manifest_time)
            if c.recovery_time is not None:
                self.obs_recovery[i] = c.recovery_time
            elif c.recovery_bound is not None:
                self.hidden_rec.append(i)
                self.bound[i] = c.recovery_bound
            else:
                self.censored_infectious[i] = True

        self.init_non_s = np.array(
            [s is not Status.S for s in observed.initial_statuses])
        self.initial_e_never = np.array(
            [s is Status.E for s in observed.initial_statuses]) & ~self.is_case

        # latest time each individual is known infectious from observed data
        self.known_until = np.full(n, -INF)
        for i in range(n):
            if not np.isfinite(self.manifest[i]):
                continue
            if np.isfinite(self.obs_recovery[i]):
                self.known_until[i] = self.obs_recovery[i]
            elif i in self.bound:
                self.known_until[i] = self.bound[i][0]
            else:
                self.known_until[i] = INF  # censored: infectious through T

        # ---- contact intervals from initial edges + link events ----
        open_at: dict[tuple[int, int], float] = {p: 0.0 for p in observed.initial_edges}
        ints: list[tuple[float, float, int, int]] = []
        for ev in observed.link_events:
            pair = (ev.actor, ev.partner) if ev.actor < ev.partner \
                else (ev.partner, ev.actor)
            if ev.kind is EventKind.LINK_ON:
                open_at[pair] = ev.time
            else:
                start = open_at.pop(pair)
                ints.append((start, ev.time, pair[0], pair[1]))
        for pair, start in open_at.items():
            ints.append((start, T, pair[0], pair[1]))

        self.ci_a = np.array([r[0] for r in ints])
        self.ci_b = np.array([r[1] for r in ints])
        self.ci_i = np.array([r[2] for r in ints], dtype=np.int64)
        self.ci_j = np.array([r[3] for r in ints], dtype=np.int64)

        # phase-split copies (for connected-pair time by phase)
        a_s, b_s, i_s, j_s, k_s = [], [], [], [], []
        for a, b, i, j in ints:
            lo = a
            for dur, phase in self.schedule.segments(a, b) if b > a else ():
                a_s.append(lo)
                b_s.append(lo + dur)
                i_s.append(i)
                j_s.append(j)
                k_s.append(phase)
                lo += dur
        self.ps_a = np.array(a_s)
        self.ps_b = np.array(b_s)
        self.ps_i = np.array(i_s, dtype=np.int64)
        self.ps_j = np.array(j_s, dtype=np.int64)
        self.ps_k = np.array(k_s, dtype=np.int64)

        # owner-oriented rows with infected partners (for pressure integrals)
        owner, nb, oa, ob = [], [], [], []
        for a, b, i, j in ints:
            if np.isfinite(self.manifest[j]):
                owner.append(i); nb.append(j); oa.append(a); ob.append(b)
            if np.isfinite(self.manifest[i]):
                owner.append(j); nb.append(i); oa.append(a); ob.append(b)
        self.ow_owner = np.array(owner, dtype=np.int64)
        self.ow_nb = np.array(nb, dtype=np.int64)
        self.ow_a = np.array(oa)
        self.ow_b = np.array(ob)

        # per-individual contact lists with infected partners
        self.contacts_of: list[list[tuple[int, float, float]]] = [[] for _ in range(n)]
        for k in range(self.ow_owner.shape[0]):
            self.contacts_of[self.ow_owner[k]].append(
                (int(self.ow_nb[k]), float(self.ow_a[k]), float(self.ow_b[k])))

        # link events as arrays for count classification
        self.lev_t = np.array([ev.time for ev in observed.link_events])
        self.lev_i = np.array([ev.actor for ev in observed.link_events], dtype=np.int64)
        self.lev_j = np.array([ev.partner for ev in observed.link_events], dtype=np.int64)
        self.lev_on = np.array([ev.kind is EventKind.LINK_ON
                                for ev in observed.link_events])
        self.lev_phase = np.array([self.schedule.phase_at(t) for t in self.lev_t],
                                  dtype=np.int64) if len(observed.link_events) \
            else np.zeros(0, dtype=np.int64)

        # DARCI interval groups: hidden recoveries sharing a bound end
        groups: dict[float, list[int]] = {}
        for i in self.hidden_rec:
            groups.setdefault(self.bound[i][1], []).append(i)
        self.rec_groups = [
            (min(self.bound[i][0] for i in members), v, sorted(members))
            for v, members in sorted(groups.items())]
        for (u1, v1, _), (u2, v2, _) in zip(self.rec_groups, self.rec_groups[1:]):
            if u2 < v1:
                raise ValueError(
                    f"recovery bound intervals overlap: ({u1}, {v1}] and ({u2}, {v2}]")

        self.ids = np.arange(n)
        self.is_internal = self.is_case & ~self.external & ~self.seeded
        self.has_manifest_event = self.is_case & (self.manifest > 0)

        # with recoveries fully observed the pressure profiles never change
        self.static_profiles = None
        if not self.hidden_rec:
            self.static_profiles = {
                i: self.pressure_profile(i, self.obs_recovery)
                for i in self.hidden_expo}

    def pressure_profile(self, i: int, r_vec: np.ndarray):
        """Infectious-neighbour profile of case i under given recovery times."""
        pieces = []
        for j, a, b in self.contacts_of[i]:
            m_j, r_j = self.manifest[j], r_vec[j]
            if m_j < b and a < r_j:
                pieces.append((max(a, m_j), min(b, r_j), bool(self.sympt[j])))
        return build_pressure_profile(self.latency[i], pieces)

    def initial_exposures(self) -> np.ndarray:
        return self.obs_exposure.copy()

    def initial_recoveries(self) -> np.ndarray:
        return self.obs_recovery.copy()


# ---------------------------------------------------------------------------
# sufficient statistics assembled from contact intervals
# ---------------------------------------------------------------------------

def _overlap(lo1, hi1, lo2, hi2):
    return np.maximum(0.0, np.minimum(hi1, hi2) - np.maximum(lo1, lo2))


def assemble_stats(prep: _Prep, e_vec: np.ndarray, r_vec: np.ndarray) -> SufficientStats:
    """Sufficient statistics of the augmented dataset (vectorised assembly).

    ``e_vec``/``r_vec`` hold exposure/recovery times with +inf for events
    that never happen; equal to the event-log sweep on the reconstructed log.
    """
    n, T = prep.n, prep.horizon
    m = prep.manifest

    leave_s = np.full(n, T)
    leave_s[prep.is_internal] = e_vec[prep.is_internal]
    ext_mask = prep.external
    leave_s[ext_mask] = m[ext_mask]
    leave_s[prep.init_non_s] = 0.0

    n_expo = int(prep.is_internal.sum())
    n_manifest = int((prep.has_manifest_event & ~prep.external).sum())
    n_external = int(prep.external.sum())
    sympt_events = prep.has_manifest_event
    n_sympt = int((sympt_events & prep.sympt).sum())
    n_asympt = int((sympt_events & ~prep.sympt).sum())
    rec_mask = prep.is_case & np.isfinite(r_vec)
    n_rec = int(rec_mask.sum())

    int_e = float((m[prep.is_internal] - e_vec[prep.is_internal]).sum())
    init_e_cases = prep.seeded & prep.is_case & ~prep.external & \
        np.array([s is Status.E for s in prep.observed.initial_statuses])
    int_e += float(m[init_e_cases].sum())
    int_e += float(prep.initial_e_never.sum()) * T
    int_i = float((np.minimum(r_vec[prep.is_case], T) - m[prep.is_case]).sum())

    # pressure integrals over each individual's susceptible period
    ow, nb = prep.ow_owner, prep.ow_nb
    lo = np.maximum(prep.ow_a, m[nb])
    hi = np.minimum(np.minimum(prep.ow_b, r_vec[nb]), leave_s[ow])
    dur = np.maximum(0.0, hi - lo)
    pa = np.zeros(n)
    ps = np.zeros(n)
    s_nb = prep.sympt[nb]
    np.add.at(pa, ow[~s_nb], dur[~s_nb])
    np.add.at(ps, ow[s_nb], dur[s_nb])

    # neighbour counts at the exposure instant
    snap_a = np.zeros(n)
    snap_s = np.zeros(n)
    e_ow = e_vec[ow]
    live = (prep.ow_a < e_ow) & (e_ow < prep.ow_b) & (m[nb] < e_ow) & (e_ow < r_vec[nb])
    np.add.at(snap_a, ow[live & ~s_nb], 1.0)
    np.add.at(snap_s, ow[live & s_nb], 1.0)

    # link event counts by (phase, pair type at event time)
    c_on = np.zeros((2, 3), dtype=np.int64)
    c_off = np.zeros((2, 3), dtype=np.int64)
    if prep.lev_t.shape[0]:
        t = prep.lev_t
        inf_i = (m[prep.lev_i] < t) & (t < r_vec[prep.lev_i])
        inf_j = (m[prep.lev_j] < t) & (t < r_vec[prep.lev_j])
        pt = inf_i.astype(np.int64) + inf_j.astype(np.int64)
        flat = prep.lev_phase * 3 + pt
        on = prep.lev_on
        c_on += np.bincount(flat[on], minlength=6).reshape(2, 3)
        c_off += np.bincount(flat[~on], minlength=6).reshape(2, 3)

    # connected pair-time by (phase, type)
    mc_time = np.zeros((2, 3))
    if prep.ps_a.shape[0]:
        a, b = prep.ps_a, prep.ps_b
        i_, j_ = prep.ps_i, prep.ps_j
        ov_i = _overlap(a, b, m[i_], r_vec[i_])
        ov_j = _overlap(a, b, m[j_], r_vec[j_])
        ov_ij = _overlap(a, b, np.maximum(m[i_], m[j_]),
                         np.minimum(r_vec[i_], r_vec[j_]))
        hh = (b - a) - ov_i - ov_j + ov_ij
        hi_t = ov_i + ov_j - 2.0 * ov_ij
        k = prep.ps_k
        for col, vals in enumerate((hh, hi_t, ov_ij)):
            mc_time[:, col] += np.bincount(k, weights=vals, minlength=2)

    # total pair-time by (phase, type) from the infectious count path
    md_time = _total_pair_time(prep, r_vec) - mc_time

    exposure_time = np.where(np.isfinite(e_vec), e_vec, T)
    manifest_time = np.where(np.isfinite(m), m, T)
    recovery_ok = r_vec

    stats = SufficientStats(
        horizon=T,
        n_exposures=n_expo, n_manifest=n_manifest, n_external=n_external,
        n_sympt=n_sympt, n_asympt=n_asympt, n_recoveries=n_rec,
        exposed_person_time=int_e, infectious_person_time=int_i,
        link_on_counts=c_on, link_off_counts=c_off,
        disconnected_pair_time=md_time, connected_pair_time=mc_time,
        asympt_pressure=pa, sympt_pressure=ps,
        asympt_at_exposure=snap_a, sympt_at_exposure=snap_s,
        exposure_time=exposure_time, manifest_time=manifest_time,
        ever_exposed=prep.is_internal.copy(),
        ever_external=prep.external.copy(),
    )
    return stats


def _total_pair_time(prep: _Prep, r_vec: np.ndarray) -> np.ndarray:
    """Integrals of total pair counts (HH, HI, II) per phase."""
    n, T = prep.n, prep.horizon
    m = prep.manifest
    fin_m = np.isfinite(m) & (m > 0) & (m < T)
    fin_r = np.isfinite(r_vec) & (r_vec < T) & np.isfinite(m)
    n_i0 = int((m == 0).sum())

    bounds = np.array([e for _, e, _ in prep.schedule.intervals[:-1]])
    times = np.concatenate([m[fin_m], r_vec[fin_r], bounds])
    deltas = np.concatenate([np.ones(fin_m.sum()), -np.ones(fin_r.sum()),
                             np.zeros(bounds.shape[0])])
    order = np.argsort(times, kind="stable")
    times, deltas = times[order], deltas[order]
    starts = np.concatenate([[0.0], times])
    ends = np.concatenate([times, [T]])
    n_i = n_i0 + np.concatenate([[0.0], np.cumsum(deltas)])
    n_h = n - n_i
    durs = ends - starts

    ends_sched = np.array([e for _, e, _ in prep.schedule.intervals])
    phase_lbl = np.array([p for _, _, p in prep.schedule.intervals])
    seg_phase = phase_lbl[np.searchsorted(ends_sched, starts, side="right")]

    tot = np.zeros((2, 3))
    weights = [n_h * (n_h - 1) / 2.0, n_h * n_i, n_i * (n_i - 1) / 2.0]
    for col, wv in enumerate(weights):
        tot[:, col] = np.bincount(seg_phase, weights=wv * durs, minlength=2)
    return tot


def reconstruct_log(observed: ObservedData, e_vec: np.ndarray,
                    r_vec: np.ndarray) -> EventLog:
    """Materialise the augmented dataset as a full event log."""
    events = list(observed.link_events)
    for c in observed.cases:
        i = c.individual
        if c.internal:
            events.append(Event(float(e_vec[i]), EventKind.EXPOSURE, i))
        if c.external:
            events.append(Event(c.manifest_time, EventKind.EXTERNAL, i,
                                subtype=c.subtype))
        elif c.manifest_time > 0:
            events.append(Event(c.manifest_time, EventKind.MANIFESTATION, i,
                                subtype=c.subtype))
        if np.isfinite(r_vec[i]):
            events.append(Event(float(r_vec[i]), EventKind.RECOVERY, i))
    events.sort(key=lambda ev: ev.time)
    return EventLog(horizon=observed.horizon,
                    initial_statuses=observed.initial_statuses,
                    initial_edges=observed.initial_edges,
                    schedule=observed.schedule,
                    events=tuple(events))


# ---------------------------------------------------------------------------
# the stochastic-EM loop
# ---------------------------------------------------------------------------

@dataclass
class StemConfig:
    """Iteration plan and imputation limits for one ensemble of runs."""

    burn_in: int = 60
    total_iters: int = 80
    avg_window: int = 20
    n_runs: int = 1
    seed: int = 0
    max_attempts: int = 10_000
    repair_rounds: int = 100
    init: Union[str, Parameters] = "random"
    fixed: Optional[dict] = None
    store_stats: bool = True

    def __post_init__(self):
        if not self.burn_in < self.total_iters:
            raise ValueError("burn_in must be smaller than total_iters")
        if self.avg_window > self.total_iters - self.burn_in:
            raise ValueError("averaging window exceeds post-burn-in length")
        if self.n_runs < 1:
            raise ValueError("need at least one run")


@dataclass
class ParameterChain:
    params: list[Parameters]
    stats: list[Optional[SufficientStats]]
    run_index: int
    n_proposals: int
    n_accepts: int

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepts / self.n_proposals if self.n_proposals else float("nan")


def _random_init(prep: _Prep, rng: np.random.Generator,
                 external: bool) -> Parameters:
    """Diffuse random starting point.

    The latency rate range is kept moderate: the rejection sampler's
    acceptance decays like exp(-phi * latency gap), so a wild initial phi on
    wide latency windows would stall the very first E-step.  One iteration
    later every component is at a data-driven value anyway.
    """
    def log_uniform(lo, hi):
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    d = prep.x.shape[1]
    return Parameters(
        beta=log_uniform(0.05, 0.5), exp_eta=log_uniform(0.5, 2.0),
        phi=log_uniform(0.05, 0.5), gamma=log_uniform(0.05, 0.5),
        p_s=float(rng.uniform(0.3, 0.7)), b_s=np.zeros(d),
        alpha=np.full((2, 3), 1e-3), omega=np.full((2, 3), 1e-2),
        xi=(1e-3 if external else None),
        b_e=(np.zeros(d) if external else None))


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def sanitize_params(params: Parameters) -> Parameters:
    """Replace unidentified (NaN) components with inert placeholders.

    A component is NaN only when the data carry no information about it
    (e.g. the subtype ratio with no symptomatic exposures), in which case it
    cancels out of every hazard and likelihood term, so any finite value is
    exact; boundary-zero placeholders keep rate terms at their defined
    boundary values.
    """
    vec = params.pack()
    if np.isfinite(vec).all():
        return params
    out = params
    if not np.isfinite(params.exp_eta):
        out = out.replace(exp_eta=1.0)
    if not np.isfinite(params.p_s):
        out = out.replace(p_s=0.5)
    vec = out.pack()
    if not np.isfinite(vec).all():
        out = Parameters.unpack(np.where(np.isfinite(vec), vec, 0.0),
                                params.covariate_dim, params.external)
    return out


def _draw_exposures(prep: _Prep, params: Parameters, r_vec: np.ndarray,
                    rng: np.random.Generator, max_attempts: int
                    ) -> tuple[np.ndarray, int, int]:
    """Sample all hidden exposure times given current recovery times.

    The rejection sampler is primary; when a window's acceptance probability
    is so small that the proposal budget is exhausted (hazard mass far ahead
    of the manifestation time), the exact inverse-CDF sampler takes over for
    that individual.  Exhausted proposals still count toward the acceptance
    statistics.
    """
    e_vec = prep.initial_exposures()
    w = np.exp(prep.x @ params.b_s) if prep.x.shape[1] else np.ones(prep.n)
    proposals = accepts = 0
    for i in prep.hidden_expo:
        if prep.static_profiles is not None:
            profile = prep.static_profiles[i]
        else:
            profile = prep.pressure_profile(i, r_vec)
        haz = profile.hazard(params.beta, float(w[i]), params.exp_eta)
        if not haz.total_integral() > 0:
            raise ImputationError(
                f"zero exposure hazard for individual {i} on {prep.latency[i]}")
        # closed-form rejection acceptance probability C / (phi Z_q); skip
        # straight to the exact inverse-CDF draw when the proposal budget
        # cannot plausibly produce an accept
        m_i = prep.manifest[i]
        z_q = -np.expm1(-haz.total_integral())
        a_prob = exposure_norm_constant(haz, params.phi, m_i) / (params.phi * z_q)
        if a_prob * max_attempts >= 5.0:
            try:
                t, att = sample_exposure_time(haz, params.phi, m_i,
                                              rng, max_attempts)
                accepts += 1
            except ImputationError:
                att = max_attempts
                t = sample_exposure_time_direct(haz, params.phi, m_i, rng)
            proposals += att
        else:
            t = sample_exposure_time_direct(haz, params.phi, m_i, rng)
        e_vec[i] = t
    return e_vec, proposals, accepts


def _draw_recoveries(prep: _Prep, params: Parameters, e_vec: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    """Sample all hidden recovery times given current exposure times."""
    r_vec = prep.initial_recoveries()
    if not prep.hidden_rec:
        return r_vec
    m = prep.manifest

    def neighbors_at(p, t):
        return [j for j, a, b in prep.contacts_of[p] if a < t < b]

    for u_star, v, members in prep.rec_groups:
        recs = [Recoverer(q, float(m[q]), bool(prep.sympt[q])) for q in members]
        expo_mask = prep.is_internal & (e_vec > u_star) & (e_vec <= v)
        exposures = [(int(p), float(e_vec[p])) for p in prep.ids[expo_mask]]
        draws = sample_recovery_times(
            (u_star, v), recs, exposures,
            neighbors_at=neighbors_at,
            known_infectious_until=lambda q: float(prep.known_until[q]),
            manifest_time_of=lambda q: float(m[q]),
            is_symptomatic=lambda q: bool(prep.sympt[q]),
            exp_eta=params.exp_eta, gamma=params.gamma, rng=rng)
        for q, t in draws.items():
            r_vec[q] = t
    return r_vec


def _init_recoveries(prep: _Prep, gamma: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Cold-start recovery draws: independent truncated exponentials."""
    r_vec = prep.initial_recoveries()
    for q in prep.hidden_rec:
        u, v = prep.bound[q]
        r_vec[q] = sample_truncated_exp(gamma, u, v, rng)
    return r_vec


def stem_run(observed: ObservedData, config: StemConfig,
             run_index: int = 0, prep: Optional[_Prep] = None) -> ParameterChain:
    """One stochastic-EM run; deterministic given (data, config, run index)."""
    prep = prep or _Prep(observed)
    external = observed.external_active
    fixed = config.fixed or {}

    rng0 = _rng_for(config.seed, run_index, 0)
    if config.init == "random":
        params = _random_init(prep, rng0, external)
    else:
        params = config.init
    for key, val in fixed.items():
        params = params.replace(**{key: val})

    r_vec = _init_recoveries(prep, params.gamma, rng0)
    chain = ParameterChain([], [], run_index, 0, 0)

    for it in range(1, config.total_iters + 1):
        rng_e = _rng_for(config.seed, run_index, it, 1)
        rng_r = _rng_for(config.seed, run_index, it, 2)
        rng_fix = _rng_for(config.seed, run_index, it, 3)
        draw_params = sanitize_params(params)

        for round_ in range(config.repair_rounds + 1):
            try:
                e_vec, props, accs = _draw_exposures(
                    prep, draw_params, r_vec, rng_e, config.max_attempts)
                break
            except ImputationError:
                if not prep.hidden_rec or round_ == config.repair_rounds:
                    raise
                # cold-start incompatibility: refresh the recovery draws
                r_vec = _init_recoveries(prep, draw_params.gamma, rng_fix)
        chain.n_proposals += props
        chain.n_accepts += accs

        for round_ in range(config.repair_rounds + 1):
            try:
                r_vec = _draw_recoveries(prep, draw_params, e_vec, rng_r)
                break
            except ImputationError as err:
                if round_ == config.repair_rounds:
                    raise ImputationError(
                        f"iteration {it}: {err} (after {round_} repair rounds)")
                e_vec, props, accs = _draw_exposures(
                    prep, draw_params, r_vec, rng_fix, config.max_attempts)
                chain.n_proposals += props
                chain.n_accepts += accs

        stats = assemble_stats(prep, e_vec, r_vec)
        try:
            result = fit_complete(stats, prep.x, external=external,
                                  fixed=fixed,
                                  init={"beta": draw_params.beta,
                                        "b_s": draw_params.b_s,
                                        "exp_eta": draw_params.exp_eta})
        except EstimationError as err:
            raise EstimationError(
                f"M-step failed at iteration {it}: {err}", err.diagnostics)
        params = result.params
        chain.params.append(params)
        chain.stats.append(stats if config.store_stats else None)

    return chain


# ---------------------------------------------------------------------------
# averaging and uncertainty
# ---------------------------------------------------------------------------

def _mean_params(param_list: Sequence[Parameters]) -> Parameters:
    ref = param_list[0]
    vecs = np.stack([p.pack() for p in param_list])
    # a component can be NaN on iterations whose augmentation left it
    # unidentified; average the iterations that identify it
    finite = np.isfinite(vecs)
    counts = finite.sum(axis=0)
    sums = np.where(finite, vecs, 0.0).sum(axis=0)
    mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Parameters.unpack(mean, ref.covariate_dim, ref.external)


def average_estimates(chains, mode: str = "within_run", m: int = 20,
                      window: Optional[int] = None) -> Parameters:
    """Average chain iterates into a final estimate.

    ``within_run``: mean of the last ``m`` iterates of a single chain.
    ``across_runs``: mean over the first ``m`` runs of each run's last-
    ``window`` average (window defaults to ``m``); this is the variant whose
    variance the (1 + 0.5/m) rule bounds.
    """
    if mode == "within_run":
        chain = chains if isinstance(chains, ParameterChain) else chains[0]
        if m < 1 or m > len(chain.params):
            raise ValueError(f"cannot average last {m} of {len(chain.params)}")
        return _mean_params(chain.params[-m:])
    if mode == "across_runs":
        if isinstance(chains, ParameterChain) or len(chains) < m:
            raise ValueError(f"need at least {m} runs")
        window = window or m
        per_run = [_mean_params(c.params[-window:]) for c in chains[:m]]
        return _mean_params(per_run)
    raise ValueError(f"unknown averaging mode {mode!r}")


def louis_information(params: Parameters, stats_list: Sequence[SufficientStats],
                      covariates: np.ndarray) -> tuple[np.ndarray, bool]:
    """Observed-data information via the complete-data identity.

    Monte Carlo mean of the negated complete-data Hessians minus the sample
    covariance of the complete-data scores, over augmented samples evaluated
    at a common parameter value.  Returns (matrix, positive_definite).
    """
    if len(stats_list) < 2:
        raise ValueError("need at least two augmented samples")
    params = sanitize_params(params)
    scores = np.stack([score(params, s, covariates) for s in stats_list])
    hessians = [hessian(params, s, covariates) for s in stats_list]
    info = -np.mean(hessians, axis=0) - np.cov(scores.T, ddof=1)
    info = 0.5 * (info + info.T)
    pd = bool(np.linalg.eigvalsh(info).min() > 0)
    return info, pd


def asymptotic_se(info: np.ndarray, m: int, mode: str = "across_runs"
                  ) -> tuple[np.ndarray, np.ndarray, float]:
    """Conservative covariance (1 + 0.5/m) * info^{-1} and its diagonal roots.

    The simulation-noise inflation is bounded by the 50% rule regardless of
    the (unestimated) missing-information fraction; averaging over m (runs
    or iterates) divides that bound by m.  Components with no information
    (boundary estimates of event types never observed) are excluded from the
    inversion and reported as NaN.
    """
    if mode not in ("across_runs", "within_run"):
        raise ValueError(f"unknown mode {mode!r}")
    if m < 1:
        raise ValueError("m must be positive")
    multiplier = 1.0 + 0.5 / m
    live = np.diag(info) > 0
    p = info.shape[0]
    cov = np.full((p, p), np.nan)
    if not live.any():
        raise EstimationError("information matrix has no identified block")
    sub = info[np.ix_(live, live)]
    try:
        inv = np.linalg.inv(sub)
    except np.linalg.LinAlgError as err:
        raise EstimationError(f"information matrix is singular: {err}")
    cov[np.ix_(live, live)] = multiplier * inv
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return se, cov, multiplier


# ---------------------------------------------------------------------------
# sklearn-style front end
# ---------------------------------------------------------------------------

class StochasticEM(BaseEstimator):
    """Stochastic-EM estimator for partially observed epidemic data.

    Runs ``n_runs`` independent chains, averages the last ``avg_window``
    iterates of each and then across runs, and (optionally) derives
    conservative standard errors from the Monte Carlo information matrix.
    """

    def __init__(self, burn_in=60, total_iters=80, avg_window=20, n_runs=1,
                 seed=0, max_attempts=10_000, repair_rounds=100,
                 init="random", fixed=None, compute_se=True):
        self.burn_in = burn_in
        self.total_iters = total_iters
        self.avg_window = avg_window
        self.n_runs = n_runs
        self.seed = seed
        self.max_attempts = max_attempts
        self.repair_rounds = repair_rounds
        self.init = init
        self.fixed = fixed
        self.compute_se = compute_se

    def _config(self) -> StemConfig:
        return StemConfig(
            burn_in=self.burn_in, total_iters=self.total_iters,
            avg_window=self.avg_window, n_runs=self.n_runs, seed=self.seed,
            max_attempts=self.max_attempts, repair_rounds=self.repair_rounds,
            init=self.init, fixed=self.fixed)

    def fit(self, observed: ObservedData) -> "StochasticEM":
        config = self._config()
        prep = _Prep(observed)
        self.chains_ = [stem_run(observed, config, run_index=r, prep=prep)
                        for r in range(config.n_runs)]
        if config.n_runs == 1:
            self.params_ = average_estimates(
                self.chains_[0], "within_run", m=config.avg_window)
        else:
            self.params_ = average_estimates(
                self.chains_, "across_runs", m=config.n_runs,
                window=config.avg_window)
        total_props = sum(c.n_proposals for c in self.chains_)
        total_accs = sum(c.n_accepts for c in self.chains_)
        self.acceptance_rate_ = (total_accs / total_props
                                 if total_props else float("nan"))
        if self.compute_se:
            pool = []
            for c in self.chains_:
                pool.extend(s for s in c.stats[-config.avg_window:] if s is not None)
            if len(pool) >= 2:
                self.information_, self.information_pd_ = louis_information(
                    self.params_, pool, observed.covariates)
                mode = "across_runs" if config.n_runs > 1 else "within_run"
                m = config.n_runs if config.n_runs > 1 else config.avg_window
                self.standard_errors_, self.covariance_, self.se_multiplier_ = \
                    asymptotic_se(self.information_, m, mode)
        return self

    def parameter_names(self) -> list[str]:
        return self.params_.names()
