"""Exact conditional samplers for the stochastic-EM E-step.

Missing exposure times are drawn by rejection from a truncated inhomogeneous
exponential proposal whose step-function rate tracks the individual's
infectious neighbourhood; missing recovery times are drawn per survey
interval with feasibility lower bounds that guarantee every exposed person
keeps at least one possible infection source.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import ImputationError, StepHazard

__all__ = [
    "PressureProfile",
    "build_pressure_profile",
    "build_exposure_hazard",
    "sample_truncated_exp",
    "sample_truncated_inhomo_exp",
    "sample_exposure_time",
    "exposure_norm_constant",
    "exposure_density",
    "proposal_density",
    "Recoverer",
    "sample_recovery_times",
]


class PressureProfile:
    """Step functions of an individual's Ia/Is neighbour counts on an interval.

    Keeps the two subtype counts separate so the sufficient statistics
    (pressure integrals, counts at the exposure instant) can be evaluated at
    any imputed time without replaying the event log.
    """

    __slots__ = ("edges", "n_asympt", "n_sympt", "_cum_a", "_cum_s")

    def __init__(self, edges: np.ndarray, n_asympt: np.ndarray, n_sympt: np.ndarray):
        self.edges = edges
        self.n_asympt = n_asympt
        self.n_sympt = n_sympt
        lens = np.diff(edges)
        self._cum_a = np.concatenate([[0.0], np.cumsum(n_asympt * lens)])
        self._cum_s = np.concatenate([[0.0], np.cumsum(n_sympt * lens)])

    def hazard(self, beta: float, susceptibility: float, exp_eta: float) -> StepHazard:
        levels = beta * susceptibility * (self.n_asympt + exp_eta * self.n_sympt)
        return StepHazard(self.edges, levels)

    def _index(self, t: float) -> int:
        j = int(np.searchsorted(self.edges, t, side="left")) - 1
        return max(j, 0)

    def counts_at(self, t: float) -> tuple[float, float]:
        j = self._index(t)
        return float(self.n_asympt[j]), float(self.n_sympt[j])

    def integrals_to(self, t: float) -> tuple[float, float]:
        """Integrals of the two neighbour counts over (edges[0], t]."""
        j = self._index(t)
        dt = t - self.edges[j]
        return (float(self._cum_a[j] + self.n_asympt[j] * dt),
                float(self._cum_s[j] + self.n_sympt[j] * dt))


def build_pressure_profile(window: tuple[float, float],
                           infectious_contacts: Iterable[tuple[float, float, bool]],
                           ) -> PressureProfile:
    """Profile of infectious-neighbour counts over ``window``.

    ``infectious_contacts`` are (start, end, is_symptomatic) periods during
    which some neighbour of the individual is in contact and infectious;
    periods are clipped to the window.  Change points are exactly the times a
    neighbour link toggles or a contact's infectious status changes.
    """
    lo, hi = window
    if not lo < hi:
        raise ValueError(f"empty window ({lo}, {hi})")
    deltas: dict[float, list[int]] = {}
    base = [0, 0]
    for a, b, sympt in infectious_contacts:
        a2, b2 = max(a, lo), min(b, hi)
        if a2 >= b2:
            continue
        idx = 1 if sympt else 0
        if a2 == lo:
            base[idx] += 1
        else:
            deltas.setdefault(a2, [0, 0])[idx] += 1
        if b2 < hi:
            deltas.setdefault(b2, [0, 0])[idx] -= 1
    edges = [lo]
    n_a, n_s = [base[0]], [base[1]]
    for t in sorted(deltas):
        da, ds = deltas[t]
        edges.append(t)
        n_a.append(n_a[-1] + da)
        n_s.append(n_s[-1] + ds)
    edges.append(hi)
    return PressureProfile(np.asarray(edges), np.asarray(n_a, dtype=float),
                           np.asarray(n_s, dtype=float))


def build_exposure_hazard(window: tuple[float, float],
                          infectious_contacts: Iterable[tuple[float, float, bool]],
                          beta: float, susceptibility: float,
                          exp_eta: float) -> StepHazard:
    """Instantaneous exposure risk over a latency window as a step function."""
    profile = build_pressure_profile(window, infectious_contacts)
    return profile.hazard(beta, susceptibility, exp_eta)


def sample_truncated_exp(rate: float, lower: float, upper: float,
                         rng: np.random.Generator) -> float:
    """Inverse-CDF draw from an exponential truncated to (lower, upper)."""
    if not rate > 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if not lower < upper:
        raise ValueError(f"empty interval ({lower}, {upper})")
    span = upper - lower
    q = -math.expm1(-rate * span)
    while True:
        u = rng.random()
        t = lower - math.log1p(-u * q) / rate
        if lower < t < upper:
            return t


def _interval_probabilities(hazard: StepHazard) -> np.ndarray:
    """Proposal mass per sub-interval (zero-level intervals get zero mass)."""
    lens = hazard.lengths
    surv = np.exp(-hazard.cum_at_edges[:-1])
    mass = surv * (-np.expm1(-hazard.levels * lens))
    return mass


def sample_truncated_inhomo_exp(hazard: StepHazard,
                                rng: np.random.Generator) -> float:
    """Draw from the inhomogeneous exponential with the given step rate,
    truncated to the hazard's support."""
    mass = _interval_probabilities(hazard)
    total = mass.sum()
    if not total > 0.0:
        raise ImputationError("hazard carries no mass on its support")
    c = np.cumsum(mass)
    j = int(np.searchsorted(c, rng.random() * total, side="right"))
    j = min(j, len(mass) - 1)
    return sample_truncated_exp(hazard.levels[j], hazard.edges[j],
                                hazard.edges[j + 1], rng)


def sample_exposure_time(hazard: StepHazard, phi: float, t_manifest: float,
                         rng: np.random.Generator,
                         max_attempts: int = 10_000) -> tuple[float, int]:
    """Rejection-sample an exposure time on the hazard's support.

    Proposals come from the truncated inhomogeneous exponential; a proposal t
    is accepted with probability exp(-phi (t_manifest - t)), which equals one
    exactly when the support's upper end coincides with the manifestation
    time and the proposal lands there.  Returns (time, attempts).
    """
    lo, hi = hazard.support
    if hi > t_manifest:
        raise ValueError("latency window must end at/before manifestation")
    mass = _interval_probabilities(hazard)
    total = mass.sum()
    if not total > 0.0:
        raise ImputationError("hazard carries no mass on its support")
    cum = np.cumsum(mass)
    edges, levels = hazard.edges, hazard.levels
    for attempt in range(1, max_attempts + 1):
        j = int(np.searchsorted(cum, rng.random() * total, side="right"))
        j = min(j, len(mass) - 1)
        t = sample_truncated_exp(levels[j], edges[j], edges[j + 1], rng)
        if rng.random() < math.exp(-phi * (t_manifest - t)):
            return t, attempt
    raise ImputationError(
        f"no acceptance in {max_attempts} proposals (phi={phi}, "
        f"window=({lo}, {hi}), manifest={t_manifest})")


def sample_exposure_time_direct(hazard: StepHazard, phi: float,
                                t_manifest: float,
                                rng: np.random.Generator) -> float:
    """Exact inverse-CDF draw from the conditional exposure-time density.

    Interval masses follow the same closed form as the normalising constant;
    within an interval the density is proportional to exp((phi - level) s),
    invertible analytically.  Used when the rejection sampler's acceptance
    is vanishingly small (a window whose hazard mass sits far before the
    manifestation time), where it would exhaust any proposal budget.
    """
    lo, hi = hazard.support
    if hi > t_manifest:
        raise ValueError("latency window must end at/before manifestation")
    edges, levels = hazard.edges, hazard.levels
    cum = hazard.cum_at_edges
    masses = np.zeros(len(levels))
    for j, lam in enumerate(levels):
        if lam == 0.0:
            continue
        length = edges[j + 1] - edges[j]
        if abs(phi - lam) < 1e-12 * max(phi, lam):
            piece = length
        else:
            piece = math.expm1((phi - lam) * length) / (phi - lam)
        # common factor phi * exp(-phi t_manifest) cancels in normalisation;
        # keep the exp(phi edge) tilt in log space for stability
        masses[j] = lam * math.exp(-cum[j] - phi * (t_manifest - edges[j])) * piece
    total = masses.sum()
    if not total > 0.0:
        raise ImputationError("conditional exposure density carries no mass")
    c = np.cumsum(masses)
    j = int(np.searchsorted(c, rng.random() * total, side="right"))
    j = min(j, len(levels) - 1)
    length = edges[j + 1] - edges[j]
    rate = phi - levels[j]
    u = rng.random()
    if abs(rate) * length < 1e-12:
        s = u * length
    else:
        # CDF on (0, length): (e^{rate s} - 1) / (e^{rate length} - 1)
        s = math.log1p(u * math.expm1(rate * length)) / rate
    return float(min(max(edges[j] + s, edges[j] + 1e-15), edges[j + 1]))


def exposure_norm_constant(hazard: StepHazard, phi: float,
                           t_manifest: float) -> float:
    """Normalising constant of the conditional exposure-time density.

    Evaluated interval by interval; the removable singularity where the
    latency rate equals a hazard level switches to its length-form branch to
    avoid catastrophic cancellation.
    """
    total = 0.0
    edges, levels = hazard.edges, hazard.levels
    cum = hazard.cum_at_edges
    for j, lam in enumerate(levels):
        if lam == 0.0:
            continue
        length = edges[j + 1] - edges[j]
        if abs(phi - lam) < 1e-12 * max(phi, lam):
            piece = length
        else:
            piece = math.expm1((phi - lam) * length) / (phi - lam)
        total += (lam * math.exp(-cum[j]) * phi
                  * math.exp(-phi * (t_manifest - edges[j])) * piece)
    return total


def exposure_density(hazard: StepHazard, phi: float, t_manifest: float,
                     t: float, norm: Optional[float] = None) -> float:
    """Target density of the exposure time at t (0 outside the support)."""
    lo, hi = hazard.support
    if not lo < t < hi:
        return 0.0
    if norm is None:
        norm = exposure_norm_constant(hazard, phi, t_manifest)
    lam = hazard.level_at(t)
    return (lam * math.exp(-hazard.integral_to(t))
            * phi * math.exp(-phi * (t_manifest - t)) / norm)


def proposal_density(hazard: StepHazard, t: float) -> float:
    """Density of the truncated inhomogeneous exponential proposal at t."""
    lo, hi = hazard.support
    if not lo < t < hi:
        return 0.0
    z = -math.expm1(-hazard.total_integral())
    lam = hazard.level_at(t)
    return lam * math.exp(-hazard.integral_to(t)) / z


@dataclass(frozen=True)
class Recoverer:
    """A case whose recovery falls inside the interval being sampled."""

    individual: int
    manifest_time: float
    symptomatic: bool


def sample_recovery_times(interval: tuple[float, float],
                          recoverers: Sequence[Recoverer],
                          exposures: Sequence[tuple[int, float]],
                          neighbors_at: Callable[[int, float], Iterable[int]],
                          known_infectious_until: Callable[[int], float],
                          manifest_time_of: Callable[[int], float],
                          is_symptomatic: Callable[[int], bool],
                          exp_eta: float, gamma: float,
                          rng: np.random.Generator) -> dict[int, float]:
    """Jointly draw recovery times for everyone recovering in (u, v].

    Walking the interval's exposures in time order, any exposed person whose
    potential sources all lie in the recovering set forces one of them
    (chosen with subtype-weighted probability) to stay infectious past the
    exposure; recovery times are then independent truncated exponentials
    above the accumulated feasibility bounds.

    ``known_infectious_until(q)`` must return the latest time q is known to
    be infectious from observed data alone (observed recovery time, lower
    recovery bound, or the horizon for censored cases).
    """
    u, v = interval
    if not u < v:
        raise ValueError(f"empty interval ({u}, {v}]")
    in_q = {r.individual: r for r in recoverers}
    lb = {r.individual: max(u, r.manifest_time) for r in recoverers}

    for p, t_p in sorted(exposures, key=lambda e: e[1]):
        if not u < t_p <= v:
            raise ValueError(f"exposure of {p} at {t_p} outside ({u}, {v}]")
        candidates = []
        constrained = True
        for q in neighbors_at(p, t_p):
            if q == p or not manifest_time_of(q) < t_p:
                continue
            if known_infectious_until(q) > t_p:
                # a known infectious source exists: no constraint needed
                constrained = False
                break
            if q in in_q:
                candidates.append(q)
        if not constrained:
            continue
        if not candidates:
            raise ImputationError(
                f"exposure of {p} at {t_p} has no possible infection source")
        weights = np.array([exp_eta if is_symptomatic(q) else 1.0
                            for q in candidates])
        probs = weights / weights.sum()
        chosen = candidates[rng.choice(len(candidates), p=probs)]
        lb[chosen] = max(lb[chosen], t_p)

    out = {}
    for q, bound in lb.items():
        if bound >= v:
            raise ImputationError(
                f"recovery of {q} is forced past the interval end {v}")
        out[q] = sample_truncated_exp(gamma, bound, v, rng)
    return out
