"""Complete-data sufficient statistics, log-likelihood, score and Hessian.

All time integrals are exact: every integrand is piecewise constant between
events and phase boundaries, so each one is a finite sum of level times
length.  Quadrature appears only in the test suite as an independent oracle.
"""
from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .core import (
    EventKind,
    EventLog,
    Parameters,
    PhaseSchedule,
    Status,
    SufficientStats,
    check_covariates,
)

__all__ = ["sufficient_statistics", "log_likelihood", "log_likelihood_parts",
           "score", "hessian"]

logger = logging.getLogger(__name__)

_S, _E, _IA, _IS, _R = 0, 1, 2, 3, 4
_CODE = {Status.S: _S, Status.E: _E, Status.IA: _IA, Status.IS: _IS, Status.R: _R}


def sufficient_statistics(log: EventLog, covariates: Optional[np.ndarray] = None,
                          schedule: Optional[PhaseSchedule] = None) -> SufficientStats:
    """Single chronological sweep accumulating all counts and time integrals."""
    n = log.n
    if covariates is not None:
        check_covariates(covariates, n)
    schedule = schedule or log.schedule
    horizon = log.horizon

    codes = np.array([_CODE[s] for s in log.initial_statuses], dtype=np.int64)
    nbrs = [set() for _ in range(n)]
    ia_nbr = np.zeros(n, dtype=np.int64)
    is_nbr = np.zeros(n, dtype=np.int64)
    mc = np.zeros(3)  # connected pairs by type (HH, HI, II)
    n_inf = int(((codes == _IA) | (codes == _IS)).sum())

    def infectious(i):
        return codes[i] == _IA or codes[i] == _IS

    for i, j in log.initial_edges:
        nbrs[i].add(j)
        nbrs[j].add(i)
        if codes[j] == _IA:
            ia_nbr[i] += 1
        elif codes[j] == _IS:
            is_nbr[i] += 1
        if codes[i] == _IA:
            ia_nbr[j] += 1
        elif codes[i] == _IS:
            is_nbr[j] += 1
        mc[int(infectious(i)) + int(infectious(j))] += 1

    def flip_class(i, becoming_infectious):
        """Move i's connected pairs between type counts when H/I class flips."""
        nonlocal n_inf
        c = int(ia_nbr[i] + is_nbr[i])
        h = len(nbrs[i]) - c
        if becoming_infectious:
            mc[0] -= h
            mc[1] += h - c
            mc[2] += c
            n_inf += 1
        else:
            mc[2] -= c
            mc[1] += c - h
            mc[0] += h
            n_inf -= 1

    stats = SufficientStats(
        horizon=horizon,
        n_exposures=0, n_manifest=0, n_external=0,
        n_sympt=0, n_asympt=0, n_recoveries=0,
        exposed_person_time=0.0, infectious_person_time=0.0,
        link_on_counts=np.zeros((2, 3), dtype=np.int64),
        link_off_counts=np.zeros((2, 3), dtype=np.int64),
        disconnected_pair_time=np.zeros((2, 3)),
        connected_pair_time=np.zeros((2, 3)),
        asympt_pressure=np.zeros(n), sympt_pressure=np.zeros(n),
        asympt_at_exposure=np.zeros(n), sympt_at_exposure=np.zeros(n),
        exposure_time=np.full(n, horizon), manifest_time=np.full(n, horizon),
        ever_exposed=np.zeros(n, dtype=bool),
        ever_external=np.zeros(n, dtype=bool),
    )
    # initially infectious individuals carry manifestation time 0
    stats.manifest_time[(codes == _IA) | (codes == _IS)] = 0.0

    t_prev = 0.0

    def accumulate(t_next):
        nonlocal t_prev
        if t_next <= t_prev:
            return
        dt = t_next - t_prev
        stats.exposed_person_time += dt * int((codes == _E).sum())
        stats.infectious_person_time += dt * n_inf
        sus = codes == _S
        stats.asympt_pressure[sus] += dt * ia_nbr[sus]
        stats.sympt_pressure[sus] += dt * is_nbr[sus]
        n_h = n - n_inf
        md = np.array([n_h * (n_h - 1) / 2.0, float(n_h * n_inf),
                       n_inf * (n_inf - 1) / 2.0]) - mc
        for dur, phase in schedule.segments(t_prev, t_next):
            stats.connected_pair_time[phase] += dur * mc
            stats.disconnected_pair_time[phase] += dur * md
        t_prev = t_next

    for ev in log.events:
        accumulate(ev.time)
        kind = ev.kind
        i = ev.actor
        if kind is EventKind.EXPOSURE:
            stats.n_exposures += 1
            stats.ever_exposed[i] = True
            stats.exposure_time[i] = ev.time
            stats.asympt_at_exposure[i] = ia_nbr[i]
            stats.sympt_at_exposure[i] = is_nbr[i]
            codes[i] = _E
        elif kind is EventKind.MANIFESTATION or kind is EventKind.EXTERNAL:
            if kind is EventKind.MANIFESTATION:
                stats.n_manifest += 1
            else:
                stats.n_external += 1
                stats.ever_external[i] = True
            stats.manifest_time[i] = ev.time
            sympt = ev.subtype is Status.IS
            if sympt:
                stats.n_sympt += 1
            else:
                stats.n_asympt += 1
            flip_class(i, becoming_infectious=True)
            codes[i] = _IS if sympt else _IA
            arr = is_nbr if sympt else ia_nbr
            for j in nbrs[i]:
                arr[j] += 1
        elif kind is EventKind.RECOVERY:
            stats.n_recoveries += 1
            arr = is_nbr if codes[i] == _IS else ia_nbr
            for j in nbrs[i]:
                arr[j] -= 1
            flip_class(i, becoming_infectious=False)
            codes[i] = _R
        else:  # link event; classify by statuses just before it applies
            j = ev.partner
            pt = int(infectious(i)) + int(infectious(j))
            phase = schedule.phase_at(ev.time)
            if kind is EventKind.LINK_ON:
                stats.link_on_counts[phase, pt] += 1
                nbrs[i].add(j)
                nbrs[j].add(i)
                mc[pt] += 1
                if codes[j] == _IA:
                    ia_nbr[i] += 1
                elif codes[j] == _IS:
                    is_nbr[i] += 1
                if codes[i] == _IA:
                    ia_nbr[j] += 1
                elif codes[i] == _IS:
                    is_nbr[j] += 1
            else:
                stats.link_off_counts[phase, pt] += 1
                nbrs[i].discard(j)
                nbrs[j].discard(i)
                mc[pt] -= 1
                if codes[j] == _IA:
                    ia_nbr[i] -= 1
                elif codes[j] == _IS:
                    is_nbr[i] -= 1
                if codes[i] == _IA:
                    ia_nbr[j] -= 1
                elif codes[i] == _IS:
                    is_nbr[j] -= 1

    accumulate(horizon)
    return stats


def _exposure_weights(params: Parameters, stats: SufficientStats,
                      covariates: np.ndarray):
    """Susceptibility weights e^{x b_S}, pressure totals and exposure snapshots."""
    x = check_covariates(covariates, stats.n)
    if x.shape[1] != params.covariate_dim:
        raise ValueError("covariate dimension does not match b_s")
    w = np.exp(x @ params.b_s) if x.shape[1] else np.ones(stats.n)
    f_total = stats.asympt_pressure + params.exp_eta * stats.sympt_pressure
    snap = stats.asympt_at_exposure + params.exp_eta * stats.sympt_at_exposure
    return x, w, f_total, snap


def _check_rates(params: Parameters) -> None:
    """Rates must be finite and nonnegative; boundary zeros are admissible
    (the likelihood is exactly defined there when the matching count is 0)."""
    for name in ("beta", "exp_eta", "phi", "gamma"):
        v = getattr(params, name)
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be a nonnegative finite rate, got {v}")
    if not 0.0 <= params.p_s <= 1.0:
        raise ValueError(f"p_s must lie in [0, 1], got {params.p_s}")
    for name in ("alpha", "omega"):
        arr = getattr(params, name)
        if not (np.isfinite(arr).all() and (arr >= 0).all()):
            raise ValueError(f"all {name} rates must be nonnegative and finite")
    if params.external and not (np.isfinite(params.xi) and params.xi >= 0):
        raise ValueError(f"xi must be nonnegative, got {params.xi}")


def _count_log(count, rate):
    """count * log(rate) with the conventions 0 log 0 = 0, n log 0 = -inf."""
    count = np.asarray(count, dtype=float)
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(count > 0, count * np.log(rate), 0.0)
    return float(term.sum())


def _count_ratio(count, rate):
    """count / rate with 0/0 = 0 (one-sided boundary derivative)."""
    count = np.asarray(count, dtype=float)
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(count > 0, count / rate, 0.0)
    return out


def log_likelihood_parts(params: Parameters, stats: SufficientStats,
                         covariates: np.ndarray) -> tuple[float, float, float]:
    """(epidemic, network, external) components of the log-likelihood.

    Returns -inf in the epidemic component when the data are impossible under
    the model (an exposure recorded with no infectious neighbour, or a
    positive event count against a zero rate).
    """
    _check_rates(params)
    if stats.n_external and not params.external:
        raise ValueError("log contains external onsets but params lack the "
                         "external block")
    x, w, f_total, snap = _exposure_weights(params, stats, covariates)
    exp_mask = stats.ever_exposed

    epi = (_count_log(stats.n_exposures, params.beta)
           + _count_log(stats.n_recoveries, params.gamma)
           + _count_log(stats.n_manifest, params.phi)
           + _count_log(stats.n_sympt, params.p_s)
           + _count_log(stats.n_asympt, 1.0 - params.p_s))
    if exp_mask.any():
        snap_exposed = snap[exp_mask]
        if np.any(snap_exposed <= 0.0):
            bad = np.flatnonzero(exp_mask)[snap_exposed <= 0.0]
            logger.debug("impossible exposure event(s) for individuals %s: "
                         "no infectious neighbour at exposure time", bad.tolist())
            return -np.inf, 0.0, 0.0
        if x.shape[1]:
            epi += float((x[exp_mask] @ params.b_s).sum())
        epi += float(np.log(snap_exposed).sum())
    epi -= params.beta * float(w @ f_total)
    epi -= params.gamma * stats.infectious_person_time
    epi -= params.phi * stats.exposed_person_time

    # undetermined rates (NaN from 0/0 fits) multiply zero exposure time
    surv_on = np.where(stats.disconnected_pair_time > 0,
                       params.alpha * stats.disconnected_pair_time, 0.0)
    surv_off = np.where(stats.connected_pair_time > 0,
                        params.omega * stats.connected_pair_time, 0.0)
    net = (_count_log(stats.link_on_counts, params.alpha)
           + _count_log(stats.link_off_counts, params.omega)
           - float(surv_on.sum()) - float(surv_off.sum()))

    ext = 0.0
    if params.external:
        w_e = np.exp(x @ params.b_e) if x.shape[1] else np.ones(stats.n)
        ext = (_count_log(stats.n_external, params.xi)
               - params.xi * float(stats.manifest_time @ w_e))
        if x.shape[1] and stats.ever_external.any():
            ext += float((x[stats.ever_external] @ params.b_e).sum())
    return float(epi), net, float(ext)


def log_likelihood(params: Parameters, stats: SufficientStats,
                   covariates: np.ndarray) -> float:
    epi, net, ext = log_likelihood_parts(params, stats, covariates)
    return epi + net + ext


def score(params: Parameters, stats: SufficientStats,
          covariates: np.ndarray) -> np.ndarray:
    """Analytic gradient of the log-likelihood, packed in Parameters order.

    At admissible boundary points (zero rate with zero count) the one-sided
    derivative is returned.
    """
    _check_rates(params)
    x, w, f_total, snap = _exposure_weights(params, stats, covariates)
    exp_mask = stats.ever_exposed
    d = x.shape[1]

    g_beta = float(_count_ratio(stats.n_exposures, params.beta)) - float(w @ f_total)
    if d:
        g_bs = (x[exp_mask].sum(axis=0)
                - params.beta * (w * f_total) @ x)
    else:
        g_bs = np.zeros(0)
    denom = snap[exp_mask]
    g_eta = (float((stats.sympt_at_exposure[exp_mask] / denom).sum())
             - params.beta * float(w @ stats.sympt_pressure))
    g_phi = float(_count_ratio(stats.n_manifest, params.phi)) \
        - stats.exposed_person_time
    g_gamma = float(_count_ratio(stats.n_recoveries, params.gamma)) \
        - stats.infectious_person_time
    g_ps = float(_count_ratio(stats.n_sympt, params.p_s)) \
        - float(_count_ratio(stats.n_asympt, 1.0 - params.p_s))
    g_alpha = _count_ratio(stats.link_on_counts, params.alpha) \
        - stats.disconnected_pair_time
    g_omega = _count_ratio(stats.link_off_counts, params.omega) \
        - stats.connected_pair_time

    parts = [[g_beta, g_eta, g_phi, g_gamma, g_ps], g_bs,
             g_alpha.ravel(), g_omega.ravel()]
    if params.external:
        w_e = np.exp(x @ params.b_e) if d else np.ones(stats.n)
        risk = stats.manifest_time * w_e
        g_xi = float(_count_ratio(stats.n_external, params.xi)) - float(risk.sum())
        parts.append([g_xi])
        if d:
            parts.append(x[stats.ever_external].sum(axis=0)
                         - params.xi * risk @ x)
        else:
            parts.append(np.zeros(0))
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def hessian(params: Parameters, stats: SufficientStats, covariates: np.ndarray,
            method: str = "analytic") -> np.ndarray:
    """Hessian of the complete-data log-likelihood at ``params``.

    ``analytic`` uses the closed-form second derivatives; ``fd_score`` takes
    central finite differences of the analytic score (the two are
    cross-checked in the test suite).
    """
    if method == "fd_score":
        return _hessian_fd(params, stats, covariates)
    if method != "analytic":
        raise ValueError(f"unknown method {method!r}")

    _check_rates(params)
    x, w, f_total, snap = _exposure_weights(params, stats, covariates)
    exp_mask = stats.ever_exposed
    d = x.shape[1]
    p = 17 + d + ((1 + d) if params.external else 0)
    h = np.zeros((p, p))
    i_beta, i_eta, i_phi, i_gamma, i_ps = 0, 1, 2, 3, 4
    sl_bs = slice(5, 5 + d)
    sl_alpha = slice(5 + d, 11 + d)
    sl_omega = slice(11 + d, 17 + d)

    h[i_beta, i_beta] = -_count_ratio(stats.n_exposures, params.beta ** 2)
    h[i_eta, i_eta] = -float(
        ((stats.sympt_at_exposure[exp_mask] / snap[exp_mask]) ** 2).sum())
    h[i_beta, i_eta] = h[i_eta, i_beta] = -float(w @ stats.sympt_pressure)
    h[i_phi, i_phi] = -_count_ratio(stats.n_manifest, params.phi ** 2)
    h[i_gamma, i_gamma] = -_count_ratio(stats.n_recoveries, params.gamma ** 2)
    h[i_ps, i_ps] = (-_count_ratio(stats.n_sympt, params.p_s ** 2)
                     - _count_ratio(stats.n_asympt, (1.0 - params.p_s) ** 2))
    if d:
        wf = w * f_total
        h[sl_bs, i_beta] = h[i_beta, sl_bs] = -(wf @ x)
        h[sl_bs, sl_bs] = -params.beta * (x.T * wf) @ x
        ws = w * stats.sympt_pressure
        h[sl_bs, i_eta] = h[i_eta, sl_bs] = -params.beta * (ws @ x)
    h[sl_alpha, sl_alpha] = np.diag(
        -_count_ratio(stats.link_on_counts, params.alpha ** 2).ravel())
    h[sl_omega, sl_omega] = np.diag(
        -_count_ratio(stats.link_off_counts, params.omega ** 2).ravel())
    if params.external:
        i_xi = 17 + d
        sl_be = slice(18 + d, 18 + 2 * d)
        w_e = np.exp(x @ params.b_e) if d else np.ones(stats.n)
        risk = stats.manifest_time * w_e
        h[i_xi, i_xi] = -_count_ratio(stats.n_external, params.xi ** 2)
        if d:
            h[sl_be, i_xi] = h[i_xi, sl_be] = -(risk @ x)
            h[sl_be, sl_be] = -params.xi * (x.T * risk) @ x
    return h


def _hessian_fd(params: Parameters, stats: SufficientStats,
                covariates: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    theta = params.pack()
    d = params.covariate_dim
    ext = params.external
    p = theta.shape[0]
    h = np.zeros((p, p))
    for k in range(p):
        step = rel_step * max(abs(theta[k]), 1e-3)
        up, dn = theta.copy(), theta.copy()
        up[k] += step
        dn[k] -= step
        s_up = score(Parameters.unpack(up, d, ext), stats, covariates)
        s_dn = score(Parameters.unpack(dn, d, ext), stats, covariates)
        h[:, k] = (s_up - s_dn) / (2.0 * step)
    return 0.5 * (h + h.T)
