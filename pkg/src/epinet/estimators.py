"""Complete-data maximum likelihood: closed forms and iterative solvers.

The exposure block (baseline rate, susceptibility coefficients, subtype
ratio) has no closed form; it is maximised by cycling a rate update, an
offset Poisson regression and a bracketed one-dimensional root solve.  Every
sub-step is an exact coordinate maximisation, so the complete-data
log-likelihood is non-decreasing across cycles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator

from .core import (
    EstimationError,
    EventLog,
    PAIR_NAMES,
    Parameters,
    SufficientStats,
    check_covariates,
)
from .likelihood import log_likelihood, score, sufficient_statistics

__all__ = ["closed_form_mles", "poisson_offset_fit", "solve_beta_bS_eta",
           "solve_external", "fit_complete", "FitResult", "CompleteDataMLE"]


def closed_form_mles(stats: SufficientStats) -> tuple[dict, list[str]]:
    """MLEs with closed forms: phi, p_s, gamma and the twelve link rates.

    Returns (estimates, flags).  A zero numerator over a positive denominator
    is a flagged boundary estimate of 0; a 0/0 component is reported as NaN
    with an ``*_undetermined`` flag; a positive count over a zero exposure
    time is impossible and raises.
    """
    flags: list[str] = []

    def ratio(name, num, den):
        if den > 0:
            if num == 0:
                flags.append(f"{name}_boundary_zero")
            return num / den
        if num > 0:
            raise EstimationError(
                f"{name}: {num} events but zero exposure time", {"name": name})
        flags.append(f"{name}_undetermined")
        return np.nan

    est = {
        "phi": ratio("phi", stats.n_manifest, stats.exposed_person_time),
        "p_s": ratio("p_s", stats.n_sympt, stats.n_infectious),
        "gamma": ratio("gamma", stats.n_recoveries, stats.infectious_person_time),
        "alpha": np.empty((2, 3)),
        "omega": np.empty((2, 3)),
    }
    for k in (0, 1):
        for pt, ab in enumerate(PAIR_NAMES):
            est["alpha"][k, pt] = ratio(f"alpha_{ab}{k}",
                                        stats.link_on_counts[k, pt],
                                        stats.disconnected_pair_time[k, pt])
            est["omega"][k, pt] = ratio(f"omega_{ab}{k}",
                                        stats.link_off_counts[k, pt],
                                        stats.connected_pair_time[k, pt])
    return est, flags


def poisson_offset_fit(y: np.ndarray, design: np.ndarray, offsets: np.ndarray,
                       tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Newton/IRLS fit of a Poisson regression with per-row offsets.

    Maximises sum_i [y_i (x_i b + o_i) - exp(x_i b + o_i)]; converged when
    every score component is below ``tol`` in absolute value.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(design, dtype=float)
    o = np.asarray(offsets, dtype=float)
    n, d = x.shape
    if d == 0:
        return np.zeros(0)
    if y.shape != (n,) or o.shape != (n,):
        raise ValueError("y, design and offsets must agree in length")
    if not np.all(y >= 0):
        raise ValueError("responses must be nonnegative")
    if not y.any():
        raise EstimationError("all responses zero: Poisson MLE diverges",
                              {"n": n})
    if np.linalg.matrix_rank(x) < d:
        raise EstimationError("design matrix is rank deficient", {"d": d})

    b = np.zeros(d)

    def objective(bv):
        lin = x @ bv + o
        return float(y @ lin - np.exp(lin).sum())

    obj = objective(b)
    for _ in range(max_iter):
        mu = np.exp(x @ b + o)
        g = x.T @ (y - mu)
        if np.max(np.abs(g)) < tol:
            return b
        h = (x.T * mu) @ x
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            raise EstimationError("singular IRLS weighting (separation?)",
                                  {"b": b.tolist()})
        # step halving keeps the objective monotone
        scale = 1.0
        for _ in range(50):
            cand = b + scale * step
            val = objective(cand)
            if np.isfinite(val) and val >= obj - 1e-12:
                b, obj = cand, val
                break
            scale *= 0.5
        else:
            raise EstimationError("IRLS diverged (no admissible step)",
                                  {"b": b.tolist(), "score": g.tolist()})
    mu = np.exp(x @ b + o)
    g = x.T @ (y - mu)
    if np.max(np.abs(g)) < tol:
        return b
    raise EstimationError("IRLS did not converge",
                          {"b": b.tolist(), "score": g.tolist()})


@dataclass
class ExposureBlockFit:
    beta: float
    b_s: np.ndarray
    exp_eta: float
    iterations: int
    residuals: np.ndarray   # score components for (beta, b_S, exp_eta)
    flags: list[str] = field(default_factory=list)


def _eta_root(snap_a, snap_s, rhs, u0):
    """Solve sum_i s_i / (a_i + s_i u) = rhs for u > 0 (monotone decreasing)."""
    def g(u):
        return float((snap_s / (snap_a + snap_s * u)).sum()) - rhs

    if rhs <= 0:
        # no symptomatic pressure anywhere: score positive for all u
        return np.inf
    hi = max(u0, 1.0)
    for _ in range(200):
        if g(hi) < 0:
            break
        hi *= 2.0
    else:
        return np.inf
    lo = min(u0, 1.0)
    for _ in range(200):
        if g(lo) > 0:
            break
        lo /= 2.0
        if lo < 1e-300:
            return 0.0
    if lo >= hi:
        lo = hi / 4.0
    return float(brentq(g, lo, hi, xtol=1e-14, rtol=1e-14))


def solve_beta_bS_eta(stats: SufficientStats, covariates: np.ndarray,
                      init: Optional[dict] = None,
                      tol: float = 1e-8, max_iter: int = 500,
                      residual_tol: float = 1e-6,
                      fixed_beta: Optional[float] = None,
                      fixed_b_s: Optional[np.ndarray] = None,
                      fixed_exp_eta: Optional[float] = None,
                      trace: Optional[list] = None) -> ExposureBlockFit:
    """Iterative MLE of the exposure block (baseline rate, b_S, subtype ratio).

    ``fixed_*`` pin components (used when profiling a subset of parameters);
    pinned components are excluded from the residual convergence check.
    ``trace`` (a list, when given) collects the (beta, b_s, exp_eta) iterates.
    """
    x = check_covariates(covariates, stats.n)
    d = x.shape[1]
    if stats.n_exposures == 0:
        raise EstimationError("no exposure events: beta/b_S/exp_eta not estimable")
    exp_mask = stats.ever_exposed
    pa, ps = stats.asympt_pressure, stats.sympt_pressure
    snap_a = stats.asympt_at_exposure[exp_mask]
    snap_s = stats.sympt_at_exposure[exp_mask]
    if np.any(snap_a + snap_s <= 0):
        raise EstimationError("exposure event with no infectious neighbour")

    flags: list[str] = []
    eta_identified = bool(snap_s.any() or ps.any()) and fixed_exp_eta is None
    if fixed_exp_eta is None and not eta_identified:
        flags.append("exp_eta_unidentified")

    init = init or {}
    u = float(init.get("exp_eta", 1.0)) if fixed_exp_eta is None \
        else float(fixed_exp_eta)
    if not np.isfinite(u) or u < 0:
        u = 1.0
    b = np.asarray(init.get("b_s", np.zeros(d)), dtype=float)
    if fixed_b_s is not None:
        b = np.asarray(fixed_b_s, dtype=float)
    if b.shape != (d,) or not np.isfinite(b).all():
        b = np.zeros(d)
    f1 = pa + u * ps
    beta = float(init.get("beta", stats.n_exposures / f1.sum())) \
        if fixed_beta is None else float(fixed_beta)
    if not np.isfinite(beta) or beta <= 0:
        beta = stats.n_exposures / f1.sum()

    y = exp_mask.astype(float)

    def residual_vec(beta_, b_, u_):
        w = np.exp(x @ b_) if d else np.ones(stats.n)
        f = pa + u_ * ps
        r_beta = stats.n_exposures / beta_ - float(w @ f)
        r_bs = (x[exp_mask].sum(axis=0) - beta_ * (w * f) @ x) if d else np.zeros(0)
        if eta_identified and np.isfinite(u_):
            r_eta = float((snap_s / (snap_a + snap_s * u_)).sum()) \
                - beta_ * float(w @ ps)
        else:
            r_eta = 0.0
        return np.concatenate([[r_beta], r_bs, [r_eta]])

    last = None
    eta_boundary = False
    for it in range(1, max_iter + 1):
        w = np.exp(x @ b) if d else np.ones(stats.n)
        f = pa + u * ps

        if fixed_beta is None:
            beta = stats.n_exposures / float(w @ f)

        if d and fixed_b_s is None:
            usable = f > 0
            if np.any(~usable & exp_mask):
                raise EstimationError(
                    "exposed individual with zero accumulated pressure")
            offset = np.log(beta) + np.log(f[usable])
            b = poisson_offset_fit(y[usable], x[usable], offset)
            w = np.exp(x @ b)

        if eta_identified:
            rhs = beta * float(w @ ps)
            u_new = _eta_root(snap_a, snap_s, rhs, u)
            eta_boundary = False
            if u_new == 0.0:
                flags.append("exp_eta_boundary_zero")
                eta_boundary = True
            if np.isinf(u_new):
                flags.append("exp_eta_boundary_inf")
                eta_boundary = True
                u_new = u  # keep last finite iterate
            u = u_new

        if trace is not None:
            trace.append((beta, b.copy(), u))
        vec = np.concatenate([[beta], b, [u]])
        res = residual_vec(beta, b, u)
        mask = np.ones(res.shape[0], dtype=bool)
        if fixed_beta is not None:
            mask[0] = False
        if fixed_b_s is not None:
            mask[1:1 + d] = False
        if not eta_identified or eta_boundary:
            mask[-1] = False
        if last is not None:
            rel = np.max(np.abs(vec - last) / np.maximum(np.abs(last), 1e-12))
            if rel < tol and np.max(np.abs(res[mask]), initial=0.0) < residual_tol:
                if fixed_exp_eta is None and not eta_identified:
                    u = np.nan
                return ExposureBlockFit(beta, b, u, it, res,
                                        sorted(set(flags)))
        last = vec

    raise EstimationError(
        "beta/b_S/exp_eta solver did not converge",
        {"beta": beta, "b_s": b.tolist(), "exp_eta": u,
         "residuals": residual_vec(beta, b, u).tolist()})


@dataclass
class ExternalBlockFit:
    xi: float
    b_e: np.ndarray
    iterations: int
    residuals: np.ndarray
    flags: list[str] = field(default_factory=list)


def solve_external(stats: SufficientStats, covariates: np.ndarray,
                   init: Optional[dict] = None,
                   tol: float = 1e-8, max_iter: int = 500,
                   residual_tol: float = 1e-6) -> ExternalBlockFit:
    """MLE of the external onset block; independent of all other parameters.

    Rows with zero at-risk time (individuals infectious from time 0) are
    skipped in the regression; their response is necessarily zero.
    """
    x = check_covariates(covariates, stats.n)
    d = x.shape[1]
    n_ext = stats.n_external
    t_risk = stats.manifest_time
    z = stats.ever_external.astype(float)

    if n_ext == 0:
        return ExternalBlockFit(0.0, np.full(d, np.nan), 0,
                                np.zeros(1 + d), ["external_boundary_zero"])

    init = init or {}
    b_e = np.asarray(init.get("b_e", np.zeros(d)), dtype=float)
    usable = t_risk > 0
    if np.any(~usable & stats.ever_external):
        raise EstimationError("external onset with zero at-risk time")

    xi = n_ext / float(t_risk @ (np.exp(x @ b_e) if d else np.ones(stats.n)))
    if d == 0:
        return ExternalBlockFit(xi, b_e, 1, np.zeros(1), [])

    last = None
    for it in range(1, max_iter + 1):
        w_e = np.exp(x @ b_e)
        xi = n_ext / float(t_risk @ w_e)
        offset = np.log(xi) + np.log(t_risk[usable])
        b_e = poisson_offset_fit(z[usable], x[usable], offset)

        w_e = np.exp(x @ b_e)
        risk = t_risk * w_e
        res = np.concatenate([[n_ext / xi - risk.sum()],
                              x[stats.ever_external].sum(axis=0) - xi * risk @ x])
        vec = np.concatenate([[xi], b_e])
        if last is not None:
            rel = np.max(np.abs(vec - last) / np.maximum(np.abs(last), 1e-12))
            if rel < tol and np.max(np.abs(res)) < residual_tol:
                return ExternalBlockFit(xi, b_e, it, res, [])
        last = vec
    raise EstimationError("external block solver did not converge",
                          {"xi": xi, "b_e": b_e.tolist()})


@dataclass
class FitResult:
    params: Parameters
    flags: list[str]
    score_residuals: np.ndarray
    iterations: int
    log_likelihood: float


def fit_complete(data: Union[EventLog, SufficientStats], covariates: np.ndarray,
                 external: Union[bool, str] = "auto",
                 tol: float = 1e-8, max_iter: int = 500,
                 init: Optional[dict] = None,
                 fixed: Optional[dict] = None) -> FitResult:
    """Full complete-data MLE from a log or precomputed sufficient statistics.

    ``fixed`` may pin any of beta/b_s/exp_eta/phi/gamma/p_s/alpha/omega at
    given values (those components are then not estimated).  The external
    block is fitted when external onsets are present (or ``external=True``).
    """
    stats = data if isinstance(data, SufficientStats) \
        else sufficient_statistics(data, covariates)
    x = check_covariates(covariates, stats.n)
    fixed = fixed or {}
    if external == "auto":
        external = stats.n_external > 0

    cf, flags = closed_form_mles(stats)
    for key in ("phi", "gamma", "p_s", "alpha", "omega"):
        if key in fixed:
            cf[key] = fixed[key]

    block = solve_beta_bS_eta(
        stats, x, init=init, tol=tol, max_iter=max_iter,
        fixed_beta=fixed.get("beta"), fixed_b_s=fixed.get("b_s"),
        fixed_exp_eta=fixed.get("exp_eta"))
    flags += block.flags
    exp_eta = block.exp_eta

    xi = b_e = None
    iterations = block.iterations
    if external:
        ext = solve_external(stats, x, tol=tol, max_iter=max_iter)
        flags += ext.flags
        xi, b_e = ext.xi, ext.b_e
        iterations += ext.iterations

    params = Parameters(
        beta=block.beta, exp_eta=exp_eta, phi=cf["phi"], gamma=cf["gamma"],
        p_s=cf["p_s"], b_s=block.b_s, alpha=cf["alpha"], omega=cf["omega"],
        xi=xi, b_e=b_e)

    # undetermined (0/0) components never enter the likelihood; evaluate the
    # residuals and the objective with them zeroed, then mark them NaN
    vec = params.pack()
    undetermined = ~np.isfinite(vec)
    safe = Parameters.unpack(np.where(undetermined, 0.0, vec),
                             params.covariate_dim, params.external)
    residuals = score(safe, stats, x)
    residuals[undetermined] = np.nan
    ll = log_likelihood(safe, stats, x)
    return FitResult(params, flags, residuals, iterations, ll)


class CompleteDataMLE(BaseEstimator):
    """Complete-data maximum-likelihood estimator with a fit/score interface.

    Parameters
    ----------
    external : "auto", True or False
        Whether to fit the external onset block; "auto" switches it on when
        the log contains external onset events.
    tol, max_iter : float, int
        Convergence settings for the iterative exposure-block solver.
    """

    def __init__(self, external="auto", tol=1e-8, max_iter=500):
        self.external = external
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, log: EventLog, covariates: np.ndarray) -> "CompleteDataMLE":
        result = fit_complete(log, covariates, external=self.external,
                              tol=self.tol, max_iter=self.max_iter)
        self.stats_ = (log if isinstance(log, SufficientStats)
                       else sufficient_statistics(log, covariates))
        self.params_ = result.params
        self.flags_ = result.flags
        self.score_residuals_ = result.score_residuals
        self.n_iter_ = result.iterations
        self.log_likelihood_ = result.log_likelihood
        return self

    def score(self, log: Optional[EventLog] = None,
              covariates: Optional[np.ndarray] = None) -> float:
        """Complete-data log-likelihood of the fitted parameters."""
        if log is None:
            return self.log_likelihood_
        stats = sufficient_statistics(log, covariates)
        return log_likelihood(self.params_, stats, covariates)
