"""Command-line surface: simulate, fit-complete, fit-stem, variance.

Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical failure
(diagnostics as JSON on stderr for 2/3).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import EstimationError, EventLogError, ImputationError
from .estimators import CompleteDataMLE
from .io import (
    params_from_flat,
    read_covariates,
    read_event_log,
    read_observed_spec,
    read_sim_config,
    write_covariates,
    write_estimates,
    write_event_log,
)
from .simulate import simulate, simulate_nonextinct
from .stem import (
    StochasticEM,
    louis_information,
    asymptotic_se,
    observe,
)

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_ERROR)


def _fail(code: int, kind: str, message: str, **detail):
    json.dump({"error": kind, "message": message, **detail}, sys.stderr)
    sys.stderr.write("\n")
    sys.exit(code)


def _cmd_simulate(args):
    params, config = read_sim_config(args.config)
    if args.min_attack_rate > 0:
        result = simulate_nonextinct(params, config, seed=args.seed,
                                     min_attack_rate=args.min_attack_rate,
                                     max_retries=args.max_retries)
    else:
        result = simulate(params, config, np.random.default_rng(args.seed))
    write_event_log(result.log, args.out)
    if args.covariates_out:
        write_covariates(result.covariates, args.covariates_out)
    print(json.dumps({
        "events": len(result.log.events),
        "attack_rate": result.attack_rate,
        "extinct": result.extinct,
    }))


def _cmd_fit_complete(args):
    log = read_event_log(args.events)
    x = read_covariates(args.covariates)
    external = "auto"
    if args.external_labels:
        with open(args.external_labels) as fh:
            labels = json.load(fh)
        declared = {int(i) for i in labels.get("external", [])}
        from .likelihood import sufficient_statistics
        stats = sufficient_statistics(log, x)
        actual = set(np.flatnonzero(stats.ever_external).tolist())
        if declared != actual:
            _fail(DATA_ERROR, "label_mismatch",
                  "external labels disagree with external onset events",
                  declared=sorted(declared), from_events=sorted(actual))
        external = True
    est = CompleteDataMLE(external=external).fit(log, x)
    write_estimates(args.out, est.params_, extra={
        "flags": est.flags_,
        "score_residuals": {name: float(r) for name, r in
                            zip(est.params_.names(), est.score_residuals_)},
        "log_likelihood": est.log_likelihood_,
        "n_iter": est.n_iter_,
    })
    print(json.dumps({"log_likelihood": est.log_likelihood_,
                      "flags": est.flags_}))


def _cmd_fit_stem(args):
    log = read_event_log(args.events)
    x = read_covariates(args.covariates)
    spec = read_observed_spec(args.observed_spec)
    observed = observe(log, x, spec)
    est = StochasticEM(burn_in=args.burn_in, total_iters=args.iters,
                       avg_window=args.window, n_runs=args.runs,
                       seed=args.seed).fit(observed)
    extra = {
        "n_runs": args.runs,
        "acceptance_rate": est.acceptance_rate_,
    }
    if hasattr(est, "standard_errors_"):
        extra["standard_errors"] = {
            name: float(s) for name, s in
            zip(est.params_.names(), est.standard_errors_)}
        extra["se_multiplier"] = est.se_multiplier_
        extra["information_positive_definite"] = est.information_pd_
    write_estimates(args.out, est.params_, extra=extra)
    if args.dump_chains:
        _dump_chains(Path(args.dump_chains), est, observed)
    print(json.dumps({"acceptance_rate": est.acceptance_rate_,
                      "runs": args.runs}))


_STAT_FIELDS = [
    "n_exposures", "n_manifest", "n_external", "n_sympt", "n_asympt",
    "n_recoveries", "exposed_person_time", "infectious_person_time",
    "link_on_counts", "link_off_counts", "disconnected_pair_time",
    "connected_pair_time", "asympt_pressure", "sympt_pressure",
    "asympt_at_exposure", "sympt_at_exposure", "exposure_time",
    "manifest_time", "ever_exposed", "ever_external",
]


def _dump_chains(outdir: Path, est: StochasticEM, observed) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    for chain in est.chains_:
        arrays = {
            "params": np.stack([p.pack() for p in chain.params]),
            "covariates": observed.covariates,
            "horizon": np.array(observed.horizon),
            "covariate_dim": np.array(observed.covariates.shape[1]),
            "external": np.array(observed.external_active),
        }
        stats = [s for s in chain.stats if s is not None]
        for name in _STAT_FIELDS:
            arrays[f"stats_{name}"] = np.stack(
                [np.asarray(getattr(s, name)) for s in stats])
        np.savez_compressed(outdir / f"run_{chain.run_index:03d}.npz", **arrays)


def _load_chain_stats(path: Path):
    from .core import SufficientStats

    with np.load(path) as data:
        horizon = float(data["horizon"])
        x = data["covariates"]
        n_iters = data["params"].shape[0]
        out = []
        for s in range(data["stats_n_exposures"].shape[0]):
            kw = {}
            for name in _STAT_FIELDS:
                arr = data[f"stats_{name}"][s]
                kw[name] = arr.item() if arr.ndim == 0 else arr
            out.append(SufficientStats(horizon=horizon, **kw))
    return out, x, n_iters


def _cmd_variance(args):
    with open(args.at) as fh:
        estimate = json.load(fh)
    params = params_from_flat(estimate["estimates"])
    stats_pool = []
    x = None
    files = sorted(Path(args.chains).glob("run_*.npz"))
    if not files:
        _fail(DATA_ERROR, "no_chains", f"no run_*.npz under {args.chains}")
    for path in files:
        stats, x, _ = _load_chain_stats(path)
        stats_pool.extend(stats[-args.window:])
    info, pd = louis_information(params, stats_pool, x)
    se, cov, mult = asymptotic_se(info, m=args.m, mode="across_runs")
    payload = {
        "schema_version": 1,
        "standard_errors": {n: float(s)
                            for n, s in zip(params.names(), se)},
        "multiplier": mult,
        "positive_definite": pd,
        "information": info.tolist(),
        "covariance": cov.tolist(),
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(json.dumps({"positive_definite": pd, "multiplier": mult}))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epinet",
                description="Simulation and inference for stochastic "
                            "epidemics on dynamic contact networks")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the exact simulator")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--covariates-out")
    sim.add_argument("--min-attack-rate", type=float, default=0.0)
    sim.add_argument("--max-retries", type=int, default=100)
    sim.set_defaults(func=_cmd_simulate)

    fc = sub.add_parser("fit-complete", help="complete-data MLEs")
    fc.add_argument("--events", required=True)
    fc.add_argument("--covariates", required=True)
    fc.add_argument("--external-labels")
    fc.add_argument("--out", required=True)
    fc.set_defaults(func=_cmd_fit_complete)

    fs = sub.add_parser("fit-stem", help="stochastic-EM fit on partial data")
    fs.add_argument("--events", required=True)
    fs.add_argument("--covariates", required=True)
    fs.add_argument("--observed-spec", required=True)
    fs.add_argument("--runs", type=int, default=1)
    fs.add_argument("--iters", type=int, default=80)
    fs.add_argument("--burn-in", type=int, default=60)
    fs.add_argument("--window", type=int, default=20)
    fs.add_argument("--seed", type=int, required=True)
    fs.add_argument("--out", required=True)
    fs.add_argument("--dump-chains")
    fs.set_defaults(func=_cmd_fit_stem)

    var = sub.add_parser("variance", help="Louis information and SEs")
    var.add_argument("--chains", required=True)
    var.add_argument("--at", required=True)
    var.add_argument("--out", required=True)
    var.add_argument("--m", type=int, default=10)
    var.add_argument("--window", type=int, default=20)
    var.set_defaults(func=_cmd_variance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (EventLogError, ValueError) as err:
        _fail(DATA_ERROR, type(err).__name__, str(err))
    except (EstimationError, ImputationError, np.linalg.LinAlgError) as err:
        _fail(NUMERIC_ERROR, type(err).__name__, str(err))
    except FileNotFoundError as err:
        _fail(USAGE_ERROR, "file_not_found", str(err))
    return 0


if __name__ == "__main__":
    sys.exit(main())
