"""Serialization: event logs (JSON lines), covariates (CSV), configs and
estimate reports (JSON).

Event times survive round trips bit-exactly: JSON floats are emitted with
Python's shortest-exact repr, which decodes to the identical double.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core import (
    Event,
    EventKind,
    EventLog,
    EventLogError,
    Parameters,
    PhaseSchedule,
    Status,
)
from .stem import MissingnessSpec

__all__ = ["write_event_log", "read_event_log", "write_covariates",
           "read_covariates", "params_to_dict", "params_from_dict",
           "params_from_flat", "read_sim_config", "read_observed_spec",
           "write_estimates"]

SCHEMA_VERSION = 1

_KIND_BY_NAME = {k.value: k for k in EventKind}
_STATUS_BY_NAME = {s.value: s for s in Status}


def write_event_log(log: EventLog, path: Union[str, Path]) -> None:
    """One JSON object per line: a header, then one event per line."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "record": "header",
        "horizon": log.horizon,
        "n": log.n,
        "initial_statuses": [s.value for s in log.initial_statuses],
        "initial_edges": sorted([list(p) for p in log.initial_edges]),
        "schedule": [list(iv) for iv in log.schedule.intervals],
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ev in log.events:
            rec = {"time": ev.time, "kind": ev.kind.value, "actor": ev.actor}
            if ev.partner is not None:
                rec["partner"] = ev.partner
            if ev.subtype is not None:
                rec["subtype"] = ev.subtype.value
            fh.write(json.dumps(rec) + "\n")


def read_event_log(path: Union[str, Path]) -> EventLog:
    """Parse and fully validate an event-log file.

    Parse errors and invariant violations report the offending line number.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EventLogError("empty event log file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise EventLogError(f"line 1: bad header: {err}")
    if header.get("record") != "header":
        raise EventLogError("line 1: missing header record")

    events = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ev = Event(
                time=float(rec["time"]),
                kind=_KIND_BY_NAME[rec["kind"]],
                actor=int(rec["actor"]),
                partner=(int(rec["partner"]) if "partner" in rec else None),
                subtype=(_STATUS_BY_NAME[rec["subtype"]]
                         if "subtype" in rec else None),
            )
        except (KeyError, ValueError, TypeError) as err:
            raise EventLogError(f"line {no}: bad event record: {err}")
        events.append(ev)

    log = EventLog(
        horizon=float(header["horizon"]),
        initial_statuses=tuple(_STATUS_BY_NAME[s]
                               for s in header["initial_statuses"]),
        initial_edges=frozenset((int(i), int(j))
                                for i, j in header["initial_edges"]),
        schedule=PhaseSchedule(header["schedule"]),
        events=tuple(events),
    )
    try:
        log.validate()
    except EventLogError as err:
        if err.index is not None:
            raise EventLogError(f"line {err.index + 2}: {err}")
        raise
    return log


def write_covariates(x: np.ndarray, path: Union[str, Path],
                     names: Optional[list[str]] = None) -> None:
    x = np.asarray(x, dtype=float)
    names = names or [f"x{j}" for j in range(x.shape[1])]
    with open(path, "w") as fh:
        fh.write(",".join(["id"] + list(names)) + "\n")
        for i in range(x.shape[0]):
            fh.write(",".join([str(i)] + [repr(float(v)) for v in x[i]]) + "\n")


def read_covariates(path: Union[str, Path]) -> np.ndarray:
    """Delimited text, first column individual id; ids must be 0..N-1 once."""
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty covariates file")
    start = 0
    first = lines[0].split(",")
    try:
        [float(v) for v in first]
    except ValueError:
        start = 1  # header row
    for no, line in enumerate(lines[start:], start=start + 1):
        fields = line.split(",")
        try:
            rows.append((int(fields[0]), [float(v) for v in fields[1:]]))
        except ValueError as err:
            raise ValueError(f"line {no}: non-numeric cell: {err}")
    ids = [r[0] for r in rows]
    n = len(rows)
    if sorted(ids) != list(range(n)):
        raise ValueError("ids must be exactly 0..N-1, each once")
    dim = len(rows[0][1])
    if any(len(r[1]) != dim for r in rows):
        raise ValueError("ragged covariate rows")
    out = np.zeros((n, dim))
    for i, vals in rows:
        out[i] = vals
    return out


def params_to_dict(params: Parameters) -> dict:
    """Flat name -> value mapping in the canonical parameter order."""
    return {name: float(v)
            for name, v in zip(params.names(), params.pack())}


def params_from_flat(d: dict) -> Parameters:
    """Rebuild Parameters from the flat estimates mapping."""
    d = dict(d)

    def coef_vector(prefix):
        keys = [k for k in d if k.startswith(prefix)]
        keys.sort(key=lambda k: int(k[len(prefix):]))
        return np.array([d[k] for k in keys])

    b_s = coef_vector("b_S_")
    b_e = coef_vector("b_E_")
    alpha = np.array([[d[f"alpha_{ab}{k}"] for ab in ("HH", "HI", "II")]
                      for k in (0, 1)])
    omega = np.array([[d[f"omega_{ab}{k}"] for ab in ("HH", "HI", "II")]
                      for k in (0, 1)])
    return Parameters(beta=d["beta"], exp_eta=d["exp_eta"], phi=d["phi"],
                      gamma=d["gamma"], p_s=d["p_s"], b_s=b_s,
                      alpha=alpha, omega=omega,
                      xi=d.get("xi"), b_e=(b_e if "xi" in d else None))


def params_from_dict(d: dict) -> Parameters:
    d = dict(d)
    alpha = np.asarray(d["alpha"], dtype=float).reshape(2, 3)
    omega = np.asarray(d["omega"], dtype=float).reshape(2, 3)
    b_s = np.asarray(d.get("b_s", []), dtype=float)
    xi = d.get("xi")
    b_e = d.get("b_e")
    if b_e is not None:
        b_e = np.asarray(b_e, dtype=float)
    exp_eta = d.get("exp_eta")
    if exp_eta is None:
        exp_eta = float(np.exp(d["eta"]))
    return Parameters(beta=float(d["beta"]), exp_eta=float(exp_eta),
                      phi=float(d["phi"]), gamma=float(d["gamma"]),
                      p_s=float(d["p_s"]), b_s=b_s, alpha=alpha, omega=omega,
                      xi=(float(xi) if xi is not None else None), b_e=b_e)


def read_sim_config(path: Union[str, Path]):
    """Simulation config: parameters plus population/network/schedule blocks."""
    from .simulate import SimConfig

    with open(path) as fh:
        cfg = json.load(fh)
    params = params_from_dict(cfg["params"])
    schedule = PhaseSchedule(cfg["schedule"])
    net = cfg.get("network", {"type": "erdos_renyi", "density": 0.05})
    if net.get("type", "erdos_renyi") == "erdos_renyi":
        network = float(net["density"])
    else:
        network = frozenset((int(i), int(j)) for i, j in net["edges"])
    pop = cfg.get("population", {})
    n = int(pop["n"]) if "n" in pop else len(cfg["covariates"].get("matrix", []))
    seeds = pop.get("initial_infected", 1)
    if isinstance(seeds, list):
        seeds = [(int(i), _STATUS_BY_NAME[s]) for i, s in seeds]
    cov = cfg.get("covariates", {"columns": []})
    if "matrix" in cov:
        covariates = np.asarray(cov["matrix"], dtype=float)
    else:
        covariates = [tuple(c) for c in cov.get("columns", [])]
    sim = SimConfig(n=n, schedule=schedule, network=network,
                    initial_infected=seeds, covariates=covariates)
    return params, sim


def read_observed_spec(path: Union[str, Path]) -> MissingnessSpec:
    with open(path) as fh:
        raw = json.load(fh)

    def ids_or_all(v):
        if v in ("all", None):
            return v
        return [int(i) for i in v]

    bounds = raw.get("recovery_bounds")
    if bounds:
        bounds = {int(k): (float(u), float(v)) for k, (u, v) in bounds.items()}
    latency = raw.get("latency")
    if latency:
        latency = {int(k): (float(a), float(b)) for k, (a, b) in latency.items()}
    return MissingnessSpec(
        hide_exposure=ids_or_all(raw.get("hide_exposure")),
        hide_recovery=ids_or_all(raw.get("hide_recovery")),
        recovery_grid=float(raw.get("recovery_grid_width", 7.0)),
        recovery_bounds=bounds,
        latency=latency,
    )


def write_estimates(path: Union[str, Path], params: Parameters,
                    extra: Optional[dict] = None) -> None:
    payload = {"schema_version": SCHEMA_VERSION,
               "estimates": params_to_dict(params)}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=True)
        fh.write("\n")
