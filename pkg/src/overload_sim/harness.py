"""Scenario runner: capacity calibration, (scheme, rho, seed) sweeps and the
per-run / aggregate output files."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .client import NO_RETRY, NO_TIMEOUT
from .config import (
    CALIBRATION_SCHEME,
    SCHEMES,
    RunConfig,
    ScenarioConfig,
    load_scenario,
)
from .kernel import SimulationResult, run
from .metrics import (
    COUNTERS,
    TypeCounts,
    ccdf_grid,
    read_ccdf_csv,
    read_ledger_csv,
    summarize_counts,
    write_ccdf_csv,
    write_ledger_csv,
)
from .server import PhaseKind, phase_means
from .workload import expected_visits, mean_requests_per_session

log = logging.getLogger(__name__)


class NoConvergence(RuntimeError):
    pass


class IoError(OSError):
    pass


# -- calibration -------------------------------------------------------------


def cpu_bound_rate(scenario: ScenarioConfig) -> float:
    """Analytic ceiling: requests/s at which the CPU or the worker pool saturates."""
    visits = expected_visits(scenario.model)
    total = sum(visits.values())
    busy = exec_time = 0.0
    for t, v in visits.items():
        phases = phase_means(t.mean_exec_time, scenario.server.profile)
        busy += v / total * sum(d for k, d in phases if k is PhaseKind.BUSY)
        exec_time += v / total * t.mean_exec_time
    sv = scenario.server
    return min(sv.cpus / busy, sv.workers / exec_time)


def calibration_run_config(scenario: ScenarioConfig, request_rate: float) -> RunConfig:
    cal = scenario.calibration
    server = replace(scenario.server, sq_capacity=None, browsing_capacity=None, transaction_capacity=None)
    client = replace(scenario.client, timeouts=NO_TIMEOUT, retry=NO_RETRY)
    return RunConfig(
        model=scenario.model,
        scheme=SCHEMES[CALIBRATION_SCHEME[scenario.kind]],
        session_rate=request_rate / mean_requests_per_session(scenario.model),
        horizon=cal.requests / request_rate,
        seed=cal.seed,
        server=server,
        client=client,
        warmup_fraction=0.0,
        stop_at_horizon=True,
    )


def completion_ratio(scenario: ScenarioConfig, request_rate: float) -> float:
    """Requests completed by the horizon over requests offered by sessions
    that arrived before it, with unbounded queues and infinite patience."""
    r = run(calibration_run_config(scenario, request_rate))
    if r.intended == 0:
        return 1.0
    return r.ledger.totals().completed / r.intended


def calibrate_capacity(scenario: ScenarioConfig) -> float:
    """Largest offered request rate whose completion ratio stays above the
    threshold, found by bisection between half and just above the analytic
    ceiling. Deterministic for a fixed calibration seed."""
    cal = scenario.calibration
    hi = cpu_bound_rate(scenario) * 1.02
    lo = hi / 2
    for _ in range(8):
        if completion_ratio(scenario, lo) >= cal.threshold:
            break
        hi, lo = lo, lo / 2
    else:
        raise NoConvergence("completion ratio stays below threshold even at low load")
    for _ in range(8):
        if completion_ratio(scenario, hi) < cal.threshold:
            break
        # the sampled trace pool can run lighter than the chain average
        lo, hi = hi, hi * 1.25
    else:
        raise NoConvergence("completion ratio never drops below threshold")
    for _ in range(cal.max_iter):
        if (hi - lo) / lo <= cal.tolerance:
            log.info("calibrated capacity %.4f req/s", lo)
            return lo
        mid = 0.5 * (lo + hi)
        if completion_ratio(scenario, mid) >= cal.threshold:
            lo = mid
        else:
            hi = mid
    raise NoConvergence(f"bisection did not converge within {cal.max_iter} steps")


# -- file plumbing -------------------------------------------------------------


@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temp path next to ``path``; move it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path: Path, doc):
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_rows(path: Path, header, rows):
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _cell(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(round(x, 6))
    return str(x)


# -- one run ---------------------------------------------------------------------


@dataclass(frozen=True)
class RunKey:
    variant: str
    scheme: str
    rho: float
    seed: int

    @property
    def relpath(self) -> Path:
        return Path("runs") / self.variant / self.scheme / f"rho-{self.rho:g}" / f"seed-{self.seed}"


def run_key(cfg: RunConfig) -> RunKey:
    return RunKey(cfg.variant or "default", cfg.scheme.name, float(cfg.rho), cfg.seed)


def ccdf_filters(scenario: ScenarioConfig) -> list[str]:
    labels = [t.label for t in scenario.model.types]
    classes = sorted({t.request_class.value for t in scenario.model.types})
    if len(labels) == 1:
        return ["all"]
    return ["all", *classes, *labels]


def write_run(result: SimulationResult, scenario: ScenarioConfig, capacity: float, out_dir: Path) -> Path:
    """Write ledger, CCDF, utilization trace, switch log and metadata of one run."""
    cfg = result.config
    d = Path(out_dir) / run_key(cfg).relpath
    d.mkdir(parents=True, exist_ok=True)
    with atomic_path(d / "ledger.csv") as tmp:
        write_ledger_csv(result.ledger, tmp)
    grid = ccdf_grid(scenario.ccdf_max, scenario.ccdf_step)
    with atomic_path(d / "ccdf.csv") as tmp:
        write_ccdf_csv(result.ledger, tmp, ccdf_filters(scenario), grid)
    write_rows(d / "trace.csv", ("t", "utilization", "policy", "busy_time"), result.utilization_trace)
    write_rows(d / "switches.csv", ("t", "utilization", "from", "to"), result.switch_log)
    samples = result.ledger.samples()
    meta = {
        "scenario": scenario.name,
        "kind": scenario.kind.value,
        "variant": run_key(cfg).variant,
        "scheme": cfg.scheme.name,
        "rho": cfg.rho,
        "seed": cfg.seed,
        "capacity_rps": capacity,
        "session_rate": cfg.session_rate,
        "horizon_s": cfg.horizon,
        "warmup_s": result.warmup,
        "end_time_s": result.end_time,
        "throughput_rps": result.throughput,
        "mean_utilization": result.mean_utilization,
        "mean_response_s": float(samples.mean()) if len(samples) else None,
        "sessions": result.sessions,
        "sessions_completed": result.sessions_completed,
        "sessions_aborted": result.sessions_aborted,
        "unproductive_completions": result.unproductive_completions,
        "switches": len(result.switch_log),
    }
    write_json(d / "meta.json", meta)
    return d


def _run_one(args):
    scenario, cfg, capacity, out_dir = args
    result = run(cfg)
    write_run(result, scenario, capacity, out_dir)
    return run_key(cfg)


# -- scenarios -------------------------------------------------------------------


def scenario_configs(scenario: ScenarioConfig, capacity: float, record_logs: bool = False) -> list[RunConfig]:
    """All (variant, rho, seed, scheme) runs. Schemes are innermost so paired
    runs share arrival, trace, demand and timeout streams."""
    return [
        scenario.run_config(scheme, rho, seed, capacity, variant, record_logs)
        for variant in scenario.variant_list()
        for rho in scenario.rhos
        for seed in scenario.seeds
        for scheme in scenario.schemes
    ]


def resolve_capacity(scenario: ScenarioConfig) -> tuple[float, bool]:
    if scenario.capacity is not None:
        return scenario.capacity, False
    return calibrate_capacity(scenario), True


def run_scenario(
    scenario: ScenarioConfig | str | Path,
    output_dir: str | Path,
    *,
    rhos=None,
    seeds=None,
    schemes=None,
    jobs: int = 1,
    plots: bool = True,
) -> Path:
    """Run every (scheme, rho, seed) of a scenario and write per-run and
    aggregate files under ``output_dir``."""
    if not isinstance(scenario, ScenarioConfig):
        scenario = load_scenario(scenario)
    scenario = scenario.restrict(rhos, seeds, schemes)
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    capacity, calibrated = resolve_capacity(scenario)
    write_json(
        out / "calibration.json",
        {
            "scenario": scenario.name,
            "kind": scenario.kind.value,
            "capacity_rps": capacity,
            "calibrated": calibrated,
            "requests_per_session": scenario.requests_per_session,
            "horizon_s": scenario.horizon_for(capacity),
        },
    )
    tasks = [(scenario, cfg, capacity, out) for cfg in scenario_configs(scenario, capacity)]
    log.info("%s: %d runs at capacity %.4f req/s", scenario.name, len(tasks), capacity)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            keys = list(pool.map(_run_one, tasks))
    else:
        keys = [_run_one(t) for t in tasks]
    write_json(out / "manifest.json", {"runs": [str(k.relpath) for k in keys]})
    report(out, plots=plots)
    return out


# -- aggregation -----------------------------------------------------------------


@dataclass
class RunRecord:
    key: RunKey
    meta: dict
    ledger: dict  # type -> counters, from ledger.csv
    ccdf: dict  # filter -> (t, value)


def load_runs(out_dir: Path) -> list[RunRecord]:
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.json"
    if not manifest.exists():
        raise IoError(f"{out_dir} has no manifest.json; run `simulate` first")
    runs = []
    for rel in json.loads(manifest.read_text())["runs"]:
        d = out_dir / rel
        try:
            meta = json.loads((d / "meta.json").read_text())
            ledger = read_ledger_csv(d / "ledger.csv")
            cc = read_ccdf_csv(d / "ccdf.csv")
        except OSError as exc:
            raise IoError(f"incomplete run directory {d}: {exc}") from exc
        key = RunKey(meta["variant"], meta["scheme"], float(meta["rho"]), int(meta["seed"]))
        runs.append(RunRecord(key, meta, ledger, cc))
    return runs


def _ordered(values):
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def _pooled(records: list[RunRecord], group: str) -> dict[str, int]:
    tot = dict.fromkeys(COUNTERS, 0)
    for r in records:
        for k in COUNTERS:
            tot[k] += r.ledger[group][k]
    return tot


def _groups(runs):
    g = defaultdict(list)
    for r in runs:
        g[(r.key.variant, r.key.rho, r.key.scheme)].append(r)
    return g


def outcome_table(runs: list[RunRecord]) -> list[list]:
    """Table 1/5 shape: percent completed, timed out, dropped and not
    generated per (variant, rho), one column per scheme; counts pooled over seeds."""
    schemes = _ordered(r.key.scheme for r in runs)
    g = _groups(runs)
    rows = []
    for variant in _ordered(r.key.variant for r in runs):
        for rho in _ordered(r.key.rho for r in runs):
            pct = {
                s: summarize_counts(TypeCounts(**_pooled(g[(variant, rho, s)], "all")))
                for s in schemes
                if g.get((variant, rho, s))
            }
            for metric in ("completed", "timed_out", "dropped", "not_generated"):
                rows.append([variant, rho, metric] + [pct[s][metric] if s in pct else "" for s in schemes])
    return [["variant", "rho", "metric", *schemes], *rows]


def type_table(runs: list[RunRecord], columns: list[str]) -> list[list]:
    """Table 4 shape: mean per-seed counts of generated / completed / timed out /
    dropped for the browsing class and each transaction type."""
    g = _groups(runs)
    rows = []
    for variant in _ordered(r.key.variant for r in runs):
        for rho in _ordered(r.key.rho for r in runs):
            for scheme in _ordered(r.key.scheme for r in runs):
                recs = g.get((variant, rho, scheme))
                if not recs:
                    continue
                for metric in ("generated", "completed", "timed_out", "dropped"):
                    vals = [_pooled(recs, c)[metric] / len(recs) for c in columns]
                    rows.append([variant, rho, scheme, metric, *vals])
    return [["variant", "rho", "scheme", "metric", *columns], *rows]


def load_series(runs: list[RunRecord]) -> list[list]:
    """Throughput and mean response time of completed requests vs load."""
    header = [
        "variant", "scheme", "rho", "seeds", "throughput_rps", "throughput_sd",
        "throughput_fraction", "mean_response_s", "tr4_completed", "session_completion",
    ]
    rows = []
    g = _groups(runs)
    for (variant, rho, scheme), recs in sorted(g.items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][1])):
        thr = np.array([r.meta["throughput_rps"] for r in recs])
        cap = recs[0].meta["capacity_rps"]
        done = sum(r.ledger["all"]["completed"] for r in recs)
        resp = sum(r.ledger["all"]["completed"] * (r.meta["mean_response_s"] or 0.0) for r in recs)
        tr4 = [r.ledger["Tr-4"]["completed"] for r in recs if "Tr-4" in r.ledger]
        sess = [r.meta["sessions_completed"] / max(r.meta["sessions"], 1) for r in recs]
        rows.append(
            [
                variant, scheme, rho, len(recs), float(thr.mean()),
                float(thr.std(ddof=1)) if len(thr) > 1 else 0.0, float(thr.mean() / cap),
                resp / done if done else float("nan"),
                float(np.mean(tr4)) if tr4 else "", float(np.mean(sess)),
            ]
        )
    return [header, *rows]


def ccdf_summary(runs: list[RunRecord]) -> list[list]:
    """Seed-averaged CCDF on the common grid, per (variant, rho, scheme, filter)."""
    rows = []
    for (variant, rho, scheme), recs in _groups(runs).items():
        filters = _ordered(f for r in recs for f in r.ccdf)
        for f in filters:
            have = [r.ccdf[f] for r in recs if f in r.ccdf]
            t = have[0][0]
            v = np.mean([h[1] for h in have], axis=0)
            rows.extend([variant, rho, scheme, f, float(a), float(b)] for a, b in zip(t, v))
    return [["variant", "rho", "scheme", "filter", "t", "value"], *rows]


def report(out_dir: str | Path, plots: bool = True) -> list[Path]:
    """(Re)build the aggregate CSVs, and plots if requested, from per-run files."""
    out = Path(out_dir)
    runs = load_runs(out)
    if not runs:
        raise IoError(f"no runs listed in {out / 'manifest.json'}")
    kind = runs[0].meta["kind"]
    written = []

    def emit(name, table):
        write_rows(out / name, table[0], table[1:])
        written.append(out / name)

    if kind == "E1-single-queue":
        emit("table1.csv", outcome_table(runs))
    else:
        emit("table5.csv", outcome_table(runs))
        labels = [k for k in runs[0].ledger if k not in ("all", "browsing", "transaction")]
        tr = [k for k in labels if runs[0].ledger[k]["class"] == "transaction"]
        emit("table4.csv", type_table(runs, ["browsing", *tr]))
    emit("load_series.csv", load_series(runs))
    emit("ccdf_summary.csv", ccdf_summary(runs))
    if plots:
        from .plotting import render_all

        written += render_all(out)
    return written
