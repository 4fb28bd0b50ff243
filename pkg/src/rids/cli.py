"""Command-line front end: ``rids {run,sweep,replay,validate}``.

Exit status: 0 success, 1 replay mismatch, 2 scenario or trace-format
error, 3 the detector or simulator gave up (divergence, all modes failed).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

from .detector import redecide
from .errors import AllModesFailed, Diverged, ReplayMismatch, RidsError, ScenarioError, TraceFormatError
from .scenario import ScenarioConfig, load_scenario, parse_scenario, run_scenario, scenario_to_dict
from .sim import ChannelMetrics, RunMetrics, SimResult, compute_metrics

log = logging.getLogger("rids")

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_INVALID = 2
EXIT_FAILED = 3

SWEEP_KEYS = {
    "alpha_s": float, "alpha_a": float,
    "w_s": int, "w_a": int, "c_s": int, "c_a": int,
}


# --------------------------------------------------------------------------
# helpers shared by the verbs


def scenario_paths(items: Iterable[str]) -> list[Path]:
    """Expand directories to their ``*.yaml`` files, sorted by name."""
    out: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out.extend(sorted(p.glob("*.yaml")))
        else:
            out.append(p)
    return out


def apply_flags(cfg: ScenarioConfig, dt: float | None, feedback: str | None,
                mode_policy: str | None) -> ScenarioConfig:
    changes: dict = {}
    if dt is not None:
        if not dt > 0:
            raise ScenarioError("--dt", "must be positive")
        changes["dt"] = dt
    if feedback is not None:
        changes["feedback"] = feedback
    if mode_policy is not None:
        changes["rids_mode_policy"] = mode_policy
    if not changes:
        return cfg
    # reparse so that the overridden scenario passes the same validation
    merged = cfg.with_overrides(**changes)
    return parse_scenario(scenario_to_dict(merged), cfg.name)


def worker_count(jobs: int) -> int:
    raw = os.environ.get("RIDS_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ScenarioError("RIDS_THREADS", f"not an integer: {raw!r}") from None
        if cap < 1:
            raise ScenarioError("RIDS_THREADS", "must be at least 1")
    return max(1, min(cap, jobs))


def _map(fn, jobs: Sequence, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def metrics_record(cfg: ScenarioConfig, seed: int, metrics: RunMetrics) -> dict:
    rec = {"scenario": cfg.name, "seed": seed}
    rec.update(metrics.as_dict())
    if cfg.expected:
        rec["expected"] = dict(cfg.expected)
        got = {"sensor_transition": rec["sensor_mode_transition"],
               "actuator_transition": rec["actuator_mode_transition"]}
        rec["expected_match"] = all(got[k] == v for k, v in cfg.expected.items() if k in got)
    else:
        rec["expected"] = None
        rec["expected_match"] = None
    return rec


# --------------------------------------------------------------------------
# run


def _run_job(job: tuple[ScenarioConfig, int, str, bool]) -> tuple[str, int, dict | None, str | None, int]:
    """Simulate one (scenario, seed) and write its files; picklable for the pool."""
    from .plotting import plot_detection
    from .tracefile import TraceLayout, write_trace

    cfg, seed, out_dir, plot = job
    try:
        result = run_scenario(cfg, seed)
    except (Diverged, AllModesFailed) as exc:
        return cfg.name, seed, None, f"{type(exc).__name__}: {exc}", EXIT_FAILED
    out = Path(out_dir)
    stem = f"{cfg.name}.seed{seed}"
    layout = TraceLayout.for_model(cfg.build_model())
    write_trace(out / f"{stem}.trace.csv", result.traces, layout,
                {"scenario": scenario_to_dict(cfg), "seed": seed})
    rec = metrics_record(cfg, seed, result.metrics)
    (out / f"{stem}.metrics.json").write_text(json.dumps(rec, indent=2) + "\n")
    if plot:
        plot_detection(result.traces, result.sensor_names, out / f"{stem}.png", title=stem)
    return cfg.name, seed, rec, None, EXIT_OK


def cmd_run(args) -> int:
    cfgs = [apply_flags(load_scenario(p), args.dt, args.feedback, args.mode_policy)
            for p in scenario_paths(args.scenarios)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, seed, str(out), args.plot)
            for cfg in cfgs for seed in ([args.seed] if args.seed is not None else cfg.seeds)]
    status = EXIT_OK
    for name, seed, rec, err, code in _map(_run_job, jobs, worker_count(len(jobs))):
        if err is not None:
            log.error("%s seed %d: %s", name, seed, err)
            status = max(status, code)
            continue
        if not args.quiet:
            print(f"{name} seed={seed} iterations={rec['iterations']} "
                  f"sensor={rec['sensor_mode_transition']} actuator={rec['actuator_mode_transition']} "
                  f"sensor_fpr={_fmt(rec['sensor']['fpr'])} sensor_fnr={_fmt(rec['sensor']['fnr'])} "
                  f"actuator_fpr={_fmt(rec['actuator']['fpr'])} actuator_fnr={_fmt(rec['actuator']['fnr'])}")
    return status


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# --------------------------------------------------------------------------
# sweep


def parse_grid(items: Sequence[str]) -> dict[str, list]:
    """``["c_a=1,2,3", "alpha_a=0.01,0.05"]`` -> ``{"c_a": [1, 2, 3], ...}``."""
    grid: dict[str, list] = {}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or not values.strip():
            raise ScenarioError(f"--grid {item}", "expected key=v1,v2,...")
        if key not in SWEEP_KEYS:
            raise ScenarioError(f"--grid {key}", f"not a sweepable parameter; use one of {sorted(SWEEP_KEYS)}")
        conv = SWEEP_KEYS[key]
        try:
            grid[key] = [conv(v) for v in values.split(",")]
        except ValueError:
            raise ScenarioError(f"--grid {key}", f"cannot parse values {values!r}") from None
    return grid


def grid_cells(grid: dict[str, list]) -> list[dict]:
    """Cartesian product; an empty grid is a single cell with no overrides."""
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _simulate_job(job: tuple[ScenarioConfig, int]) -> tuple[str, int, SimResult | None, str | None]:
    cfg, seed = job
    try:
        return cfg.name, seed, run_scenario(cfg, seed), None
    except (Diverged, AllModesFailed) as exc:
        return cfg.name, seed, None, f"{type(exc).__name__}: {exc}"


def rescore(cfg: ScenarioConfig, result: SimResult, cell: dict) -> RunMetrics:
    """Metrics of ``result`` had it been run with the decision parameters in ``cell``.

    Estimation and control never look at the decision parameters, so only the
    decision stage has to be replayed.
    """
    rcfg = dataclasses.replace(cfg.rids, **cell)
    if rcfg == cfg.rids:
        return result.metrics
    dets = redecide([tr.detection.estimate for tr in result.traces], rcfg)
    traces = [dataclasses.replace(tr, detection=d) for tr, d in zip(result.traces, dets)]
    metrics = compute_metrics(traces, cfg.schedule, result.sensor_names, cfg.dt,
                              warmup=rcfg.warmup_iterations)
    metrics.reached_goal = result.metrics.reached_goal
    return metrics


def _pool(metrics: Iterable[RunMetrics]) -> tuple[ChannelMetrics, ChannelMetrics]:
    s, a = ChannelMetrics(), ChannelMetrics()
    for m in metrics:
        for tot, part in ((s, m.sensor), (a, m.actuator)):
            tot.tp += part.tp
            tot.fp += part.fp
            tot.fn += part.fn
            tot.tn += part.tn
    return s, a


def run_sweep(cfgs: Sequence[ScenarioConfig], grid: dict[str, list], seeds: Sequence[int] | None = None,
              workers: int = 1) -> list[dict]:
    """Evaluate every grid cell on the (scenario, seed) ensemble.

    Returns one record per cell with pooled counts and rates. A cell whose
    parameters are invalid, or a run that fails, is recorded and skipped.
    """
    jobs = [(cfg, seed) for cfg in cfgs for seed in (seeds if seeds is not None else cfg.seeds)]
    sims = _map(_simulate_job, jobs, workers)
    by_name = {cfg.name: cfg for cfg in cfgs}
    records = []
    for cell in grid_cells(grid):
        rec: dict = {"cell": cell, "runs": 0, "errors": []}
        per_run = []
        for name, seed, result, err in sims:
            if err is not None:
                rec["errors"].append({"scenario": name, "seed": seed, "error": err})
                continue
            try:
                per_run.append(rescore(by_name[name], result, cell))
            except (ValueError, RidsError) as exc:
                rec["errors"].append({"scenario": name, "seed": seed, "error": str(exc)})
                break
        rec["runs"] = len(per_run)
        s, a = _pool(per_run)
        rec["sensor"] = s.as_dict() | {"tpr": s.tpr}
        rec["actuator"] = a.as_dict() | {"tpr": a.tpr}
        records.append(rec)
    return records


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid or [])
    cfgs = [apply_flags(load_scenario(p), args.dt, args.feedback, args.mode_policy)
            for p in scenario_paths(args.scenarios)]
    seeds = [args.seed] if args.seed is not None else None
    n_jobs = sum(len(seeds or c.seeds) for c in cfgs)
    records = run_sweep(cfgs, grid, seeds, worker_count(n_jobs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(records, indent=2) + "\n")
    keys = list(grid)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        chan = ["tp", "fp", "fn", "tn", "fpr", "fnr", "tpr"]
        w.writerow(keys + ["runs", "errors"] + [f"sensor_{c}" for c in chan] + [f"actuator_{c}" for c in chan])
        for rec in records:
            row = [rec["cell"][k] for k in keys] + [rec["runs"], len(rec["errors"])]
            for ch in ("sensor", "actuator"):
                row += ["" if rec[ch][c] is None else rec[ch][c] for c in chan]
            w.writerow(row)
    failed = 0
    for rec in records:
        for e in rec["errors"]:
            failed += 1
            log.warning("cell %s: %s seed %s: %s", rec["cell"], e["scenario"], e["seed"], e["error"])
        if not args.quiet:
            a = rec["actuator"]
            print(f"{rec['cell'] or '{}'} runs={rec['runs']} actuator_tpr={_fmt(a['tpr'])} "
                  f"actuator_fpr={_fmt(a['fpr'])} sensor_tpr={_fmt(rec['sensor']['tpr'])} "
                  f"sensor_fpr={_fmt(rec['sensor']['fpr'])}")
    return EXIT_OK


# --------------------------------------------------------------------------
# replay and validate


def replay_file(path: str | Path) -> int:
    """Verify one trace; returns the number of rows checked."""
    from .tracefile import read_trace, replay_trace

    loaded = read_trace(path)
    try:
        cfg = parse_scenario(loaded.meta["scenario"], str(path))
    except KeyError:
        raise TraceFormatError("sidecar has no scenario") from None
    return replay_trace(loaded, cfg)


def cmd_replay(args) -> int:
    status = EXIT_OK
    for path in args.traces:
        try:
            n = replay_file(path)
        except ReplayMismatch as exc:
            print(f"{path}: MISMATCH {exc}", file=sys.stderr)
            status = max(status, EXIT_MISMATCH)
            continue
        if not args.quiet:
            print(f"{path}: ok ({n} iterations)")
    return status


def cmd_validate(args) -> int:
    status = EXIT_OK
    for p in scenario_paths(args.scenarios):
        try:
            cfg = load_scenario(p)
        except ScenarioError as exc:
            print(f"{p}: {exc}", file=sys.stderr)
            status = EXIT_INVALID
            continue
        if not args.quiet:
            print(f"{p}: ok ({cfg.name}, {cfg.model_kind}, {len(cfg.schedule.events)} attacks)")
    return status


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rids", description="Robotic intrusion detection scenarios.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, overrides=True):
        p.add_argument("--quiet", action="store_true", help="print nothing on success")
        if overrides:
            p.add_argument("--seed", type=int, help="run this seed instead of the scenario's seeds")
            p.add_argument("--out", default="out", help="output directory (default: out)")
            p.add_argument("--dt", type=float, help="override the iteration period in seconds")
            p.add_argument("--feedback", choices=["estimate", "ips_raw"], help="controller feedback source")
            p.add_argument("--mode-policy", choices=["default", "all_reference", "complete"])

    p = sub.add_parser("run", help="simulate scenarios and write traces and metrics")
    p.add_argument("scenarios", nargs="+", help="scenario files or directories")
    p.add_argument("--plot", action="store_true", help="also render a PNG per run")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="evaluate a decision-parameter grid on a scenario ensemble")
    p.add_argument("scenarios", nargs="+", help="scenario files or directories")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help=f"repeatable; keys: {', '.join(sorted(SWEEP_KEYS))}")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-run the detector over recorded traces")
    p.add_argument("traces", nargs="+")
    common(p, overrides=False)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("validate", help="parse and check scenario files")
    p.add_argument("scenarios", nargs="+")
    common(p, overrides=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="rids: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, TraceFormatError) as exc:
        print(f"rids: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (Diverged, AllModesFailed) as exc:
        print(f"rids: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ReplayMismatch as exc:
        print(f"rids: error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
