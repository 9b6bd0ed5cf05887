"""``uanav`` command line: train, plan and bench.

Exit codes: 0 when every requested episode produced a metrics report
(successful or an analyzed failure), 1 when any episode raised, 2 for
configuration or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import scenarios
from .config import MODES, SCENARIOS, ConfigError, RunConfig, load_config
from .harness import METRIC_FIELDS, Scenario, run_episode, save_trace, spawn_scenario, write_metrics_csv
from .predictor import load_ensemble, make_samples, save_ensemble, train_ensemble
from .tracks import TrackFormatError, load_tracks

logger = logging.getLogger("uanav")

EXIT_OK, EXIT_EPISODE, EXIT_CONFIG = 0, 1, 2
BENCH_KEYS = ("kind", "scenario", "mode", "horizon", "prediction", "seed", "n")
BENCH_FIELDS = BENCH_KEYS + METRIC_FIELDS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--scenario", choices=SCENARIOS)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--horizon", type=int, help="planning horizon N (steps of 0.4 s)")
    common.add_argument("--delta", type=float, help="chance-constraint risk level")
    common.add_argument("--gamma", type=float, help="CBF decay rate")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true", default=None, help="zero all forecast covariances")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="uanav", description="Uncertainty-aware crowd navigation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the ensemble predictor")
    p = sub.add_parser("plan", parents=[common], help="run one closed-loop episode")
    p.add_argument("--constant-velocity", action="store_true", default=None, help="skip the learned predictor")
    b = sub.add_parser("bench", parents=[common], help="sweep seeds x modes x horizons x prediction")
    b.add_argument("--constant-velocity", action="store_true", default=None, help="skip the learned predictor")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out:
        cfg.paths.output = args.out
    pl, sc = cfg.planner, cfg.scenario
    for key in ("mode", "horizon", "delta", "gamma"):
        if getattr(args, key) is not None:
            setattr(pl, key, getattr(args, key))
    if args.scenario is not None:
        sc.name = args.scenario
    if args.seed is not None:
        sc.seed = args.seed
        cfg.predictor.seed = args.seed
    if args.deterministic:
        sc.deterministic = True
    if getattr(args, "constant_velocity", None):
        sc.constant_velocity = True
    if args.command == "bench":
        # explicit single-value flags narrow the sweep
        if args.mode is not None:
            cfg.bench.modes = [args.mode]
        if args.horizon is not None:
            cfg.bench.horizons = [args.horizon]
        if args.seed is not None:
            cfg.bench.seeds = [args.seed]
        if args.deterministic:
            cfg.bench.predictions = ["deterministic"]
    cfg.check_values()
    return cfg


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: RunConfig) -> int:
    cfg.require_paths(dataset=True)
    tracks = load_tracks(cfg.paths.dataset)
    h, y = make_samples(tracks)
    if len(h) == 0:
        raise ConfigError(f"dataset {cfg.paths.dataset} has no track with 20 consecutive samples")
    out = Path(cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    tc = cfg.predictor.train_config()
    t0 = time.perf_counter()
    ens = train_ensemble(h, y, tc, log)
    model_path = save_ensemble(ens, out / "model.npz")
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["member", "epoch", "nll"])
        writer.writeheader()
        writer.writerows(log)
    for i, (a, b) in enumerate(zip(ens.metadata["initial_nll"], ens.metadata["final_nll"])):
        print(f"member {i}: NLL {a:.4f} -> {b:.4f}")
    print(f"trained {len(ens)} member(s) on {len(h)} samples in {time.perf_counter() - t0:.1f} s")
    print(f"model: {model_path}\nlog: {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan / bench


def build_scenario(cfg: RunConfig) -> Scenario:
    sc = cfg.scenario
    if sc.name == "dataset":
        cfg.require_paths(dataset=True)
        tracks = load_tracks(cfg.paths.dataset)
        return spawn_scenario(tracks, sc.pedestrians, sc.seed, max_sim_time=sc.max_sim_time)
    return scenarios.make(sc.name, sc.seed, sc.max_sim_time)


def load_model(cfg: RunConfig):
    if cfg.scenario.constant_velocity:
        return None
    cfg.require_paths(model=True)
    return load_ensemble(cfg.paths.model)


def run_configured(cfg: RunConfig, ensemble):
    """One episode fully described by ``cfg``; the config is echoed into the trace header."""
    scenario = build_scenario(cfg)
    return run_episode(
        scenario,
        ensemble,
        cfg.planner.planner_config(),
        deterministic=cfg.scenario.deterministic,
        header_extra={"config": cfg.to_dict()},
    )


def episode_name(cfg: RunConfig) -> str:
    pred = "det" if cfg.scenario.deterministic else "sto"
    return f"{cfg.scenario.name}_{cfg.planner.mode}_N{cfg.planner.horizon}_{pred}_s{cfg.scenario.seed}"


def cmd_plan(cfg: RunConfig) -> int:
    ensemble = load_model(cfg)
    out = Path(cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        trace, report = run_configured(cfg, ensemble)
    except Exception as exc:
        print(f"uanav plan: episode failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_EPISODE
    name = episode_name(cfg)
    trace_path = save_trace(trace, out / f"{name}.jsonl")
    write_metrics_csv([report.as_row()], out / f"{name}_metrics.csv")
    print(",".join(METRIC_FIELDS))
    print(",".join(str(report.as_row()[k]) for k in METRIC_FIELDS))
    print(f"trace: {trace_path}")
    return EXIT_OK


def bench_jobs(cfg: RunConfig) -> list[RunConfig]:
    jobs = []
    for mode in cfg.bench.modes:
        for horizon in cfg.bench.horizons:
            for pred in cfg.bench.predictions:
                for seed in cfg.bench.seeds:
                    job = RunConfig.from_dict(cfg.to_dict())
                    job.planner = replace(job.planner, mode=mode, horizon=int(horizon))
                    job.scenario = replace(job.scenario, seed=int(seed), deterministic=pred == "deterministic")
                    jobs.append(job)
    return jobs


def _bench_worker(job: RunConfig, ensemble, trace_dir: str | None):
    try:
        trace, report = run_configured(job, ensemble)
    except Exception as exc:  # recorded per row; the sweep continues
        return None, f"{type(exc).__name__}: {exc}"
    if trace_dir is not None:
        save_trace(trace, Path(trace_dir) / f"{episode_name(job)}.jsonl")
    return report.as_row(), None


def _job_key(job: RunConfig) -> dict:
    return {
        "scenario": job.scenario.name,
        "mode": job.planner.mode,
        "horizon": job.planner.horizon,
        "prediction": "deterministic" if job.scenario.deterministic else "stochastic",
        "seed": job.scenario.seed,
    }


def aggregate_rows(rows: list[dict]) -> list[dict]:
    """One ``mean ± std`` row per (scenario, mode, horizon, prediction) group."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["kind"] != "episode":
            continue
        groups.setdefault((r["scenario"], r["mode"], r["horizon"], r["prediction"]), []).append(r)
    out = []
    for (scenario, mode, horizon, pred), members in sorted(groups.items()):
        done = [m for m in members if m["success"] != ""]
        row = {"kind": "aggregate", "scenario": scenario, "mode": mode, "horizon": horizon, "prediction": pred}
        row["seed"] = "all"
        row["n"] = len(done)
        for k in ("trajectory_length", "total_time", "min_distance", "avg_compute_ms"):
            vals = np.array([float(m[k]) for m in done])
            row[k] = f"{vals.mean():.4f} ± {vals.std():.4f}" if len(vals) else "nan"
        row["success"] = f"{np.mean([m['success'] for m in done]):.2f}" if done else "nan"
        failures = sorted({m["failure_reason"] for m in members if m["failure_reason"]})
        row["failure_reason"] = ";".join(failures)
        out.append(row)
    return out


def cmd_bench(cfg: RunConfig) -> int:
    ensemble = load_model(cfg)
    out = Path(cfg.paths.output)
    trace_dir = out / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    jobs = bench_jobs(cfg)
    if cfg.bench.workers > 1:
        with ProcessPoolExecutor(cfg.bench.workers) as pool:
            results = list(pool.map(_bench_worker, jobs, [ensemble] * len(jobs), [str(trace_dir)] * len(jobs)))
    else:
        results = [_bench_worker(j, ensemble, str(trace_dir)) for j in jobs]
    rows, errors = [], 0
    for job, (report, err) in zip(jobs, results):
        row = {"kind": "episode", **_job_key(job), "n": 1}
        if report is None:
            errors += 1
            logger.error("episode %s failed: %s", episode_name(job), err)
            row.update({k: "" for k in METRIC_FIELDS}, failure_reason=f"error: {err}")
        else:
            row.update(report)
        rows.append(row)
    rows.sort(key=lambda r: (r["scenario"], r["mode"], r["horizon"], r["prediction"], r["seed"]))
    rows += aggregate_rows(rows)
    path = write_metrics_csv(rows, out / "bench.csv", BENCH_FIELDS)
    with open(path) as fh:
        sys.stdout.write(fh.read())
    print(f"{len(jobs)} episodes, {errors} error(s); table: {path}")
    return EXIT_EPISODE if errors else EXIT_OK


COMMANDS = {"train": cmd_train, "plan": cmd_plan, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, TrackFormatError, ValueError, TypeError) as exc:
        print(f"uanav {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError) as exc:
        print(f"uanav {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
