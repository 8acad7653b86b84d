"""Operator entry points: start or resume runs, launch workers, serve the
queue, and emit reports. Batch tooling only; no interactive surface."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import fitness as fitness_mod
from .backends import HttpChatBackend, MockChatBackend, MockMetaBackend
from .distrib import (
    QueueClient,
    QueueServer,
    JobQueue,
    RunDatabase,
    RemoteEvalBackend,
    worker_loop,
)
from .evalpipe import MockEvalBackend, evaluate
from .fitness import Status
from .orchestrator import Backends, RunConfig, run
from .taskspec import load_task_dir, validate_task


class UnknownRun(RuntimeError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an optimization run")
    p_run.add_argument("--task", required=True, help="task directory")
    p_run.add_argument("--config", help="YAML run-config file")
    p_run.add_argument("--backend", choices=("mock", "external"), default="mock")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--distributed", action="store_true")
    p_run.add_argument("--queue-url")
    p_run.add_argument("--db-path", default=os.environ.get("KF_DB_PATH"))
    p_run.add_argument("--generations", type=int)
    p_run.add_argument("--population", type=int)
    p_run.add_argument("--target-speedup", type=float)
    p_run.add_argument("--resume", action="store_true")
    p_run.add_argument("--out", default="report.json", help="report output path")
    p_run.add_argument("--llm-endpoint", help="chat endpoint for --backend external")
    p_run.add_argument("--llm-api-key", default="")
    p_run.add_argument("--meta-endpoint", help="defaults to --llm-endpoint")
    p_run.add_argument("--quiet", action="store_true")

    p_worker = sub.add_parser("worker", help="run a compile or execute worker")
    p_worker.add_argument("--kind", choices=("compile", "execute"), required=True)
    p_worker.add_argument("--queue-url", required=True)
    p_worker.add_argument("--hardware-profile", default="default")
    p_worker.add_argument("--idle-exit-s", type=float, default=None)
    p_worker.add_argument("--lease-s", type=float, default=300.0)

    p_queue = sub.add_parser("queue-server", help="serve the job queue over HTTP")
    p_queue.add_argument("--port", type=int, default=0)
    p_queue.add_argument("--db-path", default=os.environ.get("KF_DB_PATH"))

    p_report = sub.add_parser("report", help="emit tables from a run database")
    p_report.add_argument("--db-path", default=os.environ.get("KF_DB_PATH"))
    p_report.add_argument("--out-dir", default=".")
    p_report.add_argument(
        "--crossover",
        nargs=2,
        metavar=("DB_A", "DB_B"),
        help="two run databases; re-times both best kernels on --task's hardware",
    )
    p_report.add_argument("--task", help="task directory (crossover mode)")
    return parser


def _load_run_config(args) -> RunConfig:
    base = {}
    if args.config:
        import yaml

        base = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    config = RunConfig.from_dict(base) if base else RunConfig()
    # Flags override the config file one-to-one.
    if args.seed is not None:
        config.seed = args.seed
    if args.generations is not None:
        config.max_generations = args.generations
    if args.population is not None:
        config.population_per_generation = args.population
    if args.target_speedup is not None:
        config.target_speedup = args.target_speedup
    return config


def cmd_run(args) -> int:
    task_dir = Path(args.task)
    if not task_dir.is_dir():
        print(f"error: task directory not found: {task_dir}", file=sys.stderr)
        return 2
    try:
        task = load_task_dir(task_dir)
    except Exception as e:
        print(f"error: failed to load task: {e}", file=sys.stderr)
        return 2
    for warning in validate_task(task):
        print(f"warning: {warning}", file=sys.stderr)

    config = _load_run_config(args)
    if args.target_speedup is not None:
        task.target_speedup = args.target_speedup

    if args.backend == "mock":
        generator = MockChatBackend()
        meta = MockMetaBackend()
        evaluator = MockEvalBackend()
    else:
        if not args.llm_endpoint:
            print("error: --backend external requires --llm-endpoint", file=sys.stderr)
            return 2
        generator = HttpChatBackend(args.llm_endpoint, args.llm_api_key)
        meta = HttpChatBackend(args.meta_endpoint or args.llm_endpoint, args.llm_api_key)
        evaluator = MockEvalBackend()  # hardware execution always goes via workers

    if args.distributed:
        if not args.queue_url:
            print("error: --distributed requires --queue-url", file=sys.stderr)
            return 2
        evaluator = RemoteEvalBackend(
            QueueClient(args.queue_url), hardware_profile=task.hardware_profile_id
        )

    db = RunDatabase(args.db_path) if args.db_path else None
    backends = Backends(generator=generator, meta=meta, evaluator=evaluator)

    def progress(gen, stats):
        if not args.quiet:
            print(
                f"generation {gen}/{config.max_generations}: "
                f"occupancy={stats['occupancy']} best={stats['best_fitness']:.4f}"
            )

    try:
        report = run(config, task, backends, db=db, resume=args.resume, progress=progress)
    except Exception as e:
        print(f"error: run aborted: {e}", file=sys.stderr)
        return 1
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if not args.quiet:
        print(f"best fitness {report.best_fitness:.4f}; report written to {args.out}")
    return 0


def cmd_worker(args) -> int:
    client = QueueClient(args.queue_url)
    backend = MockEvalBackend()
    processed = worker_loop(
        client,
        args.kind,
        backend,
        hardware_profile=args.hardware_profile,
        idle_exit_s=args.idle_exit_s,
        lease_s=args.lease_s,
    )
    print(f"worker exiting after {processed} jobs")
    return 0


def cmd_queue_server(args) -> int:
    db = RunDatabase(args.db_path) if args.db_path else None
    server = QueueServer(JobQueue(), db=db, port=args.port)
    server.start()
    print(f"queue serving at {server.url}", flush=True)
    try:
        import time

        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        server.stop()
    return 0


def _task_of(candidate_id: str) -> str:
    return candidate_id.rsplit("-g", 1)[0]


def collect_rows(db: RunDatabase) -> list[dict]:
    """Per-task best-candidate rows from the raw records."""
    candidates: dict[str, dict] = {}
    evaluations: dict[str, dict] = {}
    for record in db.iter_records():
        if record["kind"] == "candidate":
            candidates[record["body"]["candidate_id"]] = record["body"]["candidate"]
        elif record["kind"] == "evaluation":
            evaluations[record["body"]["candidate_id"]] = record["body"]["result"]

    by_task: dict[str, list[tuple[dict, dict]]] = {}
    for cid, cand in candidates.items():
        res = evaluations.get(cid)
        if res is None:
            continue
        by_task.setdefault(_task_of(cid), []).append((cand, res))

    rows = []
    for task_id in sorted(by_task):
        pairs = by_task[task_id]
        # Best: highest fitness, runtime breaking ties toward faster kernels.
        cand, res = max(
            pairs,
            key=lambda p: (p[0]["fitness"], -(p[1]["runtime_ms"] or float("inf"))),
        )
        runtime = res.get("runtime_ms")
        baseline = res.get("baseline_ms")
        speedup = baseline / runtime if runtime and baseline else None
        nu = res.get("nu_stats") or {}
        rows.append(
            {
                "task_id": task_id,
                "candidate_id": cand["candidate_id"],
                "status": res["status"],
                "runtime_ms": runtime,
                "baseline_ms": baseline,
                "speedup": speedup,
                "violation_fraction": nu.get("violation_fraction"),
                "max_nu": nu.get("max_nu"),
                "cosine_sim": res.get("cosine_sim"),
                "fitness": cand["fitness"],
            }
        )
    return rows


def aggregate_rows(rows: list[dict]) -> dict:
    n = len(rows)
    correct = [r for r in rows if r["status"] == Status.CORRECT.value]
    speedups_all = [
        r["speedup"] if (r in correct and r["speedup"]) else 0.0 for r in rows
    ]
    speedups_correct = [r["speedup"] for r in correct if r["speedup"]]
    agg = {
        "n_tasks": n,
        "correct_rate": len(correct) / n if n else 0.0,
        "fast_1": fitness_mod.fast_p(speedups_all, 1.0) if rows else 0.0,
        "fast_2": fitness_mod.fast_p(speedups_all, 2.0) if rows else 0.0,
        "mean_speedup": (
            sum(speedups_correct) / len(speedups_correct) if speedups_correct else None
        ),
        "geomean_speedup": (
            fitness_mod.geometric_mean(speedups_correct) if speedups_correct else None
        ),
    }
    return agg


def _fmt(value, width, digits=4) -> str:
    if value is None:
        return "n/a".rjust(width)
    if isinstance(value, float):
        return f"{value:.{digits}g}".rjust(width)
    return str(value).rjust(width)


def render_table(rows: list[dict], agg: dict) -> str:
    headers = [
        ("task_id", 24),
        ("status", 12),
        ("runtime_ms", 11),
        ("baseline_ms", 12),
        ("speedup", 9),
        ("viol_frac", 10),
        ("max_nu", 9),
        ("cosine", 9),
        ("fitness", 9),
    ]
    lines = [" ".join(h.rjust(w) for h, w in headers)]
    for r in rows:
        lines.append(
            " ".join(
                [
                    r["task_id"].rjust(24),
                    r["status"].rjust(12),
                    _fmt(r["runtime_ms"], 11),
                    _fmt(r["baseline_ms"], 12),
                    _fmt(r["speedup"], 9),
                    _fmt(r["violation_fraction"], 10),
                    _fmt(r["max_nu"], 9),
                    _fmt(r["cosine_sim"], 9),
                    _fmt(r["fitness"], 9),
                ]
            )
        )
    lines.append(
        "aggregate: "
        f"correct_rate={agg['correct_rate']:.4g} fast_1={agg['fast_1']:.4g} "
        f"fast_2={agg['fast_2']:.4g} "
        f"mean_speedup={_fmt(agg['mean_speedup'], 0).strip()} "
        f"geomean_speedup={_fmt(agg['geomean_speedup'], 0).strip()}"
    )
    return "\n".join(lines) + "\n"


def heatmap_data(db: RunDatabase) -> list[str]:
    """Grid data lines from the last complete archive snapshot per task."""
    from .distrib import load_run

    replayed = load_run(db)
    lines = ["# d_mem d_algo d_sync fitness candidate_id"]
    for rec in sorted(replayed.archive_records, key=lambda r: r["coord"]):
        x, y, z = rec["coord"]
        lines.append(f"{x} {y} {z} {rec['fitness']:.6g} {rec['candidate_id']}")
    return lines


def cmd_report(args) -> int:
    if args.crossover:
        return _cmd_crossover(args)
    if not args.db_path or not Path(args.db_path).exists():
        print("error: no run database (use --db-path or KF_DB_PATH)", file=sys.stderr)
        return 2
    db = RunDatabase(args.db_path)
    rows = collect_rows(db)
    if not rows:
        print("error: run database contains no evaluated candidates", file=sys.stderr)
        return 2
    agg = aggregate_rows(rows)
    # Self-consistency: aggregates recomputed from the emitted rows must match.
    again = aggregate_rows(json.loads(json.dumps(rows)))
    if again != agg:
        print("error: aggregate self-consistency check failed", file=sys.stderr)
        return 1

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = render_table(rows, agg)
    print(table, end="")
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    (out_dir / "summary.json").write_text(
        json.dumps({"rows": rows, "aggregate": agg}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    (out_dir / "heatmap.dat").write_text(
        "\n".join(heatmap_data(db)) + "\n", encoding="utf-8"
    )
    return 0


def _best_source(db_path: str) -> tuple[str, str]:
    """Best kernel (candidate_id, source) from a run database's snapshot."""
    from .distrib import load_run

    db = RunDatabase(db_path)
    replayed = load_run(db)
    if not replayed.archive_records:
        raise UnknownRun(f"no archive snapshot in {db_path}")
    best = max(replayed.archive_records, key=lambda r: r["fitness"])
    return best["candidate_id"], best["source"]


def _cmd_crossover(args) -> int:
    """Hardware-crossover table: re-time both runs' best kernels on one task.

    hws(k_native) = t(k_other) / t(k_native) on the hardware the --task
    directory describes; values above 1 mean native optimization won.
    """
    if not args.task:
        print("error: crossover mode requires --task", file=sys.stderr)
        return 2
    task = load_task_dir(args.task)
    backend = MockEvalBackend()
    try:
        id_a, src_a = _best_source(args.crossover[0])
        id_b, src_b = _best_source(args.crossover[1])
    except UnknownRun as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    res_a = evaluate(backend, src_a, task)
    res_b = evaluate(backend, src_b, task)
    if res_a.runtime_ms is None or res_b.runtime_ms is None:
        print("error: a best kernel failed to run on this task", file=sys.stderr)
        return 1
    hws = fitness_mod.hardware_speedup(res_b.runtime_ms, res_a.runtime_ms)
    values = [hws]
    table = (
        f"{'task':>24} {'t(k_native) ms':>15} {'t(k_other) ms':>14} {'hws':>8}\n"
        f"{task.task_id:>24} {res_a.runtime_ms:>15.6g} {res_b.runtime_ms:>14.6g} {hws:>8.4g}\n"
        f"aggregate: hws_1={fitness_mod.hws_p(values, 1.0):.4g} "
        f"hws_1.5={fitness_mod.hws_p(values, 1.5):.4g} "
        f"avg_hws={sum(values) / len(values):.4g}\n"
    )
    print(table, end="")
    print(f"# native={id_a} other={id_b}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "worker":
        return cmd_worker(args)
    if args.command == "queue-server":
        return cmd_queue_server(args)
    if args.command == "report":
        return cmd_report(args)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
