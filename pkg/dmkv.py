"""
Command line for the simulated disaggregated KV store.

Runs scenarios, enumerates interleavings, audits traces and replays them.

Usage:
  python dmkv.py run scenarios/ycsb_a.txt
  python dmkv.py run scenarios/ycsb_a.txt --seed 11 --trace output/a_11.trace
  python dmkv.py run scenarios/ycsb_a.txt --seeds 200 --workers 6
  python dmkv.py sweep --writers 2,3 --replicas 2,3,4
  python dmkv.py sweep --scenario scenarios/two_clients.txt
  python dmkv.py check output/a_11.trace
  python dmkv.py replay output/a_11.trace

Exit codes: 0 all checks passed, 1 a check failed, 2 bad scenario or trace.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from tabulate import tabulate

import harness
from config import DEFAULT_LOG_LEVEL, load_scenario, with_overrides
from errors import ConfigError, LivenessError, TraceFormatError

logger = logging.getLogger("dmkv")

BASE_DIR = Path(__file__).parent.resolve()
OUTPUT_DIR = BASE_DIR / "output"

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got '{text}'")


def print_report(report: harness.AuditReport):
    print(tabulate(report.rows(), headers=["check", "result", "detail"], tablefmt="simple"))
    for check in report.failed:
        print(f"\n{check.name}:")
        for witness in check.witnesses:
            print(f"  {witness}")


def print_stats(stats: harness.Stats):
    print(tabulate(stats.rtt_rows(), headers=["op", "n", "mean", "p50", "p99", "max", "rtt histogram"],
                   tablefmt="simple"))
    if stats.rules:
        print()
        print(tabulate(sorted(stats.rules.items()), headers=["rule", "count"], tablefmt="simple"))
    if stats.recoveries:
        rows = [[r["target"], r["crashed"], r["detected"], r["finished"],
                 int(r["finished"]) - int(r["crashed"]), r["epoch"], r["redone"]] for r in stats.recoveries]
        print()
        print(tabulate(rows, headers=["recovered", "crashed", "detected", "finished", "ticks", "epoch", "redone"],
                       tablefmt="simple"))
    print(f"\nfabric ops: {stats.fabric_ops} (FAIL {stats.failed_ops}) | fail_query RPCs: {stats.fail_queries} "
          f"| crashes: {stats.crashes} | ticks: {stats.ticks}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def do_run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = with_overrides(scenario, seed=args.seed)

    if args.seeds:
        seeds = range(scenario.seed, scenario.seed + args.seeds)
        checkpoint = args.checkpoint or str(OUTPUT_DIR / f"{Path(args.scenario).stem}.seeds.checkpoint.json")
        Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
        results = harness.run_seeds(scenario, seeds, args.workers, checkpoint)
        failed = [r for r in results if not r["passed"]]
        rows = [[r["seed"], ", ".join(r.get("failed", [])), r.get("error") or ""] for r in failed[:20]]
        if rows:
            print(tabulate(rows, headers=["seed", "failed checks", "error"], tablefmt="simple"))
        print(f"\n{len(results) - len(failed)}/{len(results)} seeds passed")
        return EXIT_VIOLATION if failed else EXIT_OK

    result = harness.run(scenario)
    trace_path = args.trace or OUTPUT_DIR / f"{Path(args.scenario).stem}_{scenario.seed}.trace"
    harness.write_trace(trace_path, result.trace)
    report = harness.audit(result.trace, scenario, linearizability=not args.no_linearizability)
    print_stats(result.stats)
    print()
    print_report(report)
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        with open(args.json, "w") as f:
            json.dump({"stats": result.stats.to_dict(), "audit": [vars(c) for c in report.checks]}, f, indent=2)
    print(f"\nTrace: {trace_path}")
    return EXIT_OK if report.passed and result.error is None else EXIT_VIOLATION


def do_sweep(args) -> int:
    if args.scenario:
        scenario = load_scenario(args.scenario)
        if scenario.mode != "exhaustive":
            scenario = with_overrides(scenario, mode="exhaustive")
        result = harness.explore(scenario)
        print(tabulate([[scenario.num_clients, result.schedules, result.states, result.terminals,
                         result.truncated, len(result.violations)]],
                       headers=["clients", "schedules", "states", "terminals", "truncated", "violations"]))
        for v in result.violations:
            print(f"  {v}")
        if result.witness is not None:
            print(f"\nfirst violating schedule: {result.witness}")
        return EXIT_VIOLATION if result.violations or result.truncated else EXIT_OK

    cells = harness.sweep_grid(args.writers, args.replicas, args.max_steps, args.checkpoint)
    rows = [[c["writers"], c["r"], c["schedules"], c["states"], c["truncated"], len(c["violations"]),
             c["seconds"]] for c in cells]
    print(tabulate(rows, headers=["writers", "r", "schedules", "states", "truncated", "violations", "seconds"],
                   tablefmt="simple"))
    bad = [c for c in cells if c["violations"] or c["truncated"]]
    for c in bad:
        for v in c["violations"]:
            print(f"  {c['writers']}x{c['r']}: {v}")
    return EXIT_VIOLATION if bad else EXIT_OK


def do_check(args) -> int:
    scenario, trace = harness.read_trace(args.trace)
    if args.linearizability_only:
        violations = harness.check_linearizability(trace)
        for v in violations:
            print(v)
        print(f"\n{len(violations)} linearizability violation(s)")
        return EXIT_VIOLATION if violations else EXIT_OK
    report = harness.audit(trace, scenario)
    print_report(report)
    return EXIT_OK if report.passed else EXIT_VIOLATION


def do_replay(args) -> int:
    scenario, diff = harness.replay(args.trace)
    if not diff:
        print(f"Replay of seed {scenario.seed} matches {args.trace}")
        return EXIT_OK
    print("\n".join(diff[:args.context]))
    if len(diff) > args.context:
        print(f"... {len(diff) - args.context} more diff lines")
    return EXIT_VIOLATION


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Simulated disaggregated-memory KV store: run, sweep, check and replay.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    parser.add_argument("--log-level", default=DEFAULT_LOG_LEVEL,
                        help=f"Logging level (default: {DEFAULT_LOG_LEVEL}, env DMKV_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    # run
    p_run = sub.add_parser("run", help="Run a scenario, write its trace and audit it")
    p_run.add_argument("scenario", help="Scenario file (key = value lines)")
    p_run.add_argument("--seed", type=int, help="Override the scenario seed")
    p_run.add_argument("--trace", type=Path, help=f"Trace output path (default: {OUTPUT_DIR}/<name>_<seed>.trace)")
    p_run.add_argument("--json", help="Also write stats and audit results as JSON")
    p_run.add_argument("--seeds", type=int, default=0, help="Run this many consecutive seeds instead of one")
    p_run.add_argument("--workers", type=int, help="Worker processes for --seeds (default: env DMKV_WORKERS)")
    p_run.add_argument("--checkpoint", help="Resume file for --seeds")
    p_run.add_argument("--no-linearizability", action="store_true", help="Skip the linearizability check")

    # sweep
    p_sweep = sub.add_parser("sweep", help="Enumerate every interleaving")
    p_sweep.add_argument("--writers", type=_int_list, default=[2, 3], help="Writer counts (default: 2,3)")
    p_sweep.add_argument("--replicas", type=_int_list, default=[2, 3, 4], help="Replication factors (default: 2,3,4)")
    p_sweep.add_argument("--max-steps", type=int, default=400, help="Depth bound per schedule")
    p_sweep.add_argument("--checkpoint", help="JSON file to resume a grid sweep from")
    p_sweep.add_argument("--scenario", help="Explore a small client-level scenario instead of the slot grid")

    # check
    p_check = sub.add_parser("check", help="Audit a recorded trace")
    p_check.add_argument("trace", type=Path, help="Trace file written by 'run'")
    p_check.add_argument("--linearizability-only", action="store_true", help="Only check linearizability")

    # replay
    p_replay = sub.add_parser("replay", help="Re-run a trace's scenario and diff the traces")
    p_replay.add_argument("trace", type=Path, help="Trace file written by 'run'")
    p_replay.add_argument("--context", type=int, default=40, help="Diff lines to print")
    return parser


COMMANDS = {"run": do_run, "sweep": do_sweep, "check": do_check, "replay": do_replay}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TraceFormatError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except LivenessError as e:
        logger.error(f"Liveness violation: {e}")
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
