"""Command-line interface.

Subcommands:

- run: one benchmark simulation; writes a metrics JSON and optionally the
  event trace (JSON lines).
- check: strict-serializability verdict for a trace file; exit 0 when the
  history is clean, 2 on a violation, 3 on a malformed trace.
- sweep: protocols x seeds grid over one workload; CSV on stdout or file.
- scenario: staged micro-scenarios with hand-checkable outcomes.

Usage errors exit with code 64.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

from . import workload as wl
from .bench import PROTOCOLS, BenchConfig, run_benchmark
from .checker import check_trace
from .scenarios import SCENARIOS, run_scenario
from .simnet import SimConfig, trace_from_jsonl, trace_to_jsonl

EX_USAGE = 64

WORKLOADS = ("google-f1", "facebook-tao", "tpcc-lite", "google-wf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nattx", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", help="run one benchmark simulation")
    p_run.add_argument("--protocol", required=True, choices=PROTOCOLS)
    p_run.add_argument("--workload", required=True, choices=WORKLOADS)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--duration", type=int, default=2_000_000,
                       help="arrival window in virtual microseconds")
    p_run.add_argument("--rate", type=float, default=None,
                       help="arrivals per simulated second")
    p_run.add_argument("--write-fraction", type=float, default=None)
    p_run.add_argument("--keys", type=int, default=None, help="key-space size")
    p_run.add_argument("--servers", type=int, default=4)
    p_run.add_argument("--clients", type=int, default=8)
    p_run.add_argument("--skew-max", type=int, default=0,
                       help="max per-node clock skew, microseconds")
    p_run.add_argument("--no-rtc", action="store_true",
                       help="disable response timing control (unsafe; for study)")
    p_run.add_argument("--out", default=None, help="metrics JSON file (default stdout)")
    p_run.add_argument("--trace", default=None, help="write the event trace here")

    p_check = sub.add_parser("check", help="check a trace for strict serializability")
    p_check.add_argument("trace", help="trace file (JSON lines)")
    p_check.add_argument("--oracle", action="store_true",
                         help="cross-check small histories against brute force")
    p_check.add_argument("--emit-witness", default=None, metavar="FILE",
                         help="write the violation witness as JSON")

    p_sweep = sub.add_parser("sweep", help="protocols x seeds grid, CSV output")
    p_sweep.add_argument("--workload", required=True, choices=WORKLOADS)
    p_sweep.add_argument("--protocols", default=",".join(PROTOCOLS),
                         help="comma-separated subset of: " + ",".join(PROTOCOLS))
    p_sweep.add_argument("--seeds", default="0:5", metavar="LO:HI",
                         help="half-open seed range, e.g. 0:5")
    p_sweep.add_argument("--duration", type=int, default=2_000_000)
    p_sweep.add_argument("--rate", type=float, default=None)
    p_sweep.add_argument("--write-fraction", type=float, default=None)
    p_sweep.add_argument("--keys", type=int, default=None)
    p_sweep.add_argument("--servers", type=int, default=4)
    p_sweep.add_argument("--clients", type=int, default=8)
    p_sweep.add_argument("--check", action="store_true",
                         help="also run the checker on every trace")
    p_sweep.add_argument("--out", default=None, help="CSV file (default stdout)")

    p_scn = sub.add_parser("scenario", help="run a staged micro-scenario")
    p_scn.add_argument("name", choices=sorted(SCENARIOS))
    p_scn.add_argument("--seed", type=int, default=0)
    p_scn.add_argument("--no-rtc", action="store_true",
                       help="rtc-inversion only: disable response timing control")
    p_scn.add_argument("--protocol", default=None,
                       help="mvto-skew only: engine variant (mvto or ncc)")
    p_scn.add_argument("--out", default=None, help="result JSON file")

    return parser


def _spec_overrides(args) -> dict:
    overrides = {}
    if args.rate is not None:
        overrides["arrival_rate"] = args.rate
    if args.write_fraction is not None:
        overrides["write_fraction"] = args.write_fraction
    if getattr(args, "keys", None) is not None:
        overrides["n_keys"] = args.keys
    return overrides


def _one_run(args, protocol: str, seed: int):
    spec = wl.workload_spec(args.workload, n_servers=args.servers,
                            **_spec_overrides(args))
    sim_config = SimConfig(
        seed=seed, n_servers=args.servers, n_clients=args.clients,
        clock_skew_max=getattr(args, "skew_max", 0),
    )
    bench = BenchConfig(duration=args.duration,
                        rtc_enabled=not getattr(args, "no_rtc", False))
    return run_benchmark(protocol, spec, sim_config, bench)


def cmd_run(args) -> int:
    report, trace, _sim = _one_run(args, args.protocol, args.seed)
    payload = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)
    if args.trace:
        with open(args.trace, "wb") as fh:
            fh.write(trace_to_jsonl(trace))
    return 0


def cmd_check(args) -> int:
    try:
        with open(args.trace, "rb") as fh:
            trace = trace_from_jsonl(fh.read())
    except (OSError, ValueError) as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return 3
    code, detail = check_trace(trace, oracle=args.oracle)
    if code == 0:
        print("ok: history is strictly serializable")
    elif code == 2:
        print(f"violation: {detail['kind']}: {detail['witness']}")
        if args.emit_witness:
            with open(args.emit_witness, "w") as fh:
                json.dump(detail, fh, indent=1, default=str)
                fh.write("\n")
    else:
        print(f"malformed trace: {detail}")
    return code


def _parse_seed_range(text: str):
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError("seed range must look like LO:HI")
    return range(int(lo), int(hi))


def cmd_sweep(args) -> int:
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    for p in protocols:
        if p not in PROTOCOLS:
            print(f"unknown protocol {p!r}", file=sys.stderr)
            return EX_USAGE
    try:
        seeds = _parse_seed_range(args.seeds)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EX_USAGE

    fields = ["protocol", "workload", "seed", "attempts", "committed_attempts",
              "commit_rate", "mean_rounds_committed", "latency_p50", "latency_p99",
              "throughput", "smart_retry", "truly_aborted", "early_aborted",
              "ro_aborted", "messages"]
    if args.check:
        fields.append("checker_exit")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=fields)
        writer.writeheader()
        for protocol in protocols:
            for seed in seeds:
                report, trace, _sim = _one_run(args, protocol, seed)
                row = {k: v for k, v in report.to_dict().items() if k in fields}
                if args.check:
                    row["checker_exit"] = check_trace(trace)[0]
                writer.writerow(row)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_scenario(args) -> int:
    kwargs = {}
    if args.name == "rtc-inversion" and args.no_rtc:
        kwargs["rtc_enabled"] = False
    if args.name == "mvto-skew" and args.protocol:
        kwargs["protocol"] = args.protocol
    result = run_scenario(args.name, seed=args.seed, **kwargs)
    if "message" in result:
        print(result["message"])
    payload = json.dumps(result, indent=1, sort_keys=True, default=str)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {
        "run": cmd_run,
        "check": cmd_check,
        "sweep": cmd_sweep,
        "scenario": cmd_scenario,
    }[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
