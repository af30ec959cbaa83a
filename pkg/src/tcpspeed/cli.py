"""Command line: ``tcpspeed serve|measure|batch|analyze``."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from .records import ConfigError, MeasurementConfig, RunStatus, seconds_to_ns

EXIT_PARTIAL = 3
EXIT_ABORTED = 4


def _host_port(text: str, default_port: int = 5201) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    if not port.isdigit():
        raise argparse.ArgumentTypeError(f"bad port in {text!r}")
    return host.strip("[]") or "0.0.0.0", int(port)


def _chunk(text: str) -> int | None:
    if text == "auto":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"chunk must be an integer or 'auto', got {text!r}") from None


def _seconds_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(seconds_to_ns(float(x)) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated seconds, got {text!r}") from None


def _compare(text: str) -> tuple[str, str]:
    key, sep, ref = text.partition("=")
    if not sep or not key or not ref:
        raise argparse.ArgumentTypeError(f"expected key=reference, got {text!r}")
    return key, ref


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcpspeed", description="Multi-flow TCP speed measurement toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run a measurement server")
    s.add_argument("--listen", type=_host_port, default=("0.0.0.0", 5201), help="host:port (default 0.0.0.0:5201)")
    s.add_argument("--max-flows", type=int, default=64, help="concurrent connection limit")
    s.add_argument("--seed", type=int, default=0, help="seed of the random chunk payload")
    s.add_argument("--idle-timeout", type=float, default=10.0, help="seconds")

    m = sub.add_parser("measure", help="run one measurement")
    m.add_argument("--server", default="127.0.0.1:5201", help="host:port")
    m.add_argument("--flows", type=int, default=3, help="parallel flows for DL and UL")
    m.add_argument("--flows-dl", type=int, help="override DL flow count")
    m.add_argument("--flows-ul", type=int, help="override UL flow count")
    m.add_argument("--duration", type=float, default=15.0, help="DL and UL duration, seconds")
    m.add_argument("--pretest", type=float, default=2.0, help="pre-test duration, seconds")
    m.add_argument("--pings", type=int, default=10)
    m.add_argument("--chunk", type=_chunk, default=4096, help="chunk size in bytes, or 'auto' for the pre-test size")
    m.add_argument("--stats-interval", type=int, default=100, help="socket statistics interval, ms")
    m.add_argument("--run-id", default=None)
    m.add_argument("--tag", action="append", default=[], metavar="KEY=VALUE")
    m.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    m.add_argument("--asn-db", type=Path, default=None, help="prefix table with 'prefix asn' lines")
    m.add_argument("--no-traceroute", action="store_true")
    m.add_argument("--max-ttl", type=int, default=30)

    b = sub.add_parser("batch", help="run a configuration grid")
    b.add_argument("--spec", type=Path, required=True, help="YAML or JSON batch spec")
    b.add_argument("--out", type=Path, required=True)
    b.add_argument("--dry-run", action="store_true", help="print the expanded run ids and exit")

    a = sub.add_parser("analyze", help="evaluate run directories")
    a.add_argument("--in", dest="inputs", nargs="+", type=Path, required=True)
    a.add_argument("--group-by", default="flows", help="comma-separated: flows, server, status, tags.<name>")
    a.add_argument("--grid-ms", type=float, default=10.0)
    a.add_argument("--saturation-s", type=float, default=15.0)
    a.add_argument("--checkpoints", type=_seconds_list, default=_seconds_list("2,4,6,8,10"), help="seconds")
    a.add_argument("--compare", type=_compare, default=None, metavar="KEY=REFERENCE")
    a.add_argument("--bucket-min", type=float, default=None, help="time-of-day bucket width, minutes")
    a.add_argument("--direction", choices=("dl", "ul"), default="dl")
    a.add_argument("--out", type=Path, required=True)
    return p


def _serve(args) -> int:
    from .server import ServerConfig, serve

    host, port = args.listen
    config = ServerConfig(host=host, port=port, max_concurrent_flows=args.max_flows, chunk_seed=args.seed,
                          idle_timeout_s=args.idle_timeout)
    try:
        asyncio.run(serve(config))
    except KeyboardInterrupt:
        pass
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _measure(args) -> int:
    from .experiment import TraceOptions, run_experiment
    from .pathprobe import load_asn_db

    tags = {}
    for item in args.tag:
        k, sep, v = item.partition("=")
        if not sep:
            print(f"error: --tag expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        tags[k] = v
    values = dict(server=args.server, flows=args.flows, duration_s=args.duration, pretest_s=args.pretest,
                  ping_count=args.pings, chunk_size_bytes=args.chunk, stats_interval_ms=args.stats_interval,
                  tags=tags)
    if args.run_id:
        values["run_id"] = args.run_id
    try:
        config = MeasurementConfig.from_dict(values)
        if args.flows_dl or args.flows_ul:
            config = config.with_values(flows_dl=args.flows_dl or config.flows_dl,
                                        flows_ul=args.flows_ul or config.flows_ul)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    trace = TraceOptions(enabled=not args.no_traceroute, max_ttl=args.max_ttl)
    res = asyncio.run(run_experiment(config, args.out, trace=trace, asn_db=load_asn_db(args.asn_db)))
    rec = res.record
    report = {
        "status": rec.status.value,
        "dl_rate_bps": None if res.dl is None else res.dl.rate_bps,
        "ul_rate_bps": None if res.ul is None else res.ul.rate_bps,
        "ping_median_ns": rec.ping.median_ns,
        "out": str(args.out),
        "errors": rec.errors,
    }
    print(json.dumps(report, indent=2))
    return {RunStatus.COMPLETE: 0, RunStatus.PARTIAL_FAILURE: EXIT_PARTIAL}.get(rec.status, EXIT_ABORTED)


def _batch(args) -> int:
    from .batch import BatchError, BatchSpec, execute, expand

    try:
        spec = BatchSpec.load(args.spec)
        configs = expand(spec)
    except (BatchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        for c in configs:
            print(c.run_id)
        return 0
    report = execute(spec, args.out)
    print(json.dumps({"batch_id": report.batch_id, "executed_count": len(report.runs),
                      "statuses": report.status_counts, "total_bytes": report.total_bytes,
                      "budget_exceeded": report.budget_exceeded}, indent=2, sort_keys=True))
    return 0


def _analyze(args) -> int:
    from .analysis import AnalysisOptions, analyze

    opts = AnalysisOptions(
        group_by=tuple(k.strip() for k in args.group_by.split(",") if k.strip()),
        grid_step_ns=int(round(args.grid_ms * 1e6)),
        saturation_t_ns=seconds_to_ns(args.saturation_s),
        checkpoints_ns=args.checkpoints,
        compare=args.compare,
        bucket_min=args.bucket_min,
        direction=args.direction,
    )
    try:
        paths = analyze(args.inputs, args.out, opts)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for name in sorted(paths):
        print(paths[name])
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler = {"serve": _serve, "measure": _measure, "batch": _batch, "analyze": _analyze}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
