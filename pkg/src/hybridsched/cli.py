"""hsctl: command-line client and offline simulation driver.

Thin by design: remote subcommands are plain HTTP calls against the
service with no policy of their own, and the simulate subcommand links
the engine directly so offline runs share the exact scheduler code the
service uses.

Exit codes: 0 success, 1 remote/API failure, 2 bad input, 3 simulation
guard tripped (non-terminating run).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import requests

from .engine import NonTerminating, SimConfig, run_trace
from .metrics import compare, utilization, wait_stats
from .model import ValidationError, cluster_spec_from_obj
from .service import ConfigError, load_config, serve
from .traces import MalformedTrace, read_trace

EXIT_OK = 0
EXIT_REMOTE = 1
EXIT_INPUT = 2
EXIT_GUARD = 3

DEFAULT_SERVER = "http://127.0.0.1:8080"


def _server(args) -> str:
    if args.server:
        return args.server
    return os.environ.get("HYBRIDSCHED_SERVER", DEFAULT_SERVER)


def _request(args, method: str, path: str, body=None, headers=None):
    url = _server(args).rstrip("/") + path
    try:
        resp = requests.request(method, url, json=body, headers=headers, timeout=10)
    except requests.RequestException as exc:
        print(f"hsctl: cannot reach {url}: {exc}", file=sys.stderr)
        return None
    return resp


def _finish(args, resp, render) -> int:
    """Common tail: --json passes the body through verbatim, else render."""
    if resp is None:
        return EXIT_REMOTE
    if resp.status_code >= 400:
        print(f"hsctl: {resp.status_code}: {resp.text}", file=sys.stderr)
        return EXIT_REMOTE
    if args.json:
        sys.stdout.write(resp.content.decode("utf-8"))
        return EXIT_OK
    render(resp.json())
    return EXIT_OK


def cmd_submit(args) -> int:
    try:
        with open(args.file, "r", encoding="utf-8") as fh:
            body = json.load(fh)
    except OSError as exc:
        print(f"hsctl: cannot read {args.file}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"hsctl: {args.file} is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT
    headers = {}
    user = args.user or (body.get("user_id") if isinstance(body, dict) else None)
    if user:
        headers["X-User-Id"] = user
    resp = _request(args, "POST", "/v1/jobs", body=body, headers=headers)
    return _finish(args, resp, lambda obj: print(obj["job_id"]))


def _render_status(obj):
    keys = ["job_id", "name", "user_id", "state", "submit_ms", "start_ms", "end_ms",
            "cluster_id", "node_indices", "worker_history"]
    for key in keys:
        if key in obj and obj[key] is not None:
            print(f"{key}: {obj[key]}")


def cmd_status(args) -> int:
    resp = _request(args, "GET", f"/v1/jobs/{args.job_id}")
    return _finish(args, resp, _render_status)


def cmd_result(args) -> int:
    resp = _request(args, "GET", f"/v1/jobs/{args.job_id}/result")
    return _finish(args, resp, _render_status)


def cmd_cancel(args) -> int:
    resp = _request(args, "DELETE", f"/v1/jobs/{args.job_id}")
    return _finish(args, resp, lambda obj: print(f"{obj['job_id']}: {obj['state']}"))


def cmd_clusters(args) -> int:
    def render(obj):
        rows = [("cluster", "kind", "nodes", "free", "busy", "down", "held", "speed")]
        for c in obj["clusters"]:
            rows.append((c["cluster_id"], c["kind"], str(c["node_count"]),
                         str(c["free_nodes"]), str(c["busy_nodes"]),
                         str(c["down_nodes"]), str(c["held_nodes"]),
                         str(c["speed_factor"])))
        widths = [max(len(r[i]) for r in rows) for i in range(8)]
        for row in rows:
            print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())

    resp = _request(args, "GET", "/v1/clusters")
    return _finish(args, resp, render)


def cmd_metrics(args) -> int:
    path = "/v1/metrics"
    if args.window_ms is not None:
        path += f"?window_ms={args.window_ms}"

    def render(obj):
        util = obj["utilization"]
        rows = [("cluster", "busy_node_ms", "avail_node_ms", "held_node_ms", "util")]
        for c in util["clusters"]:
            rows.append((c["cluster_id"], str(c["busy_node_ms"]),
                         str(c["available_node_ms"]), str(c["held_node_ms"]),
                         c["utilization"]))
        agg = util["aggregate"]
        rows.append(("TOTAL", str(agg["busy_node_ms"]), str(agg["available_node_ms"]),
                     str(agg["held_node_ms"]), agg["utilization"]))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        for row in rows:
            print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        waits = obj["waits"]
        print(f"jobs: {waits['n_jobs']}  started: {waits['n_started']}  "
              f"mean_wait_ms: {waits['mean_wait_ms']}  makespan_ms: {waits['makespan_ms']}")

    resp = _request(args, "GET", path)
    return _finish(args, resp, render)


def cmd_advance(args) -> int:
    if (args.until_ms is None) == (args.by_ms is None):
        print("hsctl: advance needs exactly one of --until-ms/--by-ms", file=sys.stderr)
        return EXIT_INPUT
    body = ({"until_ms": args.until_ms} if args.until_ms is not None
            else {"by_ms": args.by_ms})
    resp = _request(args, "POST", "/v1/clock/advance", body=body)
    return _finish(args, resp, lambda obj: print(f"now_ms: {obj['now_ms']}  "
                                                 f"events_fired: {obj['events_fired']}"))


def cmd_simulate(args) -> int:
    try:
        trace = read_trace(args.trace)
    except (OSError, MalformedTrace, ValidationError) as exc:
        print(f"hsctl: bad trace {args.trace}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        with open(args.clusters, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        clusters = [cluster_spec_from_obj(entry) for entry in raw]
    except (OSError, json.JSONDecodeError, ValidationError, TypeError) as exc:
        print(f"hsctl: bad clusters file {args.clusters}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.seed is not None:
        trace.rng_seed = args.seed   # provenance only; the engine draws nothing
    config = SimConfig()
    try:
        log, records = run_trace(trace, clusters, config)
    except NonTerminating as exc:
        print(f"hsctl: simulation did not terminate: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except ValidationError as exc:
        print(f"hsctl: invalid job in trace: {exc}", file=sys.stderr)
        return EXIT_INPUT
    log.write(args.out)
    last = log.events[-1].t_ms if log.events else 0
    window = (0, max(last, 1))
    report = utilization(log, clusters, window)
    stats = wait_stats(log)
    print(f"jobs: {len(records)}  events: {len(log)}  makespan_ms: {stats.makespan_ms}")
    print(f"log written to {args.out}")
    print(report.render_text())
    if args.compare_baseline:
        baseline = SimConfig(first_preference_only=True)
        result = compare(trace, clusters, clusters,
                         config_a=baseline, config_b=config,
                         label_a="partitioned", label_b="hybrid")
        print()
        print(result.render_text())
    return EXIT_OK


def cmd_serve(args) -> int:
    try:
        config = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"hsctl: bad config {args.config}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    serve(config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsctl",
        description="client for the hybrid scheduling platform")
    parser.add_argument("--server", default=None,
                        help=f"service URL (default {DEFAULT_SERVER}, "
                             "env HYBRIDSCHED_SERVER)")
    parser.add_argument("--json", action="store_true",
                        help="emit the raw API response body unmodified")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", help="submit a job spec file")
    p.add_argument("--file", required=True)
    p.add_argument("--user", default=None, help="override the auth user id")
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("status", help="show one job")
    p.add_argument("job_id")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("result", help="fetch a finished job's result manifest")
    p.add_argument("job_id")
    p.set_defaults(func=cmd_result)

    p = sub.add_parser("cancel", help="cancel a job")
    p.add_argument("job_id")
    p.set_defaults(func=cmd_cancel)

    p = sub.add_parser("clusters", help="list clusters and node states")
    p.set_defaults(func=cmd_clusters)

    p = sub.add_parser("metrics", help="utilization and wait statistics")
    p.add_argument("--window-ms", type=int, default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("advance", help="advance the service's virtual clock")
    p.add_argument("--until-ms", type=int, default=None)
    p.add_argument("--by-ms", type=int, default=None)
    p.set_defaults(func=cmd_advance)

    p = sub.add_parser("simulate", help="run a trace offline and write the event log")
    p.add_argument("--trace", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="events.jsonl")
    p.add_argument("--compare-baseline", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="run the service from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
