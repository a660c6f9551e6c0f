"""Operator command line: ``metasched <command> ...``.

Exit codes: 0 success, 1 user error (bad arguments, unknown job, ...),
2 server or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import SchedulerError
from .model import Endpoint

EXIT_OK, EXIT_USER, EXIT_SERVER = 0, 1, 2
DEFAULT_SERVER = "127.0.0.1:7070"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; usage errors are user errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    remote = _Parser(add_help=False)
    remote.add_argument("--server", default=os.environ.get("METASCHED_SERVER", DEFAULT_SERVER),
                        help="scheduler address host:port (env METASCHED_SERVER)")

    p = _Parser(prog="metasched", description="Multi-cluster meta-scheduler")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", parents=[common], help="run the scheduler service")
    s.add_argument("--config", help="service config JSON (env METASCHED_CONFIG)")

    s = sub.add_parser("submit", parents=[common, remote], help="submit a job")
    s.add_argument("--tenant", required=True)
    s.add_argument("--cpus", required=True, type=float)
    s.add_argument("--mem-mb", required=True, type=int)
    s.add_argument("--disk-mb", type=int, default=0)
    s.add_argument("--est-seconds", required=True, type=float)
    s.add_argument("--cmd", required=True)
    s.add_argument("--cluster", help="cluster affinity")

    for name, help_ in (("status", "show one job"), ("cancel", "cancel a queued job")):
        s = sub.add_parser(name, parents=[common, remote], help=help_)
        s.add_argument("job_id")

    s = sub.add_parser("jobs", parents=[common, remote], help="list jobs")
    s.add_argument("--tenant")
    for name in ("clusters", "agents", "offers", "metrics"):
        sub.add_parser(name, parents=[common, remote], help=f"list {name}")

    s = sub.add_parser("sim", parents=[common], help="run a simulation")
    s.add_argument("--config", required=True, help="scenario JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--compare", help="comma-separated policy presets, e.g. fcfs,fairshare_backfill")
    s.add_argument("--report", help="write the JSON report here")
    s.add_argument("--trace", help="write the event trace (JSON lines) here")
    return p


def _out(args, data, text: str):
    if args.json:
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(text)


def _fmt_job(j: dict) -> str:
    r = j["spec"]["request"]
    return (f"{j['job_id']}  {j['state']:<9} tenant={j['spec']['tenant_id']} "
            f"cluster={j.get('cluster_id') or '-'} agent={j.get('agent_id') or '-'} "
            f"cpus={r['cpus']} mem_mb={r['mem_mb']}")


def _remote(args, type_: str, payload: dict):
    from .service.client import Client

    try:
        host, port = str(Endpoint.parse(args.server)).rsplit(":", 1)
    except SchedulerError as exc:
        raise UsageError(f"--server: {exc}") from None
    with Client(host, int(port)) as c:
        reply = c.request(type_, payload)
    if reply.type == "error":
        code = EXIT_USER if reply.payload.get("user_error", True) else EXIT_SERVER
        print(f"error [{reply.payload.get('code')}]: {reply.payload.get('message')}",
              file=sys.stderr)
        return None, code
    return reply.payload, EXIT_OK


def cmd_submit(args):
    payload = {"tenant_id": args.tenant, "command": args.cmd,
               "request": {"cpus": args.cpus, "mem_mb": args.mem_mb, "disk_mb": args.disk_mb},
               "est_duration_s": args.est_seconds}
    if args.cluster:
        payload["cluster_affinity"] = args.cluster
    body, code = _remote(args, "submit", payload)
    if body is not None:
        routed = body["routing"]["chosen_cluster"] or "parked"
        _out(args, body, f"{body['job_id']}\t{routed}")
    return code


def cmd_status(args):
    body, code = _remote(args, "status", {"job_id": args.job_id})
    if body is not None:
        _out(args, body, _fmt_job(body["job"]))
    return code


def cmd_cancel(args):
    body, code = _remote(args, "cancel", {"job_id": args.job_id})
    if body is not None:
        _out(args, body, _fmt_job(body["job"]))
    return code


def cmd_jobs(args):
    payload = {"tenant_id": args.tenant} if args.tenant else {}
    body, code = _remote(args, "list_jobs", payload)
    if body is not None:
        _out(args, body, "\n".join(_fmt_job(j) for j in body["jobs"]) or "(no jobs)")
    return code


def cmd_clusters(args):
    body, code = _remote(args, "clusters", {})
    if body is not None:
        lines = [f"{c['cluster_id']:<12} agents={len(c['agent_ids'])} "
                 f"limit={c['max_active_per_tenant']} cpus={c['total_capacity']['cpus']}"
                 for c in body["clusters"]]
        _out(args, body, "\n".join(lines) or "(no clusters)")
    return code


def cmd_agents(args):
    body, code = _remote(args, "agents", {})
    if body is not None:
        lines = [f"{a['agent_id']}  {a['cluster_id']:<12} {a['liveness']:<6} "
                 f"{a['reachability']:<15} {a['endpoint']['host']}:{a['endpoint']['port']}"
                 for a in body["agents"]]
        _out(args, body, "\n".join(lines) or "(no agents)")
    return code


def cmd_offers(args):
    body, code = _remote(args, "offers", {})
    if body is not None:
        lines = [f"{o['offer_id']}  agent={o['agent_id']} tenant={o['tenant_id']} "
                 f"expires_at={o['expires_at']}" for o in body["offers"]]
        _out(args, body, "\n".join(lines) or "(no outstanding offers)")
    return code


def cmd_metrics(args):
    body, code = _remote(args, "metrics", {})
    if body is not None:
        m = body["metrics"]
        _out(args, body, f"jobs completed {m['jobs_completed']}, "
                         f"mean wait {m['overall']['mean_s']:.1f}s")
    return code


def cmd_sim(args):
    from .policy import PolicyConfig
    from .sim.harness import SimConfig, compare_policies, run_simulation

    config = SimConfig.load(args.config)
    if args.seed is not None:
        config = config.with_(seed=args.seed)
    if args.compare:
        names = [n.strip() for n in args.compare.split(",") if n.strip()]
        report = compare_policies(config, [PolicyConfig.from_dict(n) for n in names])
        lines = [f"{r['policy']:<20} mean wait {r['metrics']['overall']['mean_s']:8.1f}s  "
                 f"trace {r['trace_hash'][:16]}" for r in report["runs"]]
        lines += [f"delta {d['policy']} - {d['versus']}: mean wait {d['mean_wait_s']:+.1f}s"
                  for d in report["deltas"]]
        text = "\n".join(lines)
    else:
        journal, metrics = run_simulation(config)
        report = {"seed": config.seed, "policy": config.policy.to_dict(),
                  "metrics": metrics.to_dict(), "trace_hash": journal.trace_hash()}
        if args.trace:
            with open(args.trace, "w", encoding="utf-8") as fh:
                fh.write(journal.to_jsonl())
        text = (f"trace_hash {report['trace_hash']}\n"
                f"jobs completed {metrics.jobs_completed}/{metrics.jobs_submitted}, "
                f"mean wait {metrics.overall.mean_s:.1f}s")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _out(args, report, text)
    return EXIT_OK


def cmd_serve(args):
    from .service.config import ServiceConfig
    from .service.server import serve

    config = ServiceConfig.load(args.config)

    def ready(server):
        host, _ = config.host_port
        print(f"listening on {host}:{server.port}", flush=True)

    serve(config, ready)
    return EXIT_OK


COMMANDS = {
    "serve": cmd_serve, "submit": cmd_submit, "status": cmd_status, "cancel": cmd_cancel,
    "jobs": cmd_jobs, "clusters": cmd_clusters, "agents": cmd_agents, "offers": cmd_offers,
    "metrics": cmd_metrics, "sim": cmd_sim,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SchedulerError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_USER if exc.user_error else EXIT_SERVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERVER


if __name__ == "__main__":
    sys.exit(main())
