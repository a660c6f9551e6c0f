"""Metrics and audits computed purely from an event trace."""

from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass, field

from ..errors import TraceMalformed
from ..model import ResourceVector


@dataclass
class WaitStats:
    count: int = 0
    mean_s: float = 0.0
    median_s: float = 0.0
    p95_s: float = 0.0

    @classmethod
    def of(cls, waits: list[float]) -> "WaitStats":
        if not waits:
            return cls()
        if len(waits) == 1:
            p95 = waits[0]
        else:
            p95 = statistics.quantiles(waits, n=20, method="inclusive")[-1]
        return cls(len(waits), statistics.fmean(waits), statistics.median(waits), p95)

    def to_dict(self) -> dict:
        return {"count": self.count, "mean_s": self.mean_s, "median_s": self.median_s,
                "p95_s": self.p95_s}


@dataclass
class Metrics:
    overall: WaitStats = field(default_factory=WaitStats)
    per_tenant: dict = field(default_factory=dict)
    utilization: dict = field(default_factory=dict)
    jobs_submitted: int = 0
    jobs_completed: int = 0
    jobs_failed: int = 0
    jobs_cancelled: int = 0
    parked_then_recovered: int = 0
    horizon_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_tenant": {t: {"wait": w.to_dict(), "jobs_completed": n}
                           for t, (w, n) in sorted(self.per_tenant.items())},
            "utilization": dict(sorted(self.utilization.items())),
            "jobs_submitted": self.jobs_submitted,
            "jobs_completed": self.jobs_completed,
            "jobs_failed": self.jobs_failed,
            "jobs_cancelled": self.jobs_cancelled,
            "parked_then_recovered": self.parked_then_recovered,
            "horizon_s": self.horizon_s,
        }


def _get(rec, *keys):
    try:
        v = rec
        for k in keys:
            v = v[k]
        return v
    except (KeyError, TypeError):
        raise TraceMalformed(f"record missing {'.'.join(keys)}: {rec!r}") from None


def compute_metrics(trace) -> Metrics:
    """Wait times, per-cluster cpu utilization and job counts from a trace."""
    submitted = {}
    tenant_of = {}
    started = {}
    completed = defaultdict(int)
    agent_cluster = {}
    capacity = defaultdict(int)      # cluster -> centicpus
    alloc = defaultdict(int)         # cluster -> centicpus currently allocated
    area = defaultdict(float)        # cluster -> centicpu-seconds
    job_agent = {}
    parked = set()
    recovered = 0
    counts = {"finished": 0, "failed": 0, "cancelled": 0}
    first_t = None
    last_t = 0.0
    end_t = None
    prev_t = None
    clusters = []
    offer_agent = {}

    for rec in trace:
        t = _get(rec, "t")
        kind = _get(rec, "kind")
        p = _get(rec, "payload")
        if prev_t is not None and t < prev_t:
            raise TraceMalformed(f"time went backwards at {rec!r}")
        if prev_t is not None:
            for c, a in alloc.items():
                area[c] += a * (t - prev_t)
        if first_t is None:
            first_t = t
        prev_t = t
        last_t = t
        if kind == "cluster.added":
            clusters.append(_get(p, "cluster_id"))
        elif kind == "agent.registered":
            cid = _get(p, "cluster_id")
            agent_cluster[_get(p, "agent_id")] = cid
            capacity[cid] += ResourceVector.from_dict(_get(p, "total")).centicpus
        elif kind == "job.submitted":
            jid = _get(p, "job_id")
            submitted[jid] = (t, ResourceVector.from_dict(_get(p, "spec", "request")))
            tenant_of[jid] = _get(p, "spec", "tenant_id")
        elif kind == "job.parked":
            parked.add(_get(p, "job_id"))
        elif kind == "job.queued":
            jid = _get(p, "job_id")
            if jid in parked:
                parked.discard(jid)
                recovered += 1
        elif kind == "offer.accepted":
            oid = _get(p, "offer_id")
            aid = offer_agent.get(oid)
            for jid in _get(p, "job_ids"):
                job_agent[jid] = aid
                if jid not in submitted or aid not in agent_cluster:
                    raise TraceMalformed(f"launch of unknown job/agent in {rec!r}")
                alloc[agent_cluster[aid]] += submitted[jid][1].centicpus
        elif kind == "offer.issued":
            offer_agent[_get(p, "offer_id")] = _get(p, "agent_id")
        elif kind == "task.running":
            started[_get(p, "job_id")] = t
        elif kind in ("task.finished", "task.failed", "task.lost"):
            jid = _get(p, "job_id")
            aid = job_agent.pop(jid, None)
            if aid is None:
                raise TraceMalformed(f"{kind} for job not placed: {rec!r}")
            alloc[agent_cluster[aid]] -= submitted[jid][1].centicpus
            if kind == "task.finished":
                counts["finished"] += 1
                completed[tenant_of[jid]] += 1
            elif kind == "task.failed":
                counts["failed"] += 1
            else:
                started.pop(jid, None)
        elif kind == "job.cancelled":
            counts["cancelled"] += 1
        elif kind == "sim.end":
            end_t = t

    # the run spans from its first record (0 in simulations) to sim.end
    horizon = (end_t if end_t is not None else last_t) - (first_t or 0.0)
    waits = defaultdict(list)
    for jid, ts in started.items():
        waits[tenant_of[jid]].append(ts - submitted[jid][0])
    all_waits = [w for jid in sorted(started) for w in [started[jid] - submitted[jid][0]]]
    tenants = sorted(set(tenant_of.values()))
    m = Metrics(
        overall=WaitStats.of(all_waits),
        per_tenant={t: (WaitStats.of(waits[t]), completed[t]) for t in tenants},
        utilization={c: (area[c] / (capacity[c] * horizon) if capacity[c] and horizon else 0.0)
                     for c in clusters},
        jobs_submitted=len(submitted),
        jobs_completed=counts["finished"],
        jobs_failed=counts["failed"],
        jobs_cancelled=counts["cancelled"],
        parked_then_recovered=recovered,
        horizon_s=horizon,
    )
    return m


def audit_trace(trace) -> list[str]:
    """Replay a trace with a minimal independent model and report violations.

    Checks that agent allocation never exceeds its total, that every offer
    carries exactly the agent's free vector, and that active jobs per
    (tenant, cluster) never exceed the cluster's limit.
    """
    problems = []
    totals = {}
    alloc = {}
    offer_agent = {}
    request = {}
    tenant_of = {}
    job_agent = {}
    job_cluster = {}
    limit = {}
    active = defaultdict(int)

    def leave(jid):
        key = (tenant_of[jid], job_cluster.pop(jid))
        active[key] -= 1

    for i, rec in enumerate(trace):
        kind = _get(rec, "kind")
        p = _get(rec, "payload")
        if kind == "cluster.added":
            limit[p["cluster_id"]] = p["limit"]
        elif kind == "agent.registered":
            totals[p["agent_id"]] = ResourceVector.from_dict(p["total"])
            alloc[p["agent_id"]] = ResourceVector(0, 0, 0)
        elif kind == "job.submitted":
            request[p["job_id"]] = ResourceVector.from_dict(p["spec"]["request"])
            tenant_of[p["job_id"]] = p["spec"]["tenant_id"]
        elif kind == "job.queued":
            jid, cid = p["job_id"], p["chosen_cluster"]
            job_cluster[jid] = cid
            key = (tenant_of[jid], cid)
            active[key] += 1
            if active[key] > limit[cid]:
                problems.append(f"#{i}: {key} has {active[key]} active jobs, limit {limit[cid]}")
        elif kind == "offer.issued":
            aid = p["agent_id"]
            offer_agent[p["offer_id"]] = aid
            free = totals[aid] - alloc[aid]
            if ResourceVector.from_dict(p["resources"]) != free:
                problems.append(f"#{i}: offer {p['offer_id']} carries {p['resources']}, "
                                f"free is {free.to_dict()}")
        elif kind == "offer.accepted":
            aid = offer_agent[p["offer_id"]]
            a = alloc[aid]
            for jid in p["job_ids"]:
                a = a + request[jid]
                job_agent[jid] = aid
            alloc[aid] = a
            if not a.fits(totals[aid]):
                problems.append(f"#{i}: agent {aid} allocated {a.to_dict()} over "
                                f"{totals[aid].to_dict()}")
        elif kind in ("task.finished", "task.failed", "task.lost"):
            jid = p["job_id"]
            aid = job_agent.pop(jid)
            alloc[aid] = alloc[aid] - request[jid]
            if kind != "task.lost":
                leave(jid)
        elif kind == "job.cancelled":
            if p["job_id"] in job_cluster:
                leave(p["job_id"])
    return problems
