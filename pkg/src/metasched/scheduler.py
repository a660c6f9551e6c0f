"""Front door for jobs: routing across clusters and the scheduling tick."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import (
    ChannelDown,
    InvalidArgument,
    MappingNotFound,
    NotCancellable,
    RequestUnsatisfiable,
    UnknownCluster,
)
from .jobtable import JobTable
from .journal import EventLog, Journaled
from .model import (
    Endpoint,
    JobRecord,
    JobSpec,
    JobState,
    ResourceVector,
    advance_job_state,
    rv_sum,
)
from .nat import NatConfig, NatGateway
from .offers import PRIVATE_VIA_NAT, PUBLIC, AgentRecord, OfferEngine
from .policy import (
    NO_CAPACITY,
    PolicyConfig,
    SubmissionLimit,
    UsageLedger,
    UsageVector,
    Verdict,
    backfill_select,
    check_submission,
    compute_reservation,
)

log = logging.getLogger(__name__)

AFFINITY = "AFFINITY"
LEAST_PRESSURE = "LEAST_PRESSURE"
SPILLOVER = "SPILLOVER"
PARKED = "PARKED"


@dataclass(frozen=True)
class ClusterDescriptor:
    cluster_id: str
    display_name: str
    agent_ids: frozenset
    submission_limit: SubmissionLimit
    total_capacity: ResourceVector

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "display_name": self.display_name,
            "agent_ids": sorted(self.agent_ids),
            "max_active_per_tenant": self.submission_limit.max_active_per_tenant,
            "total_capacity": self.total_capacity.to_dict(),
        }


@dataclass(frozen=True)
class RoutingDecision:
    job_id: str
    chosen_cluster: Optional[str]
    considered: tuple
    reason: str

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "chosen_cluster": self.chosen_cluster,
            "considered": [[c, v.to_dict()] for c, v in self.considered],
            "reason": self.reason,
        }


@dataclass(frozen=True)
class SchedulerConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    nat: Optional[NatConfig] = field(default_factory=NatConfig)
    offer_ttl_s: float = 5
    liveness_timeout_s: float = 30
    max_requeues: int = 3
    tick_period_s: float = 1

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_dict(),
            "nat": self.nat.to_dict() if self.nat is not None else None,
            "offer_ttl_s": self.offer_ttl_s,
            "liveness_timeout_s": self.liveness_timeout_s,
            "max_requeues": self.max_requeues,
            "tick_period_s": self.tick_period_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerConfig":
        nat = d.get("nat")
        return cls(
            policy=PolicyConfig.from_dict(d.get("policy", {})),
            nat=NatConfig.from_dict(nat) if nat is not None else None,
            offer_ttl_s=d.get("offer_ttl_s", 5),
            liveness_timeout_s=d.get("liveness_timeout_s", 30),
            max_requeues=d.get("max_requeues", 3),
            tick_period_s=d.get("tick_period_s", 1),
        )


@dataclass
class _Planned:
    job: JobRecord
    agent_id: str
    backfill: bool


class MetaScheduler(Journaled):
    """Owns all scheduler state; every mutation lands in ``self.journal``.

    ``transport`` delivers launch messages to public agents; private agents
    are reached through the NAT gateway's relay.
    """

    def __init__(self, config: Optional[SchedulerConfig] = None, journal: Optional[EventLog] = None,
                 transport: Optional[Callable[[AgentRecord, bytes], object]] = None):
        self.config = config or SchedulerConfig()
        self.policy = self.config.policy
        self.journal = journal if journal is not None else EventLog()
        self.jobs = JobTable()
        self.ledger = UsageLedger(self.policy.half_life_s, self.journal)
        nat = self.config.nat
        self.gateway = NatGateway(nat, self.journal) if nat is not None and nat.enabled else None
        self.offers = OfferEngine(self.jobs, self.ledger, gateway=self.gateway,
                                  offer_ttl_s=self.config.offer_ttl_s,
                                  liveness_timeout_s=self.config.liveness_timeout_s,
                                  max_requeues=self.config.max_requeues, journal=self.journal)
        self.transport = transport
        self._clusters: dict[str, dict] = {}
        self._next_job = 1
        self._side_actions: list[dict] = []
        if self.gateway is not None:
            self.gateway.expiry_listeners.append(self._on_nat_expiry)
        self._routes = {
            "cluster": self, "job": self, "agent": self.offers, "offer": self.offers,
            "task": self.offers, "ledger": self.ledger, "nat": self.gateway,
        }

    # -- topology ------------------------------------------------------
    def add_cluster(self, cluster_id: str, display_name: str = "", now=0) -> None:
        if cluster_id in self._clusters:
            raise InvalidArgument(f"cluster {cluster_id} already exists")
        self._commit(now, "cluster.added", {
            "cluster_id": cluster_id, "display_name": display_name or cluster_id,
            "limit": self.policy.limit_for(cluster_id)})

    def _cluster(self, cluster_id: str) -> dict:
        try:
            return self._clusters[cluster_id]
        except KeyError:
            raise UnknownCluster(f"unknown cluster {cluster_id}") from None

    def register_agent(self, cluster_id: str, endpoint: Endpoint, total: ResourceVector,
                       reachability: str = PUBLIC, now=0) -> str:
        self._cluster(cluster_id)
        return self.offers.register_agent(cluster_id, endpoint, total, reachability, now)

    def register_private_agent(self, cluster_id: str, internal: Endpoint, total: ResourceVector,
                               now=0) -> tuple[str, object]:
        """Map a private agent through the gateway, then register its public endpoint."""
        if self.gateway is None:
            raise InvalidArgument("NAT gateway disabled; private agents cannot join")
        self._cluster(cluster_id)
        mapping = self.gateway.register_private_agent(internal, now)
        agent_id = self.offers.register_agent(cluster_id, mapping.public, total,
                                              PRIVATE_VIA_NAT, now)
        return agent_id, mapping

    def heartbeat(self, agent_id: str, now) -> str:
        """Agent heartbeat; private agents renew their NAT lease with it."""
        a = self.offers.agent(agent_id)
        if a.reachability == PRIVATE_VIA_NAT:
            mapping = self.gateway.lookup_public(a.endpoint, now)
            self.gateway.renew(mapping.mapping_id, now)
        return self.offers.heartbeat(agent_id, now)

    def _on_nat_expiry(self, mapping, now):
        for a in list(self.offers.agents.values()):
            if (a.reachability == PRIVATE_VIA_NAT and a.endpoint == mapping.public
                    and a.liveness == "ACTIVE"):
                self._side_actions += self.offers.mark_lost(a.agent_id, now, "nat_lease_expired")

    def clusters(self) -> list[ClusterDescriptor]:
        out = []
        for cid in sorted(self._clusters):
            c = self._clusters[cid]
            members = [a for a in self.offers.agents.values() if a.cluster_id == cid]
            out.append(ClusterDescriptor(
                cid, c["display_name"], frozenset(a.agent_id for a in members),
                SubmissionLimit(cid, c["limit"]), rv_sum(a.total for a in members)))
        return out

    def limits(self) -> dict[str, SubmissionLimit]:
        return {cid: SubmissionLimit(cid, c["limit"]) for cid, c in self._clusters.items()}

    def usage_vector(self, tenant_id: str, now) -> UsageVector:
        decayed = self.ledger.decay_ledger(now)
        core, mem = decayed.get(tenant_id, (0.0, 0.0))
        running = sum(1 for j in self.jobs if j.tenant_id == tenant_id
                      and j.state in (JobState.LAUNCHED, JobState.RUNNING))
        queued = {c: len(self.jobs.queue(c, tenant_id)) for c in self._clusters}
        return UsageVector(core, mem, running, {c: n for c, n in queued.items() if n})

    # -- admission and routing -----------------------------------------
    def _can_fit(self, cluster_id: str, request: ResourceVector) -> bool:
        return any(request.fits(a.total) for a in self.offers.agents.values()
                   if a.cluster_id == cluster_id)

    def check_submission(self, tenant_id: str, cluster_id: str) -> Verdict:
        return check_submission(tenant_id, cluster_id, self.limits(), self.jobs.active_counts)

    def _route(self, job: JobRecord) -> RoutingDecision:
        tenant = job.tenant_id
        affinity = job.spec.cluster_affinity

        def pressure(cid):
            return self.jobs.active_count(tenant, cid) / self._clusters[cid]["limit"]

        order = sorted((c for c in self._clusters if c != affinity),
                       key=lambda c: (pressure(c), c))
        if affinity is not None:
            order.insert(0, affinity)
        considered = []
        chosen = None
        for cid in order:
            if not self._can_fit(cid, job.request):
                considered.append((cid, Verdict(NO_CAPACITY, self.jobs.active_count(tenant, cid),
                                                self._clusters[cid]["limit"])))
                continue
            v = self.check_submission(tenant, cid)
            considered.append((cid, v))
            if v.admitted:
                chosen = cid
                break
        if chosen is None:
            reason = PARKED
        elif chosen == affinity:
            reason = AFFINITY
        elif len(considered) > 1:
            reason = SPILLOVER
        else:
            reason = LEAST_PRESSURE
        return RoutingDecision(job.job_id, chosen, tuple(considered), reason)

    def submit_job(self, spec: JobSpec, now) -> tuple[str, RoutingDecision]:
        if spec.cluster_affinity is not None:
            self._cluster(spec.cluster_affinity)
        if not any(self._can_fit(c, spec.request) for c in self._clusters):
            raise RequestUnsatisfiable(f"no agent in any cluster can hold {spec.request}")
        self.ledger.add_tenant(spec.tenant_id, self.policy.weight_for(spec.tenant_id), now)
        job_id = f"j{self._next_job:06d}"
        self._commit(now, "job.submitted", {"job_id": job_id, "seq": self._next_job,
                                            "spec": spec.to_dict()})
        decision = self._route(self.jobs.get(job_id))
        self._record_route(decision, now)
        return job_id, decision

    def _record_route(self, decision: RoutingDecision, now):
        body = decision.to_dict()
        if decision.chosen_cluster is None:
            self._commit(now, "job.parked", body)
        else:
            self._commit(now, "job.queued", body)

    def job_status(self, job_id: str) -> JobRecord:
        return self.jobs.get(job_id)

    def list_jobs(self, tenant_id: Optional[str] = None) -> list[JobRecord]:
        jobs = sorted(self.jobs, key=lambda j: j.seq)
        if tenant_id is not None:
            jobs = [j for j in jobs if j.tenant_id == tenant_id]
        return jobs

    def cancel_job(self, job_id: str, now) -> JobRecord:
        job = self.jobs.get(job_id)
        if job.state not in (JobState.SUBMITTED, JobState.QUEUED):
            raise NotCancellable(f"{job_id} is {job.state}")
        self._commit(now, "job.cancelled", {"job_id": job_id})
        return self.jobs.get(job_id)

    # -- agent-side status updates ---------------------------------------
    def task_running(self, job_id: str, now) -> JobRecord:
        return self.offers.task_running(job_id, now)

    def complete_task(self, job_id: str, outcome: str, now) -> JobRecord:
        return self.offers.complete_task(job_id, outcome, now)

    # -- the tick --------------------------------------------------------
    def tenant_order(self, now):
        """Offer order: fair-share rank, or per-cluster oldest-job-first for fcfs."""
        if self.policy.ordering == "fcfs":
            order = {}
            for cid in self.jobs.queued_clusters():
                seen = []
                for j in self.jobs.queue(cid):
                    if j.tenant_id not in seen:
                        seen.append(j.tenant_id)
                order[cid] = seen
            return order
        totals = rv_sum(a.total for a in self.offers.active_agents())
        return self.ledger.rank(self.ledger.tenants(), totals, now)

    def _cluster_queue(self, cluster_id: str, order) -> list[JobRecord]:
        q = self.jobs.queue(cluster_id)
        if isinstance(order, dict):
            return q
        rank = {t: i for i, t in enumerate(order)}
        return sorted(q, key=lambda j: (rank.get(j.tenant_id, len(rank)), j.seq, j.job_id))

    def _est_finish(self, job: JobRecord, now):
        if job.t_start is None:
            return now + job.spec.est_duration_s
        return max(now, job.t_start + job.spec.est_duration_s)

    def plan_cluster(self, cluster_id: str, order, now) -> tuple[list[_Planned], object]:
        """Launch plan for one cluster: in-order first-fit, then EASY backfill."""
        agents = [a for a in self.offers.active_agents(cluster_id)
                  if a.agent_id not in self.offers._offer_for_agent]
        free = {a.agent_id: a.free for a in agents}
        queue = self._cluster_queue(cluster_id, order)
        plan: list[_Planned] = []
        i = 0
        while i < len(queue):
            job = queue[i]
            aid = next((a.agent_id for a in agents if job.request.fits(free[a.agent_id])), None)
            if aid is None:
                break
            plan.append(_Planned(job, aid, False))
            free[aid] = free[aid] - job.request
            i += 1
        if i == len(queue) or self.policy.backfill == "off":
            return plan, None

        head = queue[i]
        reservation = None
        for a in agents:
            if not head.request.fits(a.total):
                continue
            running = [(j.request, self._est_finish(j, now))
                       for j in self.jobs.placed_on(a.agent_id)]
            running += [(p.job.request, now + p.job.spec.est_duration_s)
                        for p in plan if p.agent_id == a.agent_id]
            r = compute_reservation(head.spec, running, a.total, now, job_id=head.job_id,
                                    cluster_id=cluster_id, agent_id=a.agent_id)
            if reservation is None or r.start_at < reservation.start_at:
                reservation = r
        if reservation is None and any(head.request.fits(a.total)
                                       for a in self.offers.active_agents(cluster_id)):
            # the head's only hosts are busy with an offer; no unprotected backfill
            return plan, None

        rest = queue[i + 1:]
        taken = set()
        for a in agents:
            cand = [head] + [j for j in rest if j.job_id not in taken]
            if len(cand) == 1:
                break
            res = reservation if reservation is not None and reservation.agent_id == a.agent_id \
                else None
            chosen = backfill_select(cand, free[a.agent_id], res, now)
            by_id = {j.job_id: j for j in cand}
            for jid in chosen:
                plan.append(_Planned(by_id[jid], a.agent_id, True))
                free[a.agent_id] = free[a.agent_id] - by_id[jid].request
                taken.add(jid)
        return plan, reservation

    def schedule_tick(self, now) -> list[dict]:
        actions: list[dict] = []
        # 1. liveness and lease sweeps
        self._side_actions = []
        if self.gateway is not None:
            self.gateway.sweep_expired(now)
        actions += self._side_actions
        self._side_actions = []
        actions += self.offers.sweep(now)
        # 2-3. decayed fair-share ranking (ledger decays lazily inside rank)
        order = self.tenant_order(now)
        # 4-5. plan per cluster, then drive offers until the plan is placed
        pending: dict[tuple, list[_Planned]] = {}
        for cid in self.jobs.queued_clusters():
            plan, reservation = self.plan_cluster(cid, order, now)
            if reservation is not None:
                actions.append({"action": "reserve", **reservation.to_dict()})
            for p in plan:
                pending.setdefault((p.agent_id, p.job.tenant_id), []).append(p)
        actions += self._serve_offers(pending, order, now)
        # 6. retry parked jobs
        for job in self.jobs.parked():
            decision = self._route(job)
            if decision.chosen_cluster is not None:
                self._record_route(decision, now)
                actions.append({"action": "unpark", "job_id": job.job_id,
                                "cluster_id": decision.chosen_cluster,
                                "reason": decision.reason})
        return actions

    def _serve_offers(self, pending, order, now) -> list[dict]:
        actions = []
        n_tenants = len(self.ledger.tenants())
        for _ in range(2 * n_tenants + 2):
            if not pending:
                break
            wanted = {aid for aid, _ in pending}
            offers = self.offers.generate_offers(order, now, agent_ids=wanted)
            if not offers:
                break
            for offer in offers:
                mine = pending.pop((offer.agent_id, offer.tenant_id), None)
                if not mine:
                    self.offers.decline_offer(offer.offer_id, self.config.tick_period_s, now)
                    actions.append({"action": "decline", "offer_id": offer.offer_id,
                                    "agent_id": offer.agent_id, "tenant_id": offer.tenant_id})
                    continue
                receipts = self.offers.accept_offer(
                    offer.offer_id, [(p.job.job_id, p.job.request) for p in mine], now)
                for p, r in zip(mine, receipts):
                    act = {"action": "backfill" if p.backfill else "launch", "job_id": r.job_id,
                           "agent_id": r.agent_id, "cluster_id": r.cluster_id,
                           "offer_id": offer.offer_id}
                    act["delivery"] = self._deliver_launch(r, p.job, now)
                    actions.append(act)
        for (aid, tenant), plans in sorted(pending.items()):
            for p in plans:
                actions.append({"action": "deferred", "job_id": p.job.job_id, "agent_id": aid})
        return actions

    def _deliver_launch(self, receipt, job: JobRecord, now) -> str:
        msg = json.dumps({"type": "launch", "job_id": job.job_id, "agent_id": receipt.agent_id,
                          "command": job.spec.command, "request": job.request.to_dict(),
                          "est_duration_s": job.spec.est_duration_s},
                         sort_keys=True, separators=(",", ":")).encode("utf-8")
        try:
            if receipt.reachability == PRIVATE_VIA_NAT:
                self.gateway.relay(receipt.endpoint, msg, now)
                return "nat_relay"
            if self.transport is not None:
                self.transport(self.offers.agents[receipt.agent_id], msg)
            return "direct"
        except (ChannelDown, MappingNotFound) as exc:
            # the agent is lost for good once its liveness times out
            log.warning("launch of %s undelivered: %s", job.job_id, exc)
            return "undelivered"

    # -- event handlers --------------------------------------------------
    def _on_added(self, t, p):
        self._clusters[p["cluster_id"]] = {"display_name": p["display_name"], "limit": p["limit"]}

    def _on_submitted(self, t, p):
        spec = JobSpec.from_dict(p["spec"])
        self.jobs.put(JobRecord(p["job_id"], spec, JobState.SUBMITTED, t_submit=t,
                                seq=p["seq"], t_updated=t))
        self._next_job = max(self._next_job, p["seq"] + 1)

    def _on_queued(self, t, p):
        job = self.jobs.get(p["job_id"])
        self.jobs.put(advance_job_state(job, "queued", t, cluster_id=p["chosen_cluster"]))

    def _on_parked(self, t, p):
        pass

    def _on_cancelled(self, t, p):
        job = self.jobs.get(p["job_id"])
        self.jobs.put(advance_job_state(job, "cancelled", t))

    def apply_record(self, rec: dict) -> None:
        kind = rec["kind"]
        owner = self._routes.get(kind.split(".", 1)[0])
        if owner is None:
            return  # harness annotations such as sim.end
        owner.apply(rec["t"], kind, rec["payload"])

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "clusters": {c: dict(v) for c, v in sorted(self._clusters.items())},
            "next_job": self._next_job,
            "jobs": self.jobs.to_list(),
            "ledger": self.ledger.to_dict(),
            "offers": self.offers.to_dict(),
            "nat": self.gateway.to_dict() if self.gateway is not None else None,
        }

    @classmethod
    def from_dict(cls, state: dict, journal: Optional[EventLog] = None,
                  transport=None) -> "MetaScheduler":
        sched = cls(SchedulerConfig.from_dict(state["config"]), journal, transport)
        sched._clusters = {c: dict(v) for c, v in state["clusters"].items()}
        sched._next_job = state["next_job"]
        for jd in state["jobs"]:
            sched.jobs.put(JobRecord.from_dict(jd))
        sched.ledger.load_dict(state["ledger"])
        sched.offers.load_dict(state["offers"])
        if sched.gateway is not None and state.get("nat") is not None:
            sched.gateway.load_dict(state["nat"])
        return sched


def restore(snapshot_state: Optional[dict], log_tail, config: Optional[SchedulerConfig] = None,
            journal: Optional[EventLog] = None, transport=None) -> MetaScheduler:
    """Rebuild live state from a snapshot (or pristine config) plus later log records."""
    if snapshot_state is not None:
        sched = MetaScheduler.from_dict(snapshot_state, journal=None, transport=transport)
    else:
        sched = MetaScheduler(config, journal=None, transport=transport)
    # replay must not write the records a second time
    for comp in (sched, sched.ledger, sched.offers, sched.gateway):
        if comp is not None:
            comp.journal = None
    for rec in log_tail:
        sched.apply_record(rec)
    target = journal if journal is not None else EventLog()
    for comp in (sched, sched.ledger, sched.offers, sched.gateway):
        if comp is not None:
            comp.journal = target
    sched.journal = target
    return sched
