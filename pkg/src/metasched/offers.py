"""Agent registry and the two-level offer protocol.

The master tracks every agent across every cluster (public or NAT-mapped),
offers each agent's whole free vector to one tenant at a time, and binds
accepted launches to agents.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence, Union

from .errors import (
    AlreadyRegistered,
    InvalidArgument,
    JobNotQueued,
    JobNotRunning,
    OfferExpired,
    OfferNotFound,
    OverSubscription,
    UnknownAgent,
)
from .jobtable import JobTable
from .journal import Journaled
from .model import (
    Endpoint,
    JobState,
    ResourceVector,
    ZERO,
    advance_job_state,
    rv_sum,
)

PUBLIC = "PUBLIC"
PRIVATE_VIA_NAT = "PRIVATE_VIA_NAT"
REACHABILITIES = (PUBLIC, PRIVATE_VIA_NAT)
ACTIVE = "ACTIVE"
LOST = "LOST"


@dataclass(frozen=True)
class AgentRecord:
    agent_id: str
    cluster_id: str
    endpoint: Endpoint
    reachability: str
    total: ResourceVector
    allocated: ResourceVector = ZERO
    liveness: str = ACTIVE
    last_heartbeat: float = 0

    @property
    def free(self) -> ResourceVector:
        return self.total - self.allocated

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "cluster_id": self.cluster_id,
            "endpoint": self.endpoint.to_dict(),
            "reachability": self.reachability,
            "total": self.total.to_dict(),
            "allocated": self.allocated.to_dict(),
            "liveness": self.liveness,
            "last_heartbeat": self.last_heartbeat,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentRecord":
        return cls(d["agent_id"], d["cluster_id"], Endpoint.from_dict(d["endpoint"]),
                   d["reachability"], ResourceVector.from_dict(d["total"]),
                   ResourceVector.from_dict(d["allocated"]), d["liveness"],
                   d["last_heartbeat"])


@dataclass(frozen=True)
class Offer:
    offer_id: str
    agent_id: str
    cluster_id: str
    tenant_id: str
    resources: ResourceVector
    issued_at: float
    expires_at: float

    def to_dict(self) -> dict:
        return {
            "offer_id": self.offer_id,
            "agent_id": self.agent_id,
            "cluster_id": self.cluster_id,
            "tenant_id": self.tenant_id,
            "resources": self.resources.to_dict(),
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Offer":
        return cls(d["offer_id"], d["agent_id"], d["cluster_id"], d["tenant_id"],
                   ResourceVector.from_dict(d["resources"]), d["issued_at"], d["expires_at"])


@dataclass(frozen=True)
class LaunchReceipt:
    job_id: str
    agent_id: str
    cluster_id: str
    endpoint: Endpoint
    reachability: str


class OfferEngine(Journaled):
    def __init__(self, jobs: Optional[JobTable] = None, ledger=None, *, gateway=None,
                 offer_ttl_s: float = 5, liveness_timeout_s: float = 30,
                 max_requeues: int = 3, journal=None):
        self.jobs = jobs if jobs is not None else JobTable()
        self.ledger = ledger
        self.gateway = gateway
        self.offer_ttl_s = offer_ttl_s
        self.liveness_timeout_s = liveness_timeout_s
        self.max_requeues = max_requeues
        self.journal = journal
        self.agents: dict[str, AgentRecord] = {}
        self.offers: dict[str, Offer] = {}
        self.filters: dict[tuple, float] = {}  # (agent, tenant) -> filtered until
        self._by_endpoint: dict[tuple, str] = {}
        self._offer_for_agent: dict[str, str] = {}
        self._next_agent = 1
        self._next_offer = 1

    # -- registry ------------------------------------------------------
    def agent(self, agent_id: str) -> AgentRecord:
        try:
            return self.agents[agent_id]
        except KeyError:
            raise UnknownAgent(f"unknown agent {agent_id}") from None

    def active_agents(self, cluster_id: Optional[str] = None) -> list[AgentRecord]:
        return [a for k, a in sorted(self.agents.items())
                if a.liveness == ACTIVE and (cluster_id is None or a.cluster_id == cluster_id)]

    def find_agent(self, cluster_id: str, endpoint: Endpoint) -> Optional[str]:
        return self._by_endpoint.get((cluster_id, endpoint))

    def register_agent(self, cluster_id: str, endpoint: Endpoint, total: ResourceVector,
                       reachability: str = PUBLIC, now=0) -> str:
        if reachability not in REACHABILITIES:
            raise InvalidArgument(f"reachability must be one of {REACHABILITIES}")
        if not total.all_positive():
            raise InvalidArgument(f"agent total must be positive in every dimension: {total}")
        prior = self._by_endpoint.get((cluster_id, endpoint))
        if prior is not None:
            p = self.agents[prior]
            # a NAT port can be reissued after the old agent's lease lapsed
            if not (p.reachability == PRIVATE_VIA_NAT == reachability and p.liveness == LOST):
                raise AlreadyRegistered(f"{endpoint} already registered in {cluster_id}")
        if reachability == PRIVATE_VIA_NAT and (self.gateway is None
                                                or not self.gateway.issued(endpoint)):
            raise InvalidArgument(f"{endpoint} was not issued by the NAT gateway")
        agent_id = f"a{self._next_agent:04d}"
        self._commit(now, "agent.registered", {
            "agent_id": agent_id, "cluster_id": cluster_id, "endpoint": endpoint.to_dict(),
            "reachability": reachability, "total": total.to_dict()})
        return agent_id

    def heartbeat(self, agent_id: str, now) -> str:
        a = self.agent(agent_id)
        if a.liveness == LOST:
            # jobs on a lost agent were already requeued; nothing left to reconcile
            self._commit(now, "agent.recovered", {"agent_id": agent_id})
        else:
            self._commit(now, "agent.heartbeat", {"agent_id": agent_id})
        return self.agents[agent_id].liveness

    def sweep(self, now) -> list[dict]:
        """Mark agents silent for longer than the timeout LOST; expire offers."""
        actions = self.expire_offers(now)
        for a in list(self.active_agents()):
            if now - a.last_heartbeat > self.liveness_timeout_s:
                actions += self.mark_lost(a.agent_id, now, "heartbeat_timeout")
        return actions

    def mark_lost(self, agent_id: str, now, reason: str) -> list[dict]:
        a = self.agent(agent_id)
        if a.liveness == LOST:
            return []
        self._commit(now, "agent.lost", {"agent_id": agent_id, "reason": reason})
        actions = [{"action": "agent_lost", "agent_id": agent_id, "reason": reason}]
        for job in self.jobs.placed_on(agent_id):
            actions += self._lose_job(job.job_id, now)
        return actions

    def _lose_job(self, job_id: str, now) -> list[dict]:
        job = self.jobs.get(job_id)
        if job.state is JobState.RUNNING and job.requeues >= self.max_requeues:
            self._commit(now, "task.failed", {"job_id": job_id, "reason": "agent_lost"})
            return [{"action": "fail", "job_id": job_id, "reason": "requeue_limit"}]
        self._commit(now, "task.lost", {"job_id": job_id})
        self._commit(now, "task.requeued", {"job_id": job_id})
        return [{"action": "requeue", "job_id": job_id}]

    # -- offers --------------------------------------------------------
    def expire_offers(self, now) -> list[dict]:
        actions = []
        for oid in sorted(self.offers):
            if self.offers[oid].expires_at < now:
                self._commit(now, "offer.expired", {"offer_id": oid})
                actions.append({"action": "offer_expired", "offer_id": oid})
        return actions

    def is_filtered(self, agent_id: str, tenant_id: str, now) -> bool:
        return now < self.filters.get((agent_id, tenant_id), float("-inf"))

    def generate_offers(self, tenant_order: Union[Sequence[str], Mapping[str, Sequence[str]]],
                        now, agent_ids=None) -> list[Offer]:
        """One whole-free-vector offer per eligible agent, to the first tenant in
        order with a queued job on that agent's cluster.

        ``tenant_order`` may be a single list or a per-cluster mapping.
        """
        self.sweep(now)
        issued = []
        for a in self.active_agents():
            if agent_ids is not None and a.agent_id not in agent_ids:
                continue
            if a.agent_id in self._offer_for_agent:
                continue
            free = a.free
            if free.is_zero():
                continue
            order = tenant_order.get(a.cluster_id, ()) if isinstance(tenant_order, Mapping) \
                else tenant_order
            tenant = next((t for t in order if self.jobs.has_queued(t, a.cluster_id)
                           and not self.is_filtered(a.agent_id, t, now)), None)
            if tenant is None:
                continue
            oid = f"o{self._next_offer:07d}"
            self._commit(now, "offer.issued", {
                "offer_id": oid, "agent_id": a.agent_id, "cluster_id": a.cluster_id,
                "tenant_id": tenant, "resources": free.to_dict(),
                "issued_at": now, "expires_at": now + self.offer_ttl_s})
            issued.append(self.offers[oid])
        return issued

    def _live_offer(self, offer_id: str, now) -> Offer:
        offer = self.offers.get(offer_id)
        if offer is None:
            raise OfferNotFound(f"no outstanding offer {offer_id}")
        if now > offer.expires_at:
            self._commit(now, "offer.expired", {"offer_id": offer_id})
            raise OfferExpired(f"offer {offer_id} expired at {offer.expires_at}")
        return offer

    def accept_offer(self, offer_id: str, launches: Sequence[tuple], now) -> list[LaunchReceipt]:
        offer = self._live_offer(offer_id, now)
        ids = [j for j, _ in launches]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("a job appears twice in one accept")
        for job_id, request in launches:
            job = self.jobs.get(job_id)
            if job.state is not JobState.QUEUED:
                raise JobNotQueued(f"{job_id} is {job.state}, not QUEUED")
            if job.tenant_id != offer.tenant_id:
                raise JobNotQueued(f"{job_id} is not owned by offer recipient {offer.tenant_id}")
            if job.cluster_id != offer.cluster_id:
                raise JobNotQueued(f"{job_id} is queued at {job.cluster_id}, not {offer.cluster_id}")
            if request != job.request:
                raise InvalidArgument(f"{job_id}: launch request differs from job request")
        if not rv_sum(r for _, r in launches).fits(offer.resources):
            raise OverSubscription(f"launches exceed offer {offer.resources}")
        self._commit(now, "offer.accepted", {"offer_id": offer_id, "job_ids": ids})
        a = self.agents[offer.agent_id]
        return [LaunchReceipt(j, a.agent_id, a.cluster_id, a.endpoint, a.reachability)
                for j in ids]

    def decline_offer(self, offer_id: str, filter_duration_s: float, now) -> dict:
        offer = self._live_offer(offer_id, now)
        if filter_duration_s < 0:
            raise InvalidArgument("filter duration must be non-negative")
        self._commit(now, "offer.declined", {
            "offer_id": offer_id, "filter_until": now + filter_duration_s})
        return {"offer_id": offer_id, "agent_id": offer.agent_id, "tenant_id": offer.tenant_id,
                "filtered_until": now + filter_duration_s}

    # -- task lifecycle ------------------------------------------------
    def task_running(self, job_id: str, now):
        job = self.jobs.get(job_id)
        if job.state is not JobState.LAUNCHED:
            raise JobNotQueued(f"{job_id} is {job.state}, not LAUNCHED")
        self._commit(now, "task.running", {"job_id": job_id})
        return self.jobs.get(job_id)

    def complete_task(self, job_id: str, outcome: str, now):
        if outcome not in ("finished", "failed"):
            raise InvalidArgument("outcome must be 'finished' or 'failed'")
        job = self.jobs.get(job_id)
        if job.state is not JobState.RUNNING:
            raise JobNotRunning(f"{job_id} is {job.state}")
        self._commit(now, "task." + outcome, {"job_id": job_id})
        return self.jobs.get(job_id)

    # -- audits ----------------------------------------------------------
    def check_conservation(self) -> None:
        for a in self.agents.values():
            placed = rv_sum(j.request for j in self.jobs.placed_on(a.agent_id))
            assert placed == a.allocated, (a.agent_id, placed, a.allocated)
            assert a.allocated.fits(a.total), (a.agent_id, a.allocated, a.total)
            assert a.free + a.allocated == a.total

    # -- event handlers --------------------------------------------------
    def _set_agent(self, a: AgentRecord):
        self.agents[a.agent_id] = a

    def _on_registered(self, t, p):
        a = AgentRecord(p["agent_id"], p["cluster_id"], Endpoint.from_dict(p["endpoint"]),
                        p["reachability"], ResourceVector.from_dict(p["total"]),
                        last_heartbeat=t)
        self._set_agent(a)
        self._by_endpoint[(a.cluster_id, a.endpoint)] = a.agent_id
        self._next_agent = max(self._next_agent, int(a.agent_id[1:]) + 1)

    def _on_heartbeat(self, t, p):
        a = self.agents[p["agent_id"]]
        self._set_agent(replace(a, last_heartbeat=t))

    def _on_recovered(self, t, p):
        a = self.agents[p["agent_id"]]
        self._set_agent(replace(a, last_heartbeat=t, liveness=ACTIVE))

    def _on_lost(self, t, p):
        aid = p["agent_id"]
        self._set_agent(replace(self.agents[aid], liveness=LOST))
        oid = self._offer_for_agent.get(aid)
        if oid is not None:
            self._drop_offer(oid)

    def _drop_offer(self, oid):
        offer = self.offers.pop(oid)
        del self._offer_for_agent[offer.agent_id]
        return offer

    def _on_issued(self, t, p):
        offer = Offer.from_dict(p)
        self.offers[offer.offer_id] = offer
        self._offer_for_agent[offer.agent_id] = offer.offer_id
        self._next_offer = max(self._next_offer, int(offer.offer_id[1:]) + 1)

    def _on_expired(self, t, p):
        self._drop_offer(p["offer_id"])

    def _on_accepted(self, t, p):
        offer = self._drop_offer(p["offer_id"])
        a = self.agents[offer.agent_id]
        alloc = a.allocated
        for jid in p["job_ids"]:
            job = self.jobs.get(jid)
            self.jobs.put(advance_job_state(job, "launched", t, agent_id=a.agent_id,
                                            cluster_id=a.cluster_id))
            alloc = alloc + job.request
        self._set_agent(replace(a, allocated=alloc))

    def _on_declined(self, t, p):
        offer = self._drop_offer(p["offer_id"])
        for key in [k for k, until in self.filters.items() if until <= t]:
            del self.filters[key]
        if p["filter_until"] > t:
            self.filters[(offer.agent_id, offer.tenant_id)] = p["filter_until"]

    def _release(self, job):
        a = self.agents[job.agent_id]
        self._set_agent(replace(a, allocated=a.allocated - job.request))

    def _on_running(self, t, p):
        job = self.jobs.get(p["job_id"])
        self.jobs.put(advance_job_state(job, "running", t))

    def _finish(self, t, p, outcome):
        job = self.jobs.get(p["job_id"])
        self._release(job)
        self.jobs.put(advance_job_state(job, outcome, t))
        if self.ledger is not None and job.t_start is not None:
            dur = t - job.t_start
            core = job.request.centicpus * dur / 100
            mem = job.request.mem_mb * dur
            if core or mem:
                self.ledger._on_usage(t, {"tenant_id": job.tenant_id, "core_seconds": core,
                                          "mem_mb_seconds": mem})

    def _on_finished(self, t, p):
        self._finish(t, p, "finished")

    def _on_failed(self, t, p):
        self._finish(t, p, "failed")

    def _on_lost_task(self, t, p):
        job = self.jobs.get(p["job_id"])
        self._release(job)
        was_running = job.state is JobState.RUNNING
        job = advance_job_state(job, "lost", t)
        if was_running:
            job = replace(job, requeues=job.requeues + 1)
        self.jobs.put(job)

    def _on_requeued(self, t, p):
        job = self.jobs.get(p["job_id"])
        self.jobs.put(advance_job_state(job, "requeued", t))

    def apply(self, t, kind, payload):
        if kind == "task.lost":
            return self._on_lost_task(t, payload)
        return super().apply(t, kind, payload)

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "offer_ttl_s": self.offer_ttl_s,
            "liveness_timeout_s": self.liveness_timeout_s,
            "max_requeues": self.max_requeues,
            "next_agent": self._next_agent,
            "next_offer": self._next_offer,
            "agents": [self.agents[k].to_dict() for k in sorted(self.agents)],
            "offers": [self.offers[k].to_dict() for k in sorted(self.offers)],
            "filters": [[a, t, u] for (a, t), u in sorted(self.filters.items())],
        }

    def load_dict(self, d: dict) -> None:
        self.offer_ttl_s = d["offer_ttl_s"]
        self.liveness_timeout_s = d["liveness_timeout_s"]
        self.max_requeues = d["max_requeues"]
        self._next_agent = d["next_agent"]
        self._next_offer = d["next_offer"]
        for ad in d["agents"]:
            a = AgentRecord.from_dict(ad)
            self.agents[a.agent_id] = a
            self._by_endpoint[(a.cluster_id, a.endpoint)] = a.agent_id
        for od in d["offers"]:
            o = Offer.from_dict(od)
            self.offers[o.offer_id] = o
            self._offer_for_agent[o.agent_id] = o.offer_id
        self.filters = {(a, t): u for a, t, u in d["filters"]}
