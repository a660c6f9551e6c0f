"""Tick-driven discrete-event simulation of the meta-scheduler."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Optional

from ..errors import (
    ChannelDown,
    ConfigInvalid,
    InvalidArgument,
    MappingNotFound,
    SchedulerError,
)
from ..journal import EventLog
from ..model import Endpoint, JobSpec, JobState, ResourceVector
from ..nat import NatConfig
from ..offers import ACTIVE, PRIVATE_VIA_NAT, PUBLIC
from ..policy import PolicyConfig
from ..scheduler import MetaScheduler, SchedulerConfig
from .metrics import Metrics, compute_metrics
from .workload import Arrival, WorkloadParams, generate_workload

# same-time ordering inside one step
_COMPLETE, _FAIL, _RECOVER, _HEARTBEAT, _ARRIVE, _START = range(6)


@dataclass(frozen=True)
class AgentTemplate:
    cpus: float = 8
    mem_mb: int = 32768
    disk_mb: int = 100_000
    reachability: str = PUBLIC
    count: int = 1

    def resources(self) -> ResourceVector:
        return ResourceVector(self.cpus, self.mem_mb, self.disk_mb)

    def to_dict(self) -> dict:
        return {"cpus": self.cpus, "mem_mb": self.mem_mb, "disk_mb": self.disk_mb,
                "reachability": self.reachability, "count": self.count}


@dataclass(frozen=True)
class ClusterTemplate:
    cluster_id: str
    agents: tuple
    display_name: str = ""

    def to_dict(self) -> dict:
        return {"cluster_id": self.cluster_id, "display_name": self.display_name,
                "agents": [a.to_dict() for a in self.agents]}


@dataclass
class SimConfig:
    clusters: list
    seed: int = 0
    duration_s: float = 3600
    workload: WorkloadParams = field(default_factory=WorkloadParams)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    nat: NatConfig = field(default_factory=NatConfig)
    tick_s: float = 1
    heartbeat_s: float = 10
    liveness_timeout_s: float = 30
    offer_ttl_s: float = 5
    max_requeues: int = 3
    # extra simulated time allowed after the horizon for running jobs to drain
    drain_limit_s: float = 7 * 86400
    # [{"cluster": id, "agent": index, "at": t, "recover_at": t?}]
    failures: list = field(default_factory=list)
    # explicit arrivals replace the generated workload when given
    jobs: Optional[list] = None

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ConfigInvalid("duration_s must be positive")
        if not self.tick_s > 0 or not self.heartbeat_s > 0:
            raise ConfigInvalid("tick_s and heartbeat_s must be positive")
        if not any(sum(a.count for a in c.agents) for c in self.clusters):
            raise ConfigInvalid("need at least one cluster with one agent")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")
        ids = [c.cluster_id for c in self.clusters]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("duplicate cluster_id")
        for c in self.clusters:
            for a in c.agents:
                if a.reachability not in (PUBLIC, PRIVATE_VIA_NAT) or a.count < 0:
                    raise ConfigInvalid(f"bad agent template in {c.cluster_id}")
                try:
                    a.resources()
                except InvalidArgument as exc:
                    raise ConfigInvalid(f"bad agent template in {c.cluster_id}: {exc}") from None

    def scheduler_config(self) -> SchedulerConfig:
        return SchedulerConfig(policy=self.policy, nat=self.nat, offer_ttl_s=self.offer_ttl_s,
                               liveness_timeout_s=self.liveness_timeout_s,
                               max_requeues=self.max_requeues, tick_period_s=self.tick_s)

    def with_(self, **changes) -> "SimConfig":
        d = dict(self.__dict__)
        d.update(changes)
        return SimConfig(**d)

    def arrivals(self) -> list[Arrival]:
        if self.jobs is not None:
            return list(self.jobs)
        return generate_workload(self.workload, self.seed, self.duration_s)

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "duration_s": self.duration_s,
            "clusters": [c.to_dict() for c in self.clusters],
            "workload": self.workload.to_dict(),
            "policy": self.policy.to_dict(),
            "nat": self.nat.to_dict(),
            "tick_s": self.tick_s,
            "heartbeat_s": self.heartbeat_s,
            "liveness_timeout_s": self.liveness_timeout_s,
            "offer_ttl_s": self.offer_ttl_s,
            "max_requeues": self.max_requeues,
            "drain_limit_s": self.drain_limit_s,
            "failures": list(self.failures),
        }
        if self.jobs is not None:
            d["jobs"] = [{"t": a.t, "spec": a.spec.to_dict(), "runtime_s": a.runtime_s}
                         for a in self.jobs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        try:
            d = dict(d)
            clusters = [ClusterTemplate(c["cluster_id"],
                                        tuple(AgentTemplate(**a) for a in c["agents"]),
                                        c.get("display_name", ""))
                        for c in d.pop("clusters")]
            kw = {"clusters": clusters}
            if "workload" in d:
                kw["workload"] = WorkloadParams.from_dict(d.pop("workload"))
            if "policy" in d:
                kw["policy"] = PolicyConfig.from_dict(d.pop("policy"))
            if "nat" in d:
                kw["nat"] = NatConfig.from_dict(d.pop("nat"))
            if d.get("jobs") is not None:
                kw["jobs"] = [Arrival(float(j["t"]), JobSpec.from_dict(j["spec"]),
                                      int(j.get("runtime_s", j["spec"]["est_duration_s"])))
                              for j in d.pop("jobs")]
            unknown = set(d) - set(cls.__dataclass_fields__)
            if unknown:
                raise ConfigInvalid(f"unknown sim config keys: {sorted(unknown)}")
            return cls(**kw, **d)
        except ConfigInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"bad sim config: {exc}") from None

    @classmethod
    def load(cls, path) -> "SimConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None


@dataclass
class _SimAgent:
    cluster_id: str
    index: int
    template: AgentTemplate
    host: Endpoint
    agent_id: Optional[str] = None
    mapping_id: Optional[str] = None
    up: bool = True
    # job_id -> generation, so stale completions of a lost task are ignored
    tasks: dict = field(default_factory=dict)


class AgentDriver:
    """Virtual agents: take launch messages, run tasks, report completions.

    Public agents receive launches through the scheduler transport, private
    ones through their outbound NAT channel.
    """

    def __init__(self, sched: MetaScheduler, runtimes: dict, relay_latency_s: float = 0):
        self.sched = sched
        self.runtimes = runtimes
        self.relay_latency_s = relay_latency_s
        self.agents: list[_SimAgent] = []
        self.by_id: dict[str, _SimAgent] = {}
        self.events: list = []
        self._seq = 0
        self._generation = 0
        self.now = 0.0
        sched.transport = self._direct

    def push(self, t, prio, kind, data):
        heapq.heappush(self.events, (t, prio, self._seq, kind, data))
        self._seq += 1

    def add(self, agent: _SimAgent, now) -> bool:
        """Register with the scheduler; False if the agent could not join."""
        total = agent.template.resources()
        if agent.template.reachability == PRIVATE_VIA_NAT:
            try:
                aid, mapping = self.sched.register_private_agent(agent.cluster_id, agent.host,
                                                                 total, now)
            except InvalidArgument:
                return False
            agent.mapping_id = mapping.mapping_id
            self.sched.gateway.open_channel(mapping.mapping_id,
                                            lambda msg, a=agent: self._receive(a, msg, True))
        else:
            aid = self.sched.register_agent(agent.cluster_id, agent.host, total, PUBLIC, now)
        agent.agent_id = aid
        self.by_id[aid] = agent
        return True

    def _direct(self, record, msg: bytes):
        agent = self.by_id[record.agent_id]
        if not agent.up:
            raise ChannelDown(f"agent {record.agent_id} unreachable")
        return self._receive(agent, msg, False)

    def _receive(self, agent: _SimAgent, msg: bytes, relayed: bool):
        body = json.loads(msg)
        if body.get("type") != "launch":
            return None
        self._generation += 1
        agent.tasks[body["job_id"]] = self._generation
        self.runtimes.setdefault(body["job_id"], body["est_duration_s"])
        delay = self.relay_latency_s if relayed else 0
        self.push(self.now + delay, _START, "start", (agent, body["job_id"], self._generation))
        return "ack"

    def adopt(self, now):
        """Pick up jobs already placed on our agents, e.g. after a scheduler restart."""
        for agent in self.agents:
            if agent.agent_id is None:
                continue
            for job in self.sched.jobs.placed_on(agent.agent_id):
                self._generation += 1
                agent.tasks[job.job_id] = self._generation
                self.runtimes.setdefault(job.job_id, job.spec.est_duration_s)
                if job.state is JobState.RUNNING:
                    done = max(now, job.t_start + self.runtimes[job.job_id])
                    self.push(done, _COMPLETE, "complete", (agent, job.job_id, self._generation))
                else:
                    self.push(now, _START, "start", (agent, job.job_id, self._generation))

    def attach(self, agent: _SimAgent) -> bool:
        """Bind to an agent the scheduler already knows (restored state)."""
        sched = self.sched
        if agent.template.reachability == PRIVATE_VIA_NAT:
            if sched.gateway is None:
                return False
            m = sched.gateway.resolve_internal(agent.host)
            if m is None:
                return False
            endpoint = m.public
        else:
            endpoint = agent.host
        aid = sched.offers._by_endpoint.get((agent.cluster_id, endpoint))
        if aid is None:
            return False
        agent.agent_id = aid
        if agent.template.reachability == PRIVATE_VIA_NAT:
            agent.mapping_id = m.mapping_id
            sched.gateway.open_channel(m.mapping_id,
                                       lambda msg, a=agent: self._receive(a, msg, True))
        self.by_id[aid] = agent
        return True

    def run_due(self, t, heartbeat_s, on_arrive=None):
        """Process every queued event with time <= t, in time order."""
        while self.events and self.events[0][0] <= t:
            et, _, _, kind, data = heapq.heappop(self.events)
            self.now = et
            if kind == "arrive":
                on_arrive(et, data)
                continue
            self.handle(et, kind, data)
            if kind == "heartbeat" and data.up or kind == "recover":
                self.push(et + heartbeat_s, _HEARTBEAT, "heartbeat", data)
        self.now = t

    def start_due(self, t):
        """Zero-latency launches from this tick start within the same step."""
        while self.events and self.events[0][0] <= t and self.events[0][1] == _START:
            et, _, _, kind, data = heapq.heappop(self.events)
            self.handle(et, kind, data)

    def handle(self, t, kind, data):
        if kind == "start":
            agent, job_id, gen = data
            if not agent.up or agent.tasks.get(job_id) != gen:
                return
            job = self.sched.jobs.get(job_id)
            if job.state is not JobState.LAUNCHED or job.agent_id != agent.agent_id:
                agent.tasks.pop(job_id, None)
                return
            self.sched.task_running(job_id, t)
            self.push(t + self.runtimes[job_id], _COMPLETE, "complete", (agent, job_id, gen))
        elif kind == "complete":
            agent, job_id, gen = data
            if not agent.up or agent.tasks.get(job_id) != gen:
                return
            del agent.tasks[job_id]
            job = self.sched.jobs.get(job_id)
            if job.state is JobState.RUNNING and job.agent_id == agent.agent_id:
                self.sched.complete_task(job_id, "finished", t)
        elif kind == "heartbeat":
            agent = data
            if not agent.up:
                return
            self._heartbeat(agent, t)
        elif kind == "fail":
            agent = data
            agent.up = False
            agent.tasks.clear()
            if agent.mapping_id is not None:
                self.sched.gateway.close_channel(agent.mapping_id)
        elif kind == "recover":
            agent = data
            agent.up = True
            self._heartbeat(agent, t)

    def _heartbeat(self, agent: _SimAgent, t):
        if agent.agent_id is None:
            return
        try:
            self.sched.heartbeat(agent.agent_id, t)
        except MappingNotFound:
            # lease lapsed while the agent was away: rejoin through the gateway
            self.by_id.pop(agent.agent_id, None)
            agent.agent_id = agent.mapping_id = None
            self.add(agent, t)
            return
        if agent.mapping_id is not None and agent.mapping_id not in self.sched.gateway._channels:
            self.sched.gateway.open_channel(agent.mapping_id,
                                            lambda msg, a=agent: self._receive(a, msg, True))


def populate(driver: AgentDriver, clusters, heartbeat_s, now=0, restored=False) -> None:
    """Create the virtual agents for ``clusters`` and join them to the scheduler.

    Public agents get hosts 203.0.113.n, private ones 10.<cluster>.0.<k>.
    With ``restored`` the agents re-bind to records the scheduler already
    holds before any new registration is attempted.
    """
    sched = driver.sched
    n_public = 0
    for ci, c in enumerate(clusters):
        if not restored or c.cluster_id not in sched._clusters:
            sched.add_cluster(c.cluster_id, c.display_name, now)
        k = 0
        for tmpl in c.agents:
            for _ in range(tmpl.count):
                if tmpl.reachability == PRIVATE_VIA_NAT:
                    host = Endpoint(f"10.{ci}.0.{k + 1}", 5051)
                else:
                    n_public += 1
                    host = Endpoint(f"203.0.113.{n_public}", 5051)
                agent = _SimAgent(c.cluster_id, k, tmpl, host)
                driver.agents.append(agent)
                if restored and driver.attach(agent):
                    # report in at once; the scheduler may have been down a while
                    driver.push(now, _HEARTBEAT, "heartbeat", agent)
                elif driver.add(agent, now):
                    driver.push(now + heartbeat_s, _HEARTBEAT, "heartbeat", agent)
                k += 1
    if restored:
        driver.adopt(now)


def _build(config: SimConfig, journal: EventLog):
    sched = MetaScheduler(config.scheduler_config(), journal)
    arrivals = config.arrivals()
    runtimes = {}
    driver = AgentDriver(sched, runtimes, config.nat.relay_latency_s if config.nat else 0)
    populate(driver, config.clusters, config.heartbeat_s)
    for f in config.failures:
        try:
            agent = next(a for a in driver.agents
                         if a.cluster_id == f["cluster"] and a.index == f["agent"])
        except StopIteration:
            raise ConfigInvalid(f"failure names unknown agent: {f}") from None
        driver.push(f["at"], _FAIL, "fail", agent)
        if f.get("recover_at") is not None:
            driver.push(f["recover_at"], _RECOVER, "recover", agent)
    for i, a in enumerate(arrivals):
        driver.push(a.t, _ARRIVE, "arrive", (i, a))
    return sched, driver, runtimes


def _idle(sched: MetaScheduler) -> bool:
    jobs = sched.jobs
    return not jobs.queued_clusters() and not jobs.parked() and not sched.offers.offers


def run_simulation(config: SimConfig, journal: Optional[EventLog] = None, observer=None):
    """Run one simulation; returns (journal, metrics).

    ``observer(t, actions)`` sees the action list of every scheduling tick.
    """
    journal = journal if journal is not None else EventLog()
    sched, driver, runtimes = _build(config, journal)
    tick = config.tick_s

    def arrive(et, data):
        i, arrival = data
        try:
            job_id, _ = sched.submit_job(arrival.spec, et)
        except SchedulerError as exc:
            journal.append(et, "sim.rejected", {"arrival": i, "code": exc.code,
                                                "message": str(exc)})
            return
        runtimes[job_id] = arrival.runtime_s

    horizon = config.duration_s
    stop = horizon + config.drain_limit_s
    t = 0.0
    while True:
        driver.run_due(t, config.heartbeat_s, arrive)
        actions = sched.schedule_tick(t)
        if observer is not None:
            observer(t, actions)
        driver.start_due(t)
        if t >= horizon and sched.jobs.open_count() == 0:
            break
        if t >= stop:
            break
        nxt = t + tick
        if _idle(sched) and driver.events:
            # jump to the tick at or after the next pending event
            target = max(nxt, _next_deadline(sched, driver, config))
            steps = -(-(target - t) // tick)
            nxt = t + steps * tick
        t = nxt
    journal.append(t, "sim.end", {"horizon_s": t, "open_jobs": sched.jobs.open_count()})
    return journal, compute_metrics(journal.records)


def _next_deadline(sched, driver, config) -> float:
    nxt = driver.events[0][0]
    for a in sched.offers.agents.values():
        if a.liveness == ACTIVE:
            nxt = min(nxt, a.last_heartbeat + config.liveness_timeout_s)
    if sched.gateway is not None:
        for m in sched.gateway.live_mappings():
            nxt = min(nxt, m.lease_expires_at)
    return nxt


def _policy_name(p: PolicyConfig, i: int) -> str:
    return p.name or f"policy-{i}"


def compare_policies(config: SimConfig, policies) -> dict:
    """Run the same seeded workload under each policy and report paired metrics."""
    policies = [PolicyConfig.from_dict(p) if not isinstance(p, PolicyConfig) else p
                for p in policies]
    if len(policies) < 2:
        raise ConfigInvalid("compare_policies needs at least two policies")
    runs = []
    for i, p in enumerate(policies):
        journal, metrics = run_simulation(config.with_(policy=p))
        runs.append({"policy": _policy_name(p, i), "policy_config": p.to_dict(),
                     "metrics": metrics.to_dict(), "trace_hash": journal.trace_hash()})
    base = runs[0]["metrics"]
    deltas = []
    for r in runs[1:]:
        deltas.append({"policy": r["policy"], "versus": runs[0]["policy"],
                       **metric_deltas(base, r["metrics"])})
    return {"seed": config.seed, "runs": runs, "deltas": deltas}


def metric_deltas(a: dict, b: dict) -> dict:
    """b - a for the headline numbers."""
    return {
        "mean_wait_s": b["overall"]["mean_s"] - a["overall"]["mean_s"],
        "median_wait_s": b["overall"]["median_s"] - a["overall"]["median_s"],
        "p95_wait_s": b["overall"]["p95_s"] - a["overall"]["p95_s"],
        "jobs_completed": b["jobs_completed"] - a["jobs_completed"],
        "utilization": {c: b["utilization"].get(c, 0.0) - u
                        for c, u in sorted(a["utilization"].items())},
    }


__all__ = ["AgentTemplate", "ClusterTemplate", "SimConfig", "AgentDriver", "Metrics",
           "run_simulation", "compare_policies", "metric_deltas"]
