"""The scheduler loop behind the socket: command dispatch, ticks and snapshots."""

from __future__ import annotations

import logging
import time

from ..errors import InvalidArgument, MalformedJson, SchedulerError
from ..journal import EventLog, read_log
from ..model import JobSpec
from ..sim.harness import AgentDriver, populate
from ..sim.metrics import compute_metrics
from .config import ServiceConfig
from .persistence import recover, snapshot_state
from .wire import WireMessage, error, ok

log = logging.getLogger(__name__)


class Service:
    """Single-threaded owner of the scheduler.

    Every command and tick goes through this object, so the event log has a
    single writer and a total order. ``clock`` is injectable for tests.
    """

    def __init__(self, config: ServiceConfig, clock=time.time):
        self.config = config
        self.clock = clock
        self.sched = None
        self.driver = None
        self._t = 0.0
        self._snap_offset = 0

    def start(self):
        cfg = self.config
        for p in (cfg.event_log_path, cfg.snapshot_path):
            p.parent.mkdir(parents=True, exist_ok=True)
        journal = EventLog(cfg.event_log_path, keep=False)
        try:
            sched, records = recover(cfg.snapshot_path, cfg.event_log_path,
                                     cfg.scheduler_config(), journal=journal)
        except BaseException:
            journal.close()
            raise
        journal.count = len(records)
        self._snap_offset = len(records)
        if records:
            self._t = records[-1]["t"]
        self.sched = sched
        self.driver = AgentDriver(sched, {}, cfg.nat.relay_latency_s if cfg.nat else 0)
        now = self.now()
        populate(self.driver, cfg.clusters, cfg.heartbeat_s, now, restored=True)
        log.info("restored %d log records; %d jobs", len(records), len(sched.jobs.to_list()))
        return self

    def close(self):
        if self.sched is not None:
            self.sched.journal.close()

    def now(self) -> float:
        # scheduler time never goes backwards even if the wall clock does
        self._t = max(self._t, float(self.clock()))
        return self._t

    # -- loop work ---------------------------------------------------------
    def tick(self) -> list[dict]:
        t = self.now()
        self.driver.run_due(t, self.config.heartbeat_s)
        actions = self.sched.schedule_tick(t)
        self.driver.start_due(t)
        self.maybe_snapshot(t)
        return actions

    def maybe_snapshot(self, t=None):
        if self.sched.journal.count - self._snap_offset >= self.config.snapshot_every:
            self.snapshot(t)

    def snapshot(self, t=None):
        t = self.now() if t is None else t
        snap = snapshot_state(self.sched, self.config.snapshot_path, t)
        self._snap_offset = snap["log_offset"]
        return snap

    # -- commands ----------------------------------------------------------
    def handle(self, msg: WireMessage) -> WireMessage:
        """Exactly one reply per request."""
        fn = getattr(self, "_cmd_" + msg.type, None)
        if fn is None:
            return error(msg.request_id, "bad_request", f"{msg.type} is not a request type")
        try:
            body = fn(msg.payload)
        except SchedulerError as exc:
            return error(msg.request_id, exc.code, str(exc), user_error=exc.user_error)
        except Exception as exc:  # never let one request kill the loop
            log.exception("request %s failed", msg.request_id)
            return error(msg.request_id, "internal", f"{type(exc).__name__}: {exc}",
                         user_error=False)
        self.maybe_snapshot()
        return ok(msg.request_id, **body)

    def _job_id(self, p):
        jid = p.get("job_id")
        if not isinstance(jid, str):
            raise MalformedJson("payload needs a string job_id")
        return jid

    def _cmd_submit(self, p):
        fields = ("tenant_id", "command", "request", "est_duration_s", "cluster_affinity")
        try:
            spec = JobSpec.from_dict({k: p[k] for k in fields if k in p})
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidArgument):
                raise
            raise MalformedJson(f"bad submit payload: {exc}") from None
        job_id, decision = self.sched.submit_job(spec, self.now())
        return {"job_id": job_id, "routing": decision.to_dict()}

    def _cmd_status(self, p):
        return {"job": self.sched.job_status(self._job_id(p)).to_dict()}

    def _cmd_cancel(self, p):
        return {"job": self.sched.cancel_job(self._job_id(p), self.now()).to_dict()}

    def _cmd_list_jobs(self, p):
        tenant = p.get("tenant_id")
        return {"jobs": [j.to_dict() for j in self.sched.list_jobs(tenant)]}

    def _cmd_clusters(self, p):
        return {"clusters": [c.to_dict() for c in self.sched.clusters()]}

    def _cmd_agents(self, p):
        return {"agents": [a.to_dict() for _, a in sorted(self.sched.offers.agents.items())]}

    def _cmd_offers(self, p):
        return {"offers": [o.to_dict() for _, o in sorted(self.sched.offers.offers.items())]}

    def _cmd_metrics(self, p):
        return {"metrics": compute_metrics(read_log(self.config.event_log_path)).to_dict()}
