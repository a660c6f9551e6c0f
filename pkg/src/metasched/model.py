"""Domain types and resource arithmetic shared by every module."""

from __future__ import annotations

import enum
import ipaddress
import math
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from typing import Optional

from .errors import (
    ArithmeticOverflow,
    ClockWentBackwards,
    IllegalTransition,
    InsufficientResources,
    InvalidArgument,
)

CPU_SCALE = 100  # cpus are kept in hundredths of a core
MAX_QUANTITY = 2**63 - 1


def _to_centi(cpus) -> int:
    if isinstance(cpus, bool):
        raise InvalidArgument("cpus must be numeric")
    if isinstance(cpus, int):
        return cpus * CPU_SCALE
    if isinstance(cpus, float):
        if not math.isfinite(cpus):
            raise InvalidArgument(f"cpus must be finite, got {cpus}")
        cpus = repr(cpus)
    try:
        d = Decimal(cpus) * CPU_SCALE
    except (InvalidOperation, TypeError, ValueError):
        raise InvalidArgument(f"cpus not a number: {cpus!r}") from None
    if not d.is_finite():
        raise InvalidArgument(f"cpus must be finite, got {cpus}")
    if d != d.to_integral_value():
        raise InvalidArgument(f"cpus has more than two decimals: {cpus}")
    return int(d)


def _to_int(name, value) -> int:
    if isinstance(value, bool):
        raise InvalidArgument(f"{name} must be an integer")
    if isinstance(value, float):
        if not value.is_integer():
            raise InvalidArgument(f"{name} must be an integer, got {value}")
        value = int(value)
    if not isinstance(value, int):
        raise InvalidArgument(f"{name} must be an integer, got {value!r}")
    return value


class ResourceVector:
    """Immutable (cpus, mem_mb, disk_mb) triple with exact arithmetic.

    ``cpus`` accepts ints, two-decimal floats, strings or Decimals and is
    stored as an integer count of hundredths of a core.
    """

    __slots__ = ("centicpus", "mem_mb", "disk_mb")

    def __init__(self, cpus=0, mem_mb=0, disk_mb=0):
        centi = _to_centi(cpus)
        mem = _to_int("mem_mb", mem_mb)
        disk = _to_int("disk_mb", disk_mb)
        for name, v in (("cpus", centi), ("mem_mb", mem), ("disk_mb", disk)):
            if v < 0:
                raise InvalidArgument(f"{name} must be non-negative")
            if v > MAX_QUANTITY:
                raise ArithmeticOverflow(f"{name} exceeds representable range")
        object.__setattr__(self, "centicpus", centi)
        object.__setattr__(self, "mem_mb", mem)
        object.__setattr__(self, "disk_mb", disk)

    @classmethod
    def _raw(cls, centi: int, mem: int, disk: int) -> "ResourceVector":
        rv = object.__new__(cls)
        object.__setattr__(rv, "centicpus", centi)
        object.__setattr__(rv, "mem_mb", mem)
        object.__setattr__(rv, "disk_mb", disk)
        return rv

    def __setattr__(self, name, value):
        raise AttributeError("ResourceVector is immutable")

    @property
    def cpus(self) -> float:
        return self.centicpus / CPU_SCALE

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        c = self.centicpus + other.centicpus
        m = self.mem_mb + other.mem_mb
        d = self.disk_mb + other.disk_mb
        if max(c, m, d) > MAX_QUANTITY:
            raise ArithmeticOverflow(f"{self} + {other} overflows")
        return ResourceVector._raw(c, m, d)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        c = self.centicpus - other.centicpus
        m = self.mem_mb - other.mem_mb
        d = self.disk_mb - other.disk_mb
        if c < 0 or m < 0 or d < 0:
            raise InsufficientResources(f"cannot take {other} from {self}")
        return ResourceVector._raw(c, m, d)

    def fits(self, available: "ResourceVector") -> bool:
        return (self.centicpus <= available.centicpus
                and self.mem_mb <= available.mem_mb
                and self.disk_mb <= available.disk_mb)

    def is_zero(self) -> bool:
        return self.centicpus == 0 and self.mem_mb == 0 and self.disk_mb == 0

    def any_positive(self) -> bool:
        return not self.is_zero()

    def all_positive(self) -> bool:
        return self.centicpus > 0 and self.mem_mb > 0 and self.disk_mb > 0

    def __eq__(self, other):
        if not isinstance(other, ResourceVector):
            return NotImplemented
        return (self.centicpus, self.mem_mb, self.disk_mb) == (
            other.centicpus, other.mem_mb, other.disk_mb)

    def __hash__(self):
        return hash((self.centicpus, self.mem_mb, self.disk_mb))

    def __repr__(self):
        return f"ResourceVector(cpus={self.cpus:g}, mem_mb={self.mem_mb}, disk_mb={self.disk_mb})"

    def __reduce__(self):
        return (ResourceVector._raw, (self.centicpus, self.mem_mb, self.disk_mb))

    def to_dict(self) -> dict:
        return {"cpus": self.cpus, "mem_mb": self.mem_mb, "disk_mb": self.disk_mb}

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceVector":
        return cls(d.get("cpus", 0), d.get("mem_mb", 0), d.get("disk_mb", 0))


ZERO = ResourceVector._raw(0, 0, 0)


def rv_add(a: ResourceVector, b: ResourceVector) -> ResourceVector:
    return a + b


def rv_checked_sub(a: ResourceVector, b: ResourceVector) -> ResourceVector:
    return a - b


def rv_fits(request: ResourceVector, available: ResourceVector) -> bool:
    return request.fits(available)


def rv_sum(vectors) -> ResourceVector:
    total = ZERO
    for v in vectors:
        total = total + v
    return total


@dataclass(frozen=True, order=True)
class Endpoint:
    host: str
    port: int

    def __post_init__(self):
        try:
            ipaddress.IPv4Address(self.host)
        except (ipaddress.AddressValueError, ValueError):
            raise InvalidArgument(f"not a dotted-quad IPv4 address: {self.host!r}") from None
        if isinstance(self.port, bool) or not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise InvalidArgument(f"port out of range: {self.port!r}")

    def __str__(self):
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, sep, port = text.rpartition(":")
        if not sep:
            raise InvalidArgument(f"expected host:port, got {text!r}")
        try:
            return cls(host, int(port))
        except ValueError as exc:
            raise InvalidArgument(str(exc)) from None

    def to_dict(self) -> dict:
        return {"host": self.host, "port": self.port}

    @classmethod
    def from_dict(cls, d: dict) -> "Endpoint":
        return cls(d["host"], d["port"])


@dataclass(frozen=True)
class JobSpec:
    tenant_id: str
    command: str
    request: ResourceVector
    est_duration_s: int
    cluster_affinity: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.tenant_id, str) or not self.tenant_id:
            raise InvalidArgument("tenant_id must be a non-empty string")
        if not isinstance(self.request, ResourceVector):
            raise InvalidArgument("request must be a ResourceVector")
        if self.request.is_zero():
            raise InvalidArgument("request must have a positive component")
        if (isinstance(self.est_duration_s, bool) or not isinstance(self.est_duration_s, int)
                or self.est_duration_s < 1):
            raise InvalidArgument(f"est_duration_s must be an integer >= 1, got {self.est_duration_s!r}")

    def to_dict(self) -> dict:
        return {
            "tenant_id": self.tenant_id,
            "command": self.command,
            "request": self.request.to_dict(),
            "est_duration_s": self.est_duration_s,
            "cluster_affinity": self.cluster_affinity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobSpec":
        try:
            return cls(
                tenant_id=d["tenant_id"],
                command=d.get("command", ""),
                request=ResourceVector.from_dict(d["request"]),
                est_duration_s=_to_int("est_duration_s", d["est_duration_s"]),
                cluster_affinity=d.get("cluster_affinity"),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidArgument(f"malformed job spec: {exc}") from None


class JobState(str, enum.Enum):
    SUBMITTED = "SUBMITTED"
    QUEUED = "QUEUED"
    LAUNCHED = "LAUNCHED"
    RUNNING = "RUNNING"
    FINISHED = "FINISHED"
    FAILED = "FAILED"
    LOST = "LOST"
    CANCELLED = "CANCELLED"

    def __str__(self):
        return self.value


TERMINAL_STATES = frozenset({JobState.FINISHED, JobState.FAILED, JobState.CANCELLED})
ACTIVE_STATES = frozenset({JobState.QUEUED, JobState.LAUNCHED, JobState.RUNNING, JobState.LOST})
PLACED_STATES = frozenset({JobState.LAUNCHED, JobState.RUNNING})

LIFECYCLE_EVENTS = ("queued", "launched", "running", "finished", "failed", "lost",
                    "cancelled", "requeued")

TRANSITIONS = {
    (JobState.SUBMITTED, "queued"): JobState.QUEUED,
    (JobState.SUBMITTED, "cancelled"): JobState.CANCELLED,
    (JobState.QUEUED, "launched"): JobState.LAUNCHED,
    (JobState.QUEUED, "cancelled"): JobState.CANCELLED,
    (JobState.LAUNCHED, "running"): JobState.RUNNING,
    (JobState.LAUNCHED, "lost"): JobState.LOST,
    (JobState.RUNNING, "finished"): JobState.FINISHED,
    (JobState.RUNNING, "failed"): JobState.FAILED,
    (JobState.RUNNING, "lost"): JobState.LOST,
    (JobState.LOST, "requeued"): JobState.QUEUED,
}


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    spec: JobSpec
    state: JobState = JobState.SUBMITTED
    cluster_id: Optional[str] = None
    agent_id: Optional[str] = None
    t_submit: Optional[float] = None
    t_start: Optional[float] = None
    t_finish: Optional[float] = None
    # submission order; queues are served by it
    seq: int = 0
    # requeues caused by losing a RUNNING job
    requeues: int = 0
    t_updated: Optional[float] = field(default=None, compare=True)

    @property
    def tenant_id(self) -> str:
        return self.spec.tenant_id

    @property
    def request(self) -> ResourceVector:
        return self.spec.request

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "spec": self.spec.to_dict(),
            "state": self.state.value,
            "cluster_id": self.cluster_id,
            "agent_id": self.agent_id,
            "t_submit": self.t_submit,
            "t_start": self.t_start,
            "t_finish": self.t_finish,
            "seq": self.seq,
            "requeues": self.requeues,
            "t_updated": self.t_updated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobRecord":
        return cls(
            job_id=d["job_id"],
            spec=JobSpec.from_dict(d["spec"]),
            state=JobState(d["state"]),
            cluster_id=d.get("cluster_id"),
            agent_id=d.get("agent_id"),
            t_submit=d.get("t_submit"),
            t_start=d.get("t_start"),
            t_finish=d.get("t_finish"),
            seq=d.get("seq", 0),
            requeues=d.get("requeues", 0),
            t_updated=d.get("t_updated"),
        )


def advance_job_state(job: JobRecord, event: str, now: float, *,
                      agent_id: Optional[str] = None,
                      cluster_id: Optional[str] = None) -> JobRecord:
    """Apply one lifecycle event and return the new record.

    ``launched`` needs ``agent_id``; ``queued`` needs ``cluster_id`` unless
    the job already carries one.
    """
    if event not in LIFECYCLE_EVENTS:
        raise InvalidArgument(f"unknown lifecycle event {event!r}")
    target = TRANSITIONS.get((job.state, event))
    if target is None:
        raise IllegalTransition(job.state, event)
    if job.t_updated is not None and now < job.t_updated:
        raise ClockWentBackwards(f"{job.job_id}: {event} at {now} precedes {job.t_updated}")

    changes = {"state": target, "t_updated": now}
    if event == "queued":
        cluster = cluster_id or job.cluster_id
        if cluster is None:
            raise InvalidArgument("queued requires a cluster_id")
        changes["cluster_id"] = cluster
    elif event == "launched":
        if agent_id is None:
            raise InvalidArgument("launched requires an agent_id")
        changes["agent_id"] = agent_id
        if cluster_id is not None:
            changes["cluster_id"] = cluster_id
    elif event == "running":
        changes["t_start"] = now
    elif event in ("finished", "failed", "cancelled"):
        changes["t_finish"] = now
    elif event == "lost":
        changes["agent_id"] = None
        changes["t_start"] = None
    return replace(job, **changes)


@dataclass(frozen=True)
class TenantAccount:
    tenant_id: str
    weight: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.weight, (int, float)) and math.isfinite(self.weight)
                and self.weight > 0):
            raise InvalidArgument(f"tenant weight must be positive, got {self.weight!r}")
