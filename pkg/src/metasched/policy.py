"""Usage accounting, fair-share ranking, submission limits and EASY backfill."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

from .errors import (
    ClockWentBackwards,
    InvalidArgument,
    NeverFits,
    UnknownCluster,
    UnknownTenant,
)
from .journal import Journaled
from .model import ResourceVector, ZERO

DEFAULT_HALF_LIFE_S = 86400.0
BACKFILL_MODES = ("easy", "off")
ORDERINGS = ("fair_share", "fcfs")


@dataclass(frozen=True)
class PolicyConfig:
    half_life_s: float = DEFAULT_HALF_LIFE_S
    weights: Mapping[str, float] = field(default_factory=dict)
    limits: Mapping[str, int] = field(default_factory=dict)
    # limit for clusters not named in ``limits``
    default_limit: int = 64
    backfill: str = "easy"
    ordering: str = "fair_share"
    name: str = ""

    def __post_init__(self):
        if not (self.half_life_s > 0 and math.isfinite(self.half_life_s)):
            raise InvalidArgument("half_life_s must be positive")
        if self.backfill not in BACKFILL_MODES:
            raise InvalidArgument(f"backfill must be one of {BACKFILL_MODES}")
        if self.ordering not in ORDERINGS:
            raise InvalidArgument(f"ordering must be one of {ORDERINGS}")
        for t, w in self.weights.items():
            if not (isinstance(w, (int, float)) and w > 0 and math.isfinite(w)):
                raise InvalidArgument(f"weight for {t} must be positive")
        for c, n in list(self.limits.items()) + [("*", self.default_limit)]:
            if isinstance(n, bool) or not isinstance(n, int) or n < 1:
                raise InvalidArgument(f"limit for {c} must be an integer >= 1")

    def limit_for(self, cluster_id: str) -> int:
        return self.limits.get(cluster_id, self.default_limit)

    def weight_for(self, tenant_id: str) -> float:
        return self.weights.get(tenant_id, 1.0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "half_life_s": self.half_life_s,
            "weights": dict(sorted(self.weights.items())),
            "limits": dict(sorted(self.limits.items())),
            "default_limit": self.default_limit,
            "backfill": self.backfill,
            "ordering": self.ordering,
        }

    @classmethod
    def from_dict(cls, d) -> "PolicyConfig":
        if isinstance(d, str):
            return preset(d)
        d = dict(d or {})
        base = preset(d.pop("preset")) if "preset" in d else cls()
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidArgument(f"unknown policy keys: {sorted(unknown)}")
        return replace(base, **known)


PRESETS = {
    "fcfs": dict(ordering="fcfs", backfill="off"),
    "fcfs_backfill": dict(ordering="fcfs", backfill="easy"),
    "fairshare": dict(ordering="fair_share", backfill="off"),
    "fairshare_backfill": dict(ordering="fair_share", backfill="easy"),
}


def preset(name: str, **overrides) -> PolicyConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown policy preset {name!r}; known: {sorted(PRESETS)}") from None
    return PolicyConfig(name=name, **{**base, **overrides})


# ---------------------------------------------------------------------------
# usage ledger

@dataclass
class UsageVector:
    core_seconds: float = 0.0
    mem_mb_seconds: float = 0.0
    running_jobs: int = 0
    queued_by_cluster: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "core_seconds": self.core_seconds,
            "mem_mb_seconds": self.mem_mb_seconds,
            "running_jobs": self.running_jobs,
            "queued_by_cluster": dict(sorted(self.queued_by_cluster.items())),
        }


def decay_factor(elapsed: float, half_life_s: float) -> float:
    return 2.0 ** (-elapsed / half_life_s)


class UsageLedger(Journaled):
    """Per-tenant decayed core-seconds and MB-seconds.

    Decay is applied lazily: state only changes when usage is recorded, and
    queries decay a copy to the requested time.
    """

    def __init__(self, half_life_s: float = DEFAULT_HALF_LIFE_S, journal=None):
        if not half_life_s > 0:
            raise InvalidArgument("half_life_s must be positive")
        self.half_life_s = half_life_s
        self.journal = journal
        self.weights: dict[str, float] = {}
        self.usage: dict[str, list[float]] = {}
        self.last_decay_at: float = 0

    def tenants(self) -> list[str]:
        return sorted(self.weights)

    def add_tenant(self, tenant_id: str, weight: float = 1.0, now=0) -> None:
        if tenant_id in self.weights:
            return
        if not weight > 0:
            raise InvalidArgument("tenant weight must be positive")
        self._commit(now, "ledger.tenant", {"tenant_id": tenant_id, "weight": weight})

    def record_usage(self, tenant_id: str, request: ResourceVector, duration_s, now):
        if tenant_id not in self.weights:
            raise UnknownTenant(f"unknown tenant {tenant_id}")
        if now < self.last_decay_at:
            raise ClockWentBackwards(f"usage at {now} precedes last decay {self.last_decay_at}")
        core = request.centicpus * duration_s / 100
        mem = request.mem_mb * duration_s
        if core or mem:
            self._commit(now, "ledger.usage", {
                "tenant_id": tenant_id, "core_seconds": core, "mem_mb_seconds": mem})
        return self.usage_at(now)[tenant_id]

    def decay_ledger(self, now) -> dict[str, tuple[float, float]]:
        """Return every tenant's usage decayed to ``now`` (state untouched)."""
        if now < self.last_decay_at:
            raise ClockWentBackwards(f"decay to {now} precedes {self.last_decay_at}")
        f = decay_factor(now - self.last_decay_at, self.half_life_s)
        return {t: (u[0] * f, u[1] * f) for t, u in self.usage.items()}

    def usage_at(self, now) -> dict[str, UsageVector]:
        return {t: UsageVector(c, m) for t, (c, m) in self.decay_ledger(now).items()}

    def rank(self, tenants: Iterable[str], cluster_totals: ResourceVector, now,
             weights: Optional[Mapping[str, float]] = None) -> list[str]:
        decayed = self.decay_ledger(now)
        w = dict(self.weights)
        if weights:
            w.update(weights)
        return fair_share_rank(tenants, decayed, w, cluster_totals, self.half_life_s)

    # event handlers
    def _decay_in_place(self, now):
        if now > self.last_decay_at:
            f = decay_factor(now - self.last_decay_at, self.half_life_s)
            for u in self.usage.values():
                u[0] *= f
                u[1] *= f
            self.last_decay_at = now

    def _on_tenant(self, t, p):
        self.weights[p["tenant_id"]] = p["weight"]
        self.usage.setdefault(p["tenant_id"], [0.0, 0.0])

    def _on_usage(self, t, p):
        self._decay_in_place(t)
        u = self.usage[p["tenant_id"]]
        u[0] += p["core_seconds"]
        u[1] += p["mem_mb_seconds"]

    def to_dict(self) -> dict:
        return {
            "half_life_s": self.half_life_s,
            "last_decay_at": self.last_decay_at,
            "tenants": {t: {"weight": self.weights[t], "core_seconds": self.usage[t][0],
                            "mem_mb_seconds": self.usage[t][1]} for t in sorted(self.weights)},
        }

    def load_dict(self, d: dict) -> None:
        self.half_life_s = d["half_life_s"]
        self.last_decay_at = d["last_decay_at"]
        for t, v in d["tenants"].items():
            self.weights[t] = v["weight"]
            self.usage[t] = [v["core_seconds"], v["mem_mb_seconds"]]


def dominant_usage(core_seconds: float, mem_mb_seconds: float, weight: float,
                   cluster_totals: ResourceVector, half_life_s: float) -> float:
    cpu_cap = cluster_totals.cpus * half_life_s
    mem_cap = cluster_totals.mem_mb * half_life_s
    cpu_share = core_seconds / cpu_cap if cpu_cap > 0 else 0.0
    mem_share = mem_mb_seconds / mem_cap if mem_cap > 0 else 0.0
    return max(cpu_share, mem_share) / weight


def fair_share_rank(tenants: Iterable[str], usage: Mapping[str, Sequence[float]],
                    weights: Mapping[str, float], cluster_totals: ResourceVector,
                    half_life_s: float) -> list[str]:
    """Order tenants by weighted dominant usage, lowest first; ties by id."""
    def key(t):
        core, mem = usage.get(t, (0.0, 0.0))
        return (dominant_usage(core, mem, weights.get(t, 1.0), cluster_totals, half_life_s), t)
    return sorted(set(tenants), key=key)


# ---------------------------------------------------------------------------
# submission limits

ADMIT = "ADMIT"
REJECT = "REJECT"
NO_CAPACITY = "NO_CAPACITY"


@dataclass(frozen=True)
class SubmissionLimit:
    cluster_id: str
    max_active_per_tenant: int

    def __post_init__(self):
        if self.max_active_per_tenant < 1:
            raise InvalidArgument("max_active_per_tenant must be >= 1")


@dataclass(frozen=True)
class Verdict:
    verdict: str
    active_count: int = 0
    limit: int = 0

    @property
    def admitted(self) -> bool:
        return self.verdict == ADMIT

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "active_count": self.active_count, "limit": self.limit}


def check_submission(tenant_id: str, cluster_id: str,
                     limits: Mapping[str, SubmissionLimit],
                     active_counts: Mapping[tuple, int]) -> Verdict:
    try:
        limit = limits[cluster_id].max_active_per_tenant
    except KeyError:
        raise UnknownCluster(f"unknown cluster {cluster_id}") from None
    active = active_counts.get((tenant_id, cluster_id), 0)
    if active < limit:
        return Verdict(ADMIT, active, limit)
    return Verdict(REJECT, active, limit)


# ---------------------------------------------------------------------------
# EASY backfilling

@dataclass(frozen=True)
class Reservation:
    cluster_id: Optional[str]
    job_id: Optional[str]
    start_at: float
    resources: ResourceVector
    # free resources left over at start_at once the head job is placed
    extra: ResourceVector = ZERO
    agent_id: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "job_id": self.job_id,
            "agent_id": self.agent_id,
            "start_at": self.start_at,
            "resources": self.resources.to_dict(),
            "extra": self.extra.to_dict(),
        }


def compute_reservation(head, running: Sequence[tuple], cluster_total: ResourceVector,
                        now, *, job_id: Optional[str] = None,
                        cluster_id: Optional[str] = None,
                        agent_id: Optional[str] = None) -> Reservation:
    """Earliest time the head job fits, assuming running jobs end at their estimates.

    ``head`` is a JobSpec; ``running`` holds ``(request, est_finish_at)`` pairs.
    """
    need = head.request
    if not need.fits(cluster_total):
        raise NeverFits(f"{need} exceeds capacity {cluster_total}")
    free = cluster_total
    for req, _ in running:
        free = free - req
    if need.fits(free):
        raise InvalidArgument("head job fits now; launch it instead of reserving")
    releases = sorted(((max(fin, now), req) for req, fin in running), key=lambda x: x[0])
    i = 0
    while i < len(releases):
        t = releases[i][0]
        while i < len(releases) and releases[i][0] == t:
            free = free + releases[i][1]
            i += 1
        if need.fits(free):
            return Reservation(cluster_id, job_id, t, need, free - need, agent_id)
    raise AssertionError("all releases applied but head still does not fit")


def backfill_select(queue: Sequence, free: ResourceVector, reservation: Optional[Reservation],
                    now) -> list[str]:
    """Jobs from ``queue[1:]`` that can start now without delaying ``queue[0]``.

    Queue items expose ``job_id`` and ``spec``. A job qualifies if it fits the
    remaining free vector and either finishes by the reservation start or
    fits in the reservation's leftover (shadow) resources. With
    ``reservation=None`` only the free vector constrains selection.
    """
    if not queue:
        return []
    if reservation is not None and reservation.job_id is not None \
            and queue[0].job_id != reservation.job_id:
        raise InvalidArgument("queue head is not the reserved job")
    selected = []
    avail = free
    extra = reservation.extra if reservation is not None else None
    for job in queue[1:]:
        req = job.spec.request
        if not req.fits(avail):
            continue
        if reservation is not None and now + job.spec.est_duration_s > reservation.start_at:
            if not req.fits(extra):
                continue
            extra = extra - req
        avail = avail - req
        selected.append(job.job_id)
    return selected
