"""Job records plus the indexes the scheduler queries every tick."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterator, Optional

from .errors import UnknownJob
from .model import ACTIVE_STATES, PLACED_STATES, JobRecord, JobState


class JobTable:
    def __init__(self):
        self._jobs: dict[str, JobRecord] = {}
        self.active_counts: dict[tuple, int] = defaultdict(int)
        self._queued: dict[str, dict[str, int]] = defaultdict(dict)  # cluster -> job -> seq
        self._queued_tenants: dict[tuple, int] = defaultdict(int)   # (tenant, cluster)
        self._placed: dict[str, set] = defaultdict(set)             # agent -> jobs
        self._parked: dict[str, int] = {}                           # job -> seq
        self._open = 0  # jobs not yet in a terminal state

    def __len__(self):
        return len(self._jobs)

    def __contains__(self, job_id):
        return job_id in self._jobs

    def __iter__(self) -> Iterator[JobRecord]:
        return iter(self._jobs.values())

    def get(self, job_id: str) -> JobRecord:
        try:
            return self._jobs[job_id]
        except KeyError:
            raise UnknownJob(f"unknown job {job_id}") from None

    def put(self, rec: JobRecord) -> None:
        old = self._jobs.get(rec.job_id)
        if old is not None:
            self._unindex(old)
        self._jobs[rec.job_id] = rec
        self._index(rec)

    def _index(self, r: JobRecord):
        st = r.state
        if st in ACTIVE_STATES and r.cluster_id is not None:
            self.active_counts[(r.tenant_id, r.cluster_id)] += 1
        if st is JobState.QUEUED:
            self._queued[r.cluster_id][r.job_id] = r.seq
            self._queued_tenants[(r.tenant_id, r.cluster_id)] += 1
        elif st in PLACED_STATES:
            self._placed[r.agent_id].add(r.job_id)
        elif st is JobState.SUBMITTED:
            self._parked[r.job_id] = r.seq
        if st not in (JobState.FINISHED, JobState.FAILED, JobState.CANCELLED):
            self._open += 1

    def _unindex(self, r: JobRecord):
        st = r.state
        if st in ACTIVE_STATES and r.cluster_id is not None:
            key = (r.tenant_id, r.cluster_id)
            self.active_counts[key] -= 1
            if not self.active_counts[key]:
                del self.active_counts[key]
        if st is JobState.QUEUED:
            del self._queued[r.cluster_id][r.job_id]
            key = (r.tenant_id, r.cluster_id)
            self._queued_tenants[key] -= 1
            if not self._queued_tenants[key]:
                del self._queued_tenants[key]
        elif st in PLACED_STATES:
            self._placed[r.agent_id].discard(r.job_id)
        elif st is JobState.SUBMITTED:
            del self._parked[r.job_id]
        if st not in (JobState.FINISHED, JobState.FAILED, JobState.CANCELLED):
            self._open -= 1

    # -- queries -------------------------------------------------------
    def active_count(self, tenant_id: str, cluster_id: str) -> int:
        return self.active_counts.get((tenant_id, cluster_id), 0)

    def has_queued(self, tenant_id: str, cluster_id: str) -> bool:
        return self._queued_tenants.get((tenant_id, cluster_id), 0) > 0

    def queue(self, cluster_id: str, tenant_id: Optional[str] = None) -> list[JobRecord]:
        q = self._queued.get(cluster_id, {})
        ids = sorted(q, key=lambda j: (q[j], j))
        jobs = [self._jobs[j] for j in ids]
        if tenant_id is not None:
            jobs = [j for j in jobs if j.tenant_id == tenant_id]
        return jobs

    def queued_clusters(self) -> list[str]:
        return sorted(c for c, q in self._queued.items() if q)

    def placed_on(self, agent_id: str) -> list[JobRecord]:
        return [self._jobs[j] for j in sorted(self._placed.get(agent_id, ()))]

    def parked(self) -> list[JobRecord]:
        return [self._jobs[j] for j in sorted(self._parked, key=lambda j: (self._parked[j], j))]

    def open_count(self) -> int:
        return self._open

    def to_list(self) -> list[dict]:
        return [self._jobs[j].to_dict() for j in sorted(self._jobs)]
