"""Synthetic bursty workloads of many small per-tenant jobs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from ..errors import ConfigInvalid
from ..model import JobSpec, ResourceVector
from .rng import Xorshift64Star


@dataclass(frozen=True)
class WorkloadParams:
    n_tenants: int = 3
    # Poisson arrivals per tenant, jobs/s
    arrival_rate: float = 0.005
    # (burst_size, burst_interval_s); each burst belongs to one tenant
    burst: Optional[tuple] = (10, 60)
    cpus_choices: tuple = (1, 2, 4)
    cpus_weights: tuple = (0.5, 0.3, 0.2)
    mem_mb_range: tuple = (512, 8192)
    duration_s_range: tuple = (10, 600)
    estimate_error: float = 1.0
    tenants: Optional[tuple] = None

    def __post_init__(self):
        if self.n_tenants < 1:
            raise ConfigInvalid("n_tenants must be positive")
        if not self.arrival_rate > 0:
            raise ConfigInvalid("arrival_rate must be positive")
        if self.burst is not None:
            size, interval = self.burst
            if size < 1 or interval <= 0:
                raise ConfigInvalid("burst needs size >= 1 and interval > 0")
        if len(self.cpus_choices) != len(self.cpus_weights) or not self.cpus_choices:
            raise ConfigInvalid("cpus_choices and cpus_weights must align")
        lo, hi = self.mem_mb_range
        if not 1 <= lo <= hi:
            raise ConfigInvalid("bad mem_mb_range")
        lo, hi = self.duration_s_range
        if not 1 <= lo <= hi:
            raise ConfigInvalid("bad duration_s_range")
        if self.estimate_error < 1:
            raise ConfigInvalid("estimate_error must be >= 1")
        if self.tenants is not None and len(self.tenants) != self.n_tenants:
            raise ConfigInvalid("tenants list must have n_tenants names")

    def tenant_names(self) -> list[str]:
        if self.tenants is not None:
            return list(self.tenants)
        return [f"tenant-{i:02d}" for i in range(self.n_tenants)]

    def to_dict(self) -> dict:
        return {
            "n_tenants": self.n_tenants,
            "arrival_rate": self.arrival_rate,
            "burst": list(self.burst) if self.burst is not None else None,
            "cpus_choices": list(self.cpus_choices),
            "cpus_weights": list(self.cpus_weights),
            "mem_mb_range": list(self.mem_mb_range),
            "duration_s_range": list(self.duration_s_range),
            "estimate_error": self.estimate_error,
            "tenants": list(self.tenants) if self.tenants is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadParams":
        d = dict(d or {})
        for k in ("burst", "cpus_choices", "cpus_weights", "mem_mb_range",
                  "duration_s_range", "tenants"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown workload keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from None


class Arrival(NamedTuple):
    t: float
    spec: JobSpec
    # true runtime; est_duration_s on the JobSpec is what the scheduler sees
    runtime_s: int


def _make_job(rng: Xorshift64Star, params: WorkloadParams, tenant: str, n: int):
    cpus = rng.weighted_choice(params.cpus_choices, params.cpus_weights)
    mem = int(round(rng.log_uniform(*params.mem_mb_range)))
    runtime = max(1, int(round(rng.log_uniform(*params.duration_s_range))))
    factor = rng.uniform(1.0, params.estimate_error)
    est = runtime if params.estimate_error == 1 else max(runtime, math.ceil(runtime * factor))
    spec = JobSpec(tenant, f"{tenant}/job-{n}", ResourceVector(cpus, mem, 0), est)
    return spec, runtime


def generate_workload(params: WorkloadParams, seed: int, horizon_s: float) -> list[Arrival]:
    """Deterministic arrivals over [0, horizon_s].

    Draw order: each tenant's Poisson stream in tenant order, then bursts at
    interval, 2*interval, ... <= horizon. Per job the draws are cpus, mem,
    runtime, estimate factor.
    """
    rng = Xorshift64Star(seed)
    tenants = params.tenant_names()
    out = []
    n = 0
    for tenant in tenants:
        t = 0.0
        while True:
            t += rng.exponential(params.arrival_rate)
            if t > horizon_s:
                break
            spec, runtime = _make_job(rng, params, tenant, n)
            out.append(Arrival(t, spec, runtime))
            n += 1
    if params.burst is not None:
        size, interval = params.burst
        k = 1
        while k * interval <= horizon_s:
            tenant = tenants[rng.below(len(tenants))]
            for _ in range(size):
                spec, runtime = _make_job(rng, params, tenant, n)
                out.append(Arrival(float(k * interval), spec, runtime))
                n += 1
            k += 1
    out.sort(key=lambda a: a.t)  # stable: generation order breaks ties
    return out


def serialize_workload(arrivals: list[Arrival]) -> bytes:
    rows = [{"t": a.t, "spec": a.spec.to_dict(), "runtime_s": a.runtime_s} for a in arrivals]
    return json.dumps(rows, sort_keys=True, separators=(",", ":")).encode("utf-8")
