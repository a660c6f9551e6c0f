from .harness import (
    AgentTemplate,
    ClusterTemplate,
    SimConfig,
    compare_policies,
    run_simulation,
)
from .metrics import Metrics, audit_trace, compute_metrics
from .rng import Xorshift64Star
from .workload import Arrival, WorkloadParams, generate_workload

__all__ = [
    "AgentTemplate", "Arrival", "ClusterTemplate", "Metrics", "SimConfig", "WorkloadParams",
    "Xorshift64Star", "audit_trace", "compare_policies", "compute_metrics", "generate_workload",
    "run_simulation",
]
