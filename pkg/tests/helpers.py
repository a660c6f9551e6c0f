"""Scenario builders shared by the sim and acceptance tests."""

from pathlib import Path

from metasched.model import JobSpec, ResourceVector
from metasched.sim import AgentTemplate, Arrival, ClusterTemplate, SimConfig

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
THREE_CLOUDS = SCENARIOS / "three_clouds.json"


def three_clouds(**changes) -> SimConfig:
    config = SimConfig.load(THREE_CLOUDS)
    return config.with_(**changes) if changes else config


def job(t, tenant="t", cpus=1, runtime=10, affinity=None, mem_mb=1024, est=None):
    spec = JobSpec(tenant, f"{tenant}/run", ResourceVector(cpus, mem_mb, 0),
                   est if est is not None else runtime, cluster_affinity=affinity)
    return Arrival(float(t), spec, runtime)


def small_clusters(n_agents=2, cpus=4, private=("campus",), names=("chameleon", "jetstream", "campus")):
    out = []
    for name in names:
        reach = "PRIVATE_VIA_NAT" if name in private else "PUBLIC"
        out.append(ClusterTemplate(name, (AgentTemplate(cpus, 16384, 100000, reach, n_agents),)))
    return out


def first_starts(trace):
    """job_id -> time of its first task.running record."""
    out = {}
    for rec in trace:
        if rec["kind"] == "task.running":
            out.setdefault(rec["payload"]["job_id"], rec["t"])
    return out


SERVICE_JSON = SCENARIOS / "service.json"


def service_config(tmp_path, **overrides):
    """The shipped service config with state files moved under ``tmp_path``."""
    import json

    from metasched.service.config import ServiceConfig

    raw = json.loads(SERVICE_JSON.read_text())
    raw.update(listen="127.0.0.1:0", event_log_path=str(tmp_path / "events.jsonl"),
               snapshot_path=str(tmp_path / "snapshot.json"))
    raw.update(overrides)
    return ServiceConfig.from_dict(raw)


class FakeClock:
    def __init__(self, t=1000.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


def _wire_strategies():
    from hypothesis import strategies as st

    from metasched.service import WireMessage
    from metasched.service.wire import TYPES

    values = st.recursive(
        st.none() | st.booleans() | st.integers(-2**53, 2**53)
        | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=20),
        lambda kids: st.lists(kids, max_size=4)
        | st.dictionaries(st.text(max_size=8), kids, max_size=4),
        max_leaves=12)
    return st.builds(WireMessage, st.sampled_from(sorted(TYPES)), st.text(max_size=16),
                     st.dictionaries(st.text(max_size=8), values, max_size=5))


messages = _wire_strategies()
