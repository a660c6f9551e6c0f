import asyncio
import json

import pytest
from hypothesis import given

from metasched.errors import (
    ConfigInvalid,
    LogCorrupt,
    MalformedJson,
    OversizeLine,
    SnapshotCorrupt,
    UnknownType,
)
from metasched.journal import EventLog, dumps
from metasched.model import Endpoint, JobSpec, ResourceVector
from metasched.scheduler import MetaScheduler
from metasched.service import (
    Service,
    ServiceConfig,
    WireMessage,
    decode_message,
    encode_message,
)
from metasched.service.config import ENV_VAR, parse_listen
from metasched.service.persistence import (
    decode_snapshot,
    encode_snapshot,
    load_snapshot,
    restore_state,
    snapshot_state,
)
from metasched.service.server import Server
from metasched.service.wire import MAX_LINE

from helpers import FakeClock, messages, service_config

@given(messages)
def test_codec_round_trip(msg):
    line = encode_message(msg)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert decode_message(line) == msg


def test_codec_examples():
    msg = WireMessage("submit", "r1", {"tenant_id": "ultrascan", "request": {"cpus": 1}})
    assert decode_message(encode_message(msg)) == msg
    with pytest.raises(OversizeLine):
        decode_message(b'{"type":"ok","payload":{"x":"' + b"a" * (2 << 20) + b'"}}\n')
    with pytest.raises(OversizeLine):
        encode_message(WireMessage("ok", "", {"x": "a" * MAX_LINE}))
    with pytest.raises(UnknownType):
        decode_message(b'{"type":"frobnicate"}')
    for bad in (b"{nope", b"[1]", b'{"request_id":"r"}', b'{"type":"ok","payload":3}',
                b"\xff\xfe"):
        with pytest.raises(MalformedJson) as info:
            decode_message(bad)
        assert info.value.code == "bad_request"


def test_unknown_fields_are_kept():
    msg = decode_message(b'{"type":"status","request_id":"r","job_id":"j1","payload":{}}')
    assert msg.payload == {"job_id": "j1"}


def test_snapshot_checksum():
    data = encode_snapshot(7, 12.5, {"a": [1, 2]})
    assert decode_snapshot(data) == {"log_offset": 7, "t": 12.5, "state": {"a": [1, 2]}}
    flipped = bytearray(data)
    flipped[5] ^= 0x01
    with pytest.raises(SnapshotCorrupt):
        decode_snapshot(bytes(flipped))
    with pytest.raises(SnapshotCorrupt):
        decode_snapshot(data.split(b"\n")[0])


def test_empty_restore_is_pristine(tmp_path):
    cfg = service_config(tmp_path)
    assert load_snapshot(tmp_path / "none.json") is None
    sched = restore_state(None, [], cfg.scheduler_config())
    assert dumps(sched.to_dict()) == dumps(MetaScheduler(cfg.scheduler_config()).to_dict())


def test_snapshot_then_tail_restores_live_state(tmp_path):
    cfg = service_config(tmp_path)
    log = EventLog()
    sched = MetaScheduler(cfg.scheduler_config(), log)
    sched.add_cluster("c")
    sched.register_agent("c", Endpoint("203.0.113.1", 5051), ResourceVector(4, 4096, 100))
    snap = snapshot_state(sched, tmp_path / "snap.json", 0)
    assert snap["log_offset"] == len(log)
    for i in range(3):
        sched.submit_job(JobSpec("t", "x", ResourceVector(1, 10, 0), 5), i)
    sched.schedule_tick(3)
    assert len(log) - snap["log_offset"] >= 5
    restored = restore_state(load_snapshot(tmp_path / "snap.json"),
                             log.records[snap["log_offset"]:])
    assert dumps(restored.to_dict()) == dumps(sched.to_dict())


def start_service(cfg, clock):
    return Service(cfg, clock=clock).start()


def req(svc, type_, **payload):
    return svc.handle(WireMessage(type_, "r", payload))


SUBMIT = {"tenant_id": "ultrascan", "command": "run", "est_duration_s": 60,
          "request": {"cpus": 1, "mem_mb": 1024, "disk_mb": 0}}


def test_service_commands(tmp_path):
    clock = FakeClock()
    svc = start_service(service_config(tmp_path), clock)
    agents = req(svc, "agents").payload["agents"]
    assert len(agents) == 6 and {a["liveness"] for a in agents} == {"ACTIVE"}
    assert sum(a["reachability"] == "PRIVATE_VIA_NAT" for a in agents) == 2
    assert len(req(svc, "clusters").payload["clusters"]) == 3

    r = req(svc, "submit", **SUBMIT)
    assert r.type == "ok"
    jid = r.payload["job_id"]
    assert req(svc, "status", job_id=jid).payload["job"]["state"] == "QUEUED"
    j2 = req(svc, "submit", **SUBMIT).payload["job_id"]
    assert req(svc, "cancel", job_id=j2).payload["job"]["state"] == "CANCELLED"
    svc.tick()
    assert req(svc, "status", job_id=jid).payload["job"]["state"] == "RUNNING"
    clock.advance(61)
    svc.tick()
    assert req(svc, "status", job_id=jid).payload["job"]["state"] == "FINISHED"
    assert [j["job_id"] for j in req(svc, "list_jobs", tenant_id="ultrascan").payload["jobs"]] \
        == [jid, j2]
    assert req(svc, "list_jobs", tenant_id="nobody").payload["jobs"] == []
    assert req(svc, "metrics").payload["metrics"]["jobs_completed"] == 1
    assert req(svc, "offers").payload["offers"] == []

    e = req(svc, "status", job_id="nonexistent")
    assert e.type == "error" and e.payload["code"] == "unknown_job" and e.payload["user_error"]
    e = req(svc, "cancel", job_id=jid)
    assert e.payload["code"] == "not_cancellable"
    e = req(svc, "submit", tenant_id="x")
    assert e.payload["code"] == "bad_request"
    e = req(svc, "submit", **{**SUBMIT, "request": {"cpus": 64, "mem_mb": 1, "disk_mb": 0}})
    assert e.payload["code"] == "request_unsatisfiable"
    e = req(svc, "ok")
    assert e.type == "error"
    svc.close()


def test_restart_keeps_jobs(tmp_path):
    cfg = service_config(tmp_path, snapshot_every=5)
    clock = FakeClock()
    svc = start_service(cfg, clock)
    ids = [req(svc, "submit", **SUBMIT).payload["job_id"] for _ in range(3)]
    svc.tick()
    before = {j: req(svc, "status", job_id=j).payload["job"] for j in ids}
    live = dumps(svc.sched.to_dict())
    svc.close()

    svc = start_service(cfg, clock)
    assert dumps(svc.sched.to_dict()) == live
    assert {j: req(svc, "status", job_id=j).payload["job"] for j in ids} == before
    assert len(req(svc, "agents").payload["agents"]) == 6
    clock.advance(61)
    for _ in range(3):
        svc.tick()
        clock.advance(1)
    assert {req(svc, "status", job_id=j).payload["job"]["state"] for j in ids} == {"FINISHED"}
    assert load_snapshot(cfg.snapshot_path) is not None
    svc.close()


def test_corrupt_log_halts_startup(tmp_path):
    cfg = service_config(tmp_path)
    svc = start_service(cfg, FakeClock())
    svc.close()
    with open(cfg.event_log_path, "a") as fh:
        fh.write('{"t": 1, "kind"\n')
    n = sum(1 for _ in open(cfg.event_log_path))
    with pytest.raises(LogCorrupt) as info:
        start_service(cfg, FakeClock())
    assert info.value.line == n


def test_clock_going_backwards_is_absorbed(tmp_path):
    clock = FakeClock(500)
    svc = start_service(service_config(tmp_path), clock)
    clock.t = 100
    assert svc.now() == 500
    assert req(svc, "submit", **SUBMIT).type == "ok"
    svc.close()


def test_config_validation(tmp_path, monkeypatch):
    assert parse_listen("127.0.0.1:0") == ("127.0.0.1", 0)
    for bad in ("localhost:80", "127.0.0.1", "127.0.0.1:70000"):
        with pytest.raises(ConfigInvalid):
            parse_listen(bad)
    with pytest.raises(ConfigInvalid):
        service_config(tmp_path, tick_period_s=0)
    with pytest.raises(ConfigInvalid):
        service_config(tmp_path, colour="blue")
    blocker = tmp_path / "plain-file"
    blocker.write_text("")
    with pytest.raises(ConfigInvalid):
        ServiceConfig(blocker / "events.jsonl", tmp_path / "s.json")
    path = tmp_path / "svc.json"
    raw = {"event_log_path": "deep/state/events.jsonl", "snapshot_path": "deep/state/snap.json"}
    path.write_text(json.dumps(raw))
    monkeypatch.setenv(ENV_VAR, str(path))
    cfg = ServiceConfig.load()
    assert cfg.event_log_path == tmp_path / "deep/state/events.jsonl"
    monkeypatch.delenv(ENV_VAR)
    with pytest.raises(ConfigInvalid):
        ServiceConfig.load()


async def _exchange(reader, writer, line: bytes):
    writer.write(line)
    await writer.drain()
    return json.loads(await reader.readline())


def test_tcp_server(tmp_path):
    async def scenario():
        svc = Service(service_config(tmp_path)).start()
        server = Server(svc)
        await server.start()
        try:
            r1, w1 = await asyncio.open_connection("127.0.0.1", server.port, limit=4 << 20)
            r2, w2 = await asyncio.open_connection("127.0.0.1", server.port, limit=4 << 20)
            bad = await _exchange(r1, w1, b"{not json\n")
            assert bad["type"] == "error" and bad["payload"]["code"] == "bad_request"
            odd = await _exchange(r1, w1, b'{"type":"frobnicate","request_id":"f1"}\n')
            assert odd["payload"]["code"] == "unknown_type" and odd["request_id"] == "f1"
            big = await _exchange(r1, w1, b'{"type":"status","x":"' + b"a" * (2 << 20) + b'"}\n')
            assert big["payload"]["code"] == "oversize_line"
            # both clients submit concurrently; the connection survived the errors
            line = encode_message(WireMessage("submit", "s", SUBMIT))
            a, b = await asyncio.gather(_exchange(r1, w1, line), _exchange(r2, w2, line))
            assert a["type"] == b["type"] == "ok"
            assert a["payload"]["job_id"] != b["payload"]["job_id"]
            for w in (w1, w2):
                w.close()
        finally:
            await server.stop()
            svc.close()

    asyncio.run(scenario())
