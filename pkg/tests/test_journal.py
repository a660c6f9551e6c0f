import pytest

from metasched.errors import LogCorrupt
from metasched.journal import EventLog, dumps, read_log, trace_hash


def test_dumps_is_canonical():
    assert dumps({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    with pytest.raises(ValueError):
        dumps({"x": float("nan")})


def test_log_writes_and_reads_back(tmp_path):
    path = tmp_path / "events.jsonl"
    log = EventLog(path)
    seen = []
    log.listeners.append(lambda rec: seen.append(log.count))
    log.append(0, "a.x", {"n": 1})
    log.append(1.5, "a.y", {})
    log.close()
    assert seen == [1, 2]
    assert read_log(path) == log.records
    assert len(log) == 2


def test_missing_log_is_empty(tmp_path):
    assert read_log(tmp_path / "nope.jsonl") == []


@pytest.mark.parametrize("text, line", [
    ('{"t":0,"kind":"a.x","payload":{}}\n{"t":1,"kind":', 2),
    ('{"t":0,"kind":"a.x","payload":{}}\nnot json\n', 2),
    ('[1, 2]\n', 1),
    ('{"t":0,"kind":"a.x","payload":{}}\n{"t":1,"kind":"a.x","payload":3}\n', 2),
    ('{"kind":"a.x","payload":{}}\n', 1),
])
def test_corrupt_log_halts_at_first_bad_line(tmp_path, text, line):
    path = tmp_path / "events.jsonl"
    path.write_text(text)
    with pytest.raises(LogCorrupt) as info:
        read_log(path)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_trace_hash_depends_on_content_and_order():
    a = {"t": 0, "kind": "a.x", "payload": {}}
    b = {"t": 1, "kind": "a.y", "payload": {"k": 2}}
    assert trace_hash([a, b]) == trace_hash([dict(a), dict(b)])
    assert trace_hash([a, b]) != trace_hash([b, a])
    log = EventLog()
    log.append(0, "a.x", {})
    log.append(1, "a.y", {"k": 2})
    assert log.trace_hash() == trace_hash([a, b])
