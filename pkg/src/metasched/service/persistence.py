"""Snapshots: one JSON document followed by a CRC32 line."""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from pathlib import Path
from typing import Optional

from ..errors import SnapshotCorrupt
from ..journal import dumps, read_log
from ..scheduler import MetaScheduler, SchedulerConfig, restore


def encode_snapshot(log_offset: int, t, state: dict) -> bytes:
    doc = dumps({"log_offset": log_offset, "t": t, "state": state}).encode("utf-8")
    return doc + b"\n" + f"{zlib.crc32(doc):08x}\n".encode("ascii")


def decode_snapshot(data: bytes) -> dict:
    doc, sep, rest = data.rstrip(b"\n").rpartition(b"\n")
    if not sep:
        raise SnapshotCorrupt("snapshot has no checksum line")
    try:
        want = int(rest.decode("ascii"), 16)
    except (UnicodeDecodeError, ValueError):
        raise SnapshotCorrupt("unreadable checksum line") from None
    if zlib.crc32(doc) != want:
        raise SnapshotCorrupt("checksum mismatch")
    try:
        snap = json.loads(doc)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotCorrupt(f"bad snapshot document: {exc}") from None
    if not isinstance(snap, dict) or not {"log_offset", "t", "state"} <= set(snap):
        raise SnapshotCorrupt("snapshot document lacks log_offset/t/state")
    return snap


def snapshot_state(sched: MetaScheduler, path, now) -> dict:
    """Atomically write a snapshot of ``sched`` covering every record logged so far."""
    path = Path(path)
    data = encode_snapshot(sched.journal.count, now, sched.to_dict())
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return decode_snapshot(data)


def load_snapshot(path) -> Optional[dict]:
    path = Path(path)
    if not path.exists():
        return None
    return decode_snapshot(path.read_bytes())


def restore_state(snapshot: Optional[dict], log_tail, config: Optional[SchedulerConfig] = None,
                  journal=None, transport=None) -> MetaScheduler:
    state = snapshot["state"] if snapshot is not None else None
    return restore(state, log_tail, config=config, journal=journal, transport=transport)


def recover(snapshot_path, log_path, config: SchedulerConfig, journal=None, transport=None):
    """Latest snapshot plus the log records written after it."""
    snap = load_snapshot(snapshot_path)
    records = read_log(log_path)
    offset = snap["log_offset"] if snap is not None else 0
    if offset > len(records):
        raise SnapshotCorrupt(f"snapshot covers {offset} records but log has {len(records)}")
    sched = restore_state(snap, records[offset:], config, journal, transport)
    return sched, records
