"""Append-only JSON-lines event log.

Every state change in the scheduler is one record ``{"t", "kind", "payload"}``.
Components never mutate state directly: they validate, then ``commit`` an
event whose handler performs the mutation. Replaying the same records
through the same handlers rebuilds the same state.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import LogCorrupt


def dumps(obj) -> str:
    """Canonical JSON used for log lines, snapshots and hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


class EventLog:
    def __init__(self, path: Optional[os.PathLike] = None, *, keep: bool = True,
                 fsync: bool = False):
        self.records: list[dict] = []
        self.count = 0
        self.keep = keep
        self.fsync = fsync
        self.listeners: list[Callable[[dict], None]] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "a", encoding="utf-8")

    def append(self, t, kind: str, payload: dict) -> dict:
        rec = {"t": t, "kind": kind, "payload": payload}
        if self._fh is not None:
            self._fh.write(dumps(rec) + "\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
        if self.keep:
            self.records.append(rec)
        self.count += 1
        for fn in self.listeners:
            fn(rec)
        return rec

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __len__(self):
        return self.count

    def __iter__(self):
        return iter(self.records)

    def to_jsonl(self) -> str:
        return "".join(dumps(r) + "\n" for r in self.records)

    def trace_hash(self) -> str:
        return trace_hash(self.records)


def trace_hash(records: Iterable[dict]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(dumps(r).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def parse_line(line: str, lineno: int) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogCorrupt(lineno, f"invalid JSON ({exc.msg})") from None
    if (not isinstance(rec, dict) or not isinstance(rec.get("kind"), str)
            or not isinstance(rec.get("payload"), dict) or "t" not in rec):
        raise LogCorrupt(lineno, "record is not {t, kind, payload}")
    return rec


def read_log(path: os.PathLike) -> list[dict]:
    """Read a JSON-lines log; halts at the first malformed record."""
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise LogCorrupt(lineno, "truncated record")
            out.append(parse_line(line, lineno))
    return out


class Journaled:
    """Mixin: route mutations through ``_commit`` so they can be replayed.

    Subclasses implement ``_on_<suffix>(t, payload)`` for each event kind
    ``<prefix>.<suffix>`` they own.
    """

    journal: Optional[EventLog] = None

    def _commit(self, t, kind: str, payload: dict) -> dict:
        self.apply(t, kind, payload)
        rec = {"t": t, "kind": kind, "payload": payload}
        if self.journal is not None:
            rec = self.journal.append(t, kind, payload)
        return rec

    def apply(self, t, kind: str, payload: dict) -> None:
        suffix = kind.split(".", 1)[1]
        getattr(self, "_on_" + suffix)(t, payload)
