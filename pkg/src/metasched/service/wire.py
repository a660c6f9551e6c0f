"""Newline-delimited JSON request/reply messages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..errors import MalformedJson, OversizeLine, UnknownType

MAX_LINE = 1 << 20

REQUEST_TYPES = ("submit", "status", "cancel", "list_jobs", "clusters", "agents", "offers",
                 "metrics")
REPLY_TYPES = ("ok", "error")
TYPES = frozenset(REQUEST_TYPES + REPLY_TYPES)


@dataclass
class WireMessage:
    type: str
    request_id: str = ""
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in TYPES:
            raise UnknownType(f"unknown message type {self.type!r}")
        if not isinstance(self.request_id, str):
            raise MalformedJson("request_id must be a string")
        if not isinstance(self.payload, dict):
            raise MalformedJson("payload must be an object")


def ok(request_id: str, **payload) -> WireMessage:
    return WireMessage("ok", request_id, payload)


def error(request_id: str, code: str, message: str, **extra) -> WireMessage:
    return WireMessage("error", request_id, {"code": code, "message": message, **extra})


def encode_message(msg: WireMessage) -> bytes:
    body = {"type": msg.type, "request_id": msg.request_id, "payload": msg.payload}
    line = json.dumps(body, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    data = line.encode("utf-8")
    if len(data) > MAX_LINE:
        raise OversizeLine(f"encoded message is {len(data)} bytes")
    return data + b"\n"


def decode_message(line: bytes) -> WireMessage:
    """Parse one line (trailing LF optional).

    Top-level keys other than type/request_id/payload are folded into the
    payload so nothing the client sent is dropped.
    """
    if line.endswith(b"\n"):
        line = line[:-1]
    if len(line) > MAX_LINE:
        raise OversizeLine(f"line of {len(line)} bytes exceeds {MAX_LINE}")
    try:
        body = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(f"not valid JSON: {exc}") from None
    if not isinstance(body, dict):
        raise MalformedJson("message must be a JSON object")
    if "type" not in body:
        raise MalformedJson("message has no type")
    kind = body.pop("type")
    if not isinstance(kind, str) or kind not in TYPES:
        raise UnknownType(f"unknown message type {kind!r}")
    request_id = body.pop("request_id", "")
    payload = body.pop("payload", {})
    if not isinstance(payload, dict):
        raise MalformedJson("payload must be an object")
    for k, v in body.items():
        payload.setdefault(k, v)
    return WireMessage(kind, request_id, payload)
