"""NAT gateway that admits agents which cannot open server-side sockets.

A private agent dials out to the gateway, gets a public (gateway host, port)
mapping with a lease, and keeps one outbound channel open. Everything the
master sends to that agent is relayed over the channel.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .errors import (
    ChannelDown,
    DuplicateInternalEndpoint,
    InvalidArgument,
    MappingNotFound,
    PoolExhausted,
)
from .journal import Journaled
from .model import Endpoint

LIVE = "LIVE"
EXPIRED = "EXPIRED"


@dataclass(frozen=True)
class NatConfig:
    gateway_host: str = "198.51.100.1"
    range_start: int = 31000
    range_end: int = 31999
    lease_ttl_s: float = 60
    enabled: bool = True
    relay_latency_s: float = 0

    def __post_init__(self):
        Endpoint(self.gateway_host, self.range_start)
        Endpoint(self.gateway_host, self.range_end)
        if self.range_start > self.range_end:
            raise InvalidArgument("port range start exceeds end")
        if self.lease_ttl_s <= 0:
            raise InvalidArgument("lease_ttl_s must be positive")
        if self.relay_latency_s < 0:
            raise InvalidArgument("relay_latency_s must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "NatConfig":
        d = dict(d or {})
        if "port_range" in d:
            d["range_start"], d["range_end"] = d.pop("port_range")
        if "lease_ttl" in d:
            d["lease_ttl_s"] = d.pop("lease_ttl")
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def to_dict(self) -> dict:
        return {
            "gateway_host": self.gateway_host,
            "port_range": [self.range_start, self.range_end],
            "lease_ttl_s": self.lease_ttl_s,
            "enabled": self.enabled,
            "relay_latency_s": self.relay_latency_s,
        }


@dataclass(frozen=True)
class NatMapping:
    mapping_id: str
    agent_internal: Endpoint
    public: Endpoint
    lease_expires_at: float
    state: str = LIVE

    def to_dict(self) -> dict:
        return {
            "mapping_id": self.mapping_id,
            "agent_internal": self.agent_internal.to_dict(),
            "public": self.public.to_dict(),
            "lease_expires_at": self.lease_expires_at,
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NatMapping":
        return cls(d["mapping_id"], Endpoint.from_dict(d["agent_internal"]),
                   Endpoint.from_dict(d["public"]), d["lease_expires_at"], d["state"])


class PortPool:
    """Ports in [range_start, range_end]; always hands out the lowest free one."""

    def __init__(self, gateway_host: str, range_start: int, range_end: int):
        self.gateway_host = gateway_host
        self.range_start = range_start
        self.range_end = range_end
        self.allocated: set[int] = set()
        self._free = list(range(range_start, range_end + 1))  # already a heap

    @property
    def size(self) -> int:
        return self.range_end - self.range_start + 1

    def free_count(self) -> int:
        return len(self._free)

    def take(self, port: Optional[int] = None) -> int:
        if port is None:
            if not self._free:
                raise PoolExhausted(f"no free ports in {self.range_start}-{self.range_end}")
            port = heapq.heappop(self._free)
        elif self._free and self._free[0] == port:
            heapq.heappop(self._free)
        else:
            # replay path: the port was chosen when the event was recorded
            self._free.remove(port)
            heapq.heapify(self._free)
        self.allocated.add(port)
        return port

    def peek(self) -> int:
        if not self._free:
            raise PoolExhausted(f"no free ports in {self.range_start}-{self.range_end}")
        return self._free[0]

    def release(self, port: int) -> None:
        self.allocated.remove(port)
        heapq.heappush(self._free, port)


@dataclass(frozen=True)
class RelayAck:
    mapping_id: str
    msg_id: int
    delivered_to: Endpoint
    reply: object = None


class NatGateway(Journaled):
    def __init__(self, config: Optional[NatConfig] = None, journal=None):
        self.config = config or NatConfig()
        self.journal = journal
        self.pool = PortPool(self.config.gateway_host, self.config.range_start,
                             self.config.range_end)
        self.mappings: dict[str, NatMapping] = {}
        self._live_by_internal: dict[Endpoint, str] = {}
        self._live_by_port: dict[int, str] = {}
        self._next_id = 1
        # runtime only: outbound channels are not part of persisted state
        self._channels: dict[str, Callable[[bytes], object]] = {}
        self._next_msg = 1
        self.expiry_listeners: list[Callable[[NatMapping, float], None]] = []

    # -- queries -------------------------------------------------------
    def live_mappings(self) -> list[NatMapping]:
        return [self.mappings[m] for m in sorted(self._live_by_port.values())]

    def _live(self, mapping_id: str, now=None) -> NatMapping:
        m = self.mappings.get(mapping_id)
        if m is None or m.state != LIVE or (now is not None and now > m.lease_expires_at):
            raise MappingNotFound(f"no live mapping {mapping_id}")
        return m

    def lookup_public(self, public: Endpoint, now=None) -> NatMapping:
        mid = None
        if public.host == self.config.gateway_host:
            mid = self._live_by_port.get(public.port)
        if mid is None:
            raise MappingNotFound(f"no live mapping for {public}")
        return self._live(mid, now)

    def resolve(self, public: Endpoint, now=None) -> Endpoint:
        return self.lookup_public(public, now).agent_internal

    def resolve_internal(self, internal: Endpoint) -> Optional[NatMapping]:
        mid = self._live_by_internal.get(internal)
        return self.mappings[mid] if mid is not None else None

    def issued(self, public: Endpoint) -> bool:
        try:
            self.lookup_public(public)
        except MappingNotFound:
            return False
        return True

    # -- operations ----------------------------------------------------
    def register_private_agent(self, agent_internal: Endpoint, now) -> NatMapping:
        if agent_internal in self._live_by_internal:
            raise DuplicateInternalEndpoint(f"{agent_internal} already has a live mapping")
        port = self.pool.peek()
        mapping_id = f"m{self._next_id:05d}"
        self._commit(now, "nat.mapped", {
            "mapping_id": mapping_id,
            "agent_internal": agent_internal.to_dict(),
            "public_port": port,
            "lease_expires_at": now + self.config.lease_ttl_s,
        })
        return self.mappings[mapping_id]

    def renew(self, mapping_id: str, now) -> NatMapping:
        self._live(mapping_id, now)
        self._commit(now, "nat.renewed", {
            "mapping_id": mapping_id,
            "lease_expires_at": now + self.config.lease_ttl_s,
        })
        return self.mappings[mapping_id]

    def sweep_expired(self, now) -> list[str]:
        expired = sorted(mid for mid in self._live_by_port.values()
                         if self.mappings[mid].lease_expires_at < now)
        if expired:
            self._commit(now, "nat.expired", {"mapping_ids": expired})
            for mid in expired:
                for fn in self.expiry_listeners:
                    fn(self.mappings[mid], now)
        return expired

    def open_channel(self, mapping_id: str, handler: Callable[[bytes], object]) -> None:
        self._live(mapping_id)
        self._channels[mapping_id] = handler

    def close_channel(self, mapping_id: str) -> None:
        self._channels.pop(mapping_id, None)

    def relay(self, public: Endpoint, message: bytes, now=None) -> RelayAck:
        """Forward ``message`` to the agent behind ``public``; at most once."""
        mapping = self.lookup_public(public, now)
        handler = self._channels.get(mapping.mapping_id)
        if handler is None:
            raise ChannelDown(f"no outbound channel from {mapping.agent_internal}")
        msg_id = self._next_msg
        self._next_msg += 1
        try:
            reply = handler(message)
        except ChannelDown:
            raise
        except Exception as exc:
            # the message may or may not have arrived; never resend it
            self._channels.pop(mapping.mapping_id, None)
            raise ChannelDown(f"channel to {mapping.agent_internal} failed: {exc}") from exc
        return RelayAck(mapping.mapping_id, msg_id, mapping.agent_internal, reply)

    # -- event handlers ------------------------------------------------
    def _on_mapped(self, t, p):
        mid = p["mapping_id"]
        port = self.pool.take(p["public_port"])
        m = NatMapping(mid, Endpoint.from_dict(p["agent_internal"]),
                       Endpoint(self.config.gateway_host, port), p["lease_expires_at"])
        self.mappings[mid] = m
        self._live_by_internal[m.agent_internal] = mid
        self._live_by_port[port] = mid
        self._next_id = max(self._next_id, int(mid[1:]) + 1)

    def _on_renewed(self, t, p):
        m = self.mappings[p["mapping_id"]]
        self.mappings[m.mapping_id] = replace(m, lease_expires_at=p["lease_expires_at"])

    def _on_expired(self, t, p):
        for mid in p["mapping_ids"]:
            m = self.mappings[mid]
            self.mappings[mid] = replace(m, state=EXPIRED)
            del self._live_by_internal[m.agent_internal]
            del self._live_by_port[m.public.port]
            self.pool.release(m.public.port)
            self._channels.pop(mid, None)

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "next_id": self._next_id,
            "mappings": [self.mappings[k].to_dict() for k in sorted(self.mappings)],
        }

    def load_dict(self, d: dict) -> None:
        for md in d["mappings"]:
            m = NatMapping.from_dict(md)
            self.mappings[m.mapping_id] = m
            if m.state == LIVE:
                self.pool.take(m.public.port)
                self._live_by_internal[m.agent_internal] = m.mapping_id
                self._live_by_port[m.public.port] = m.mapping_id
        self._next_id = d["next_id"]


# service-mode relay framing: 4-byte big-endian length, then UTF-8 JSON
_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20


def encode_frame(message: dict) -> bytes:
    body = json.dumps(message, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise InvalidArgument(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(body)) + body


class FrameDecoder:
    """Incremental decoder for length-prefixed frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= _HEADER.size:
            (n,) = _HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise InvalidArgument(f"frame of {n} bytes exceeds {MAX_FRAME}")
            if len(self._buf) < _HEADER.size + n:
                break
            body = bytes(self._buf[_HEADER.size:_HEADER.size + n])
            del self._buf[:_HEADER.size + n]
            out.append(json.loads(body.decode("utf-8")))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
