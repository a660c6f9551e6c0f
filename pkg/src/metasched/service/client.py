"""Blocking client for the line protocol."""

from __future__ import annotations

import itertools
import socket

from .wire import MAX_LINE, WireMessage, decode_message, encode_message

_ids = itertools.count(1)


class Client:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")

    def request(self, type_: str, payload: dict | None = None) -> WireMessage:
        rid = f"r{next(_ids)}"
        self.sock.sendall(encode_message(WireMessage(type_, rid, payload or {})))
        line = self.rfile.readline(MAX_LINE + 2)
        if not line:
            raise ConnectionError("server closed the connection")
        return decode_message(line)

    def close(self):
        self.rfile.close()
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
