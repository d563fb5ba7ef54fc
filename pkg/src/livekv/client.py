"""Minimal blocking client for the line protocol."""
from __future__ import annotations

import socket

from .protocol import quote


class ProtocolError(Exception):
    pass


class Client:
    def __init__(self, host: str = "127.0.0.1", port: int = 7474, timeout: float | None = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb")

    def send(self, line: str) -> None:
        self.sock.sendall(line.encode() + b"\n")

    def recv(self) -> str:
        first = self.rfile.readline()
        if not first:
            raise ProtocolError("connection closed")
        text = first.decode().rstrip("\n")
        if text != "STATS":
            return text
        lines = [text]
        while True:
            nxt = self.rfile.readline()
            if not nxt:
                raise ProtocolError("connection closed inside STATS")
            nxt = nxt.decode().rstrip("\n")
            lines.append(nxt)
            if nxt == ".":
                return "\n".join(lines)

    def call(self, line: str) -> str:
        self.send(line)
        return self.recv()

    def version(self) -> tuple[int, str]:
        resp = self.call("VERSION")
        parts = resp.split()
        if len(parts) != 3 or parts[0] != "VER":
            raise ProtocolError(resp)
        return int(parts[1]), parts[2]

    def get(self, key: str) -> str:
        return self.call(f"GET {quote(key)}")

    def set(self, key: str, value: str) -> str:
        return self.call(f"SET {quote(key)} {quote(value)}")

    def stats(self) -> dict[str, str]:
        lines = self.call("STATS").split("\n")[1:-1]
        return dict(ln.split("=", 1) for ln in lines)

    def close(self) -> None:
        try:
            self.send("QUIT")
        except OSError:
            pass
        self.rfile.close()
        self.sock.close()

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
