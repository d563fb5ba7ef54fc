"""TCP server wiring: generation store, engine, coordinator, connection policy."""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import ipaddress
import itertools
import json
import logging
import signal
import socket
import threading
from dataclasses import dataclass, field

from .connmgmt import Connection, Policy, make_policy
from .engine import Engine
from .functions import default_functions
from .generations import GenerationStore
from .protocol import Executor, err
from .quiescence import Coordinator

log = logging.getLogger(__name__)

DEFAULT_PORT = 7474


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    policy: str = "otpc"
    pool_groups: int = 3
    max_connections: int = 256
    worker_cap_per_group: int = 8
    thread_cache_size: int = 16
    naive_quiescence: bool = False
    admin_allow: list[str] = field(default_factory=lambda: ["127.0.0.1/32", "::1/128"])
    watchdog_timeout: float = 10.0
    wakeup_interval: float = 0.001
    lock_wait_timeout: float = 5.0
    max_pages: int = 1 << 16
    code_pages: int = 80
    dedicated_threshold: int = 100

    @classmethod
    def from_dict(cls, d: dict) -> "ServerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def validate(self) -> None:
        if self.policy not in ("otpc", "pool"):
            raise ValueError("policy must be otpc or pool")
        if self.pool_groups < 1:
            raise ValueError("pool_groups must be >= 1")
        if self.max_connections < 1:
            raise ValueError("max_connections must be >= 1")
        for net in self.admin_allow:
            ipaddress.ip_network(net, strict=False)


class Server:
    def __init__(self, config: ServerConfig | None = None, **overrides):
        cfg = config or ServerConfig()
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
        self.config = cfg
        self.store = GenerationStore(default_functions(), cfg.code_pages)
        self.store.pin([range(0, cfg.code_pages)])
        self.coordinator = Coordinator(self.store, naive=cfg.naive_quiescence,
                                       watchdog_timeout=cfg.watchdog_timeout,
                                       wakeup_interval=cfg.wakeup_interval)
        self.engine = Engine(self.store, max_pages=cfg.max_pages,
                             lock_wait_timeout=cfg.lock_wait_timeout)
        self.executor = Executor(self.engine, self.coordinator, stats=self._stats)
        self.policy: Policy = make_policy(cfg.policy, self.coordinator, self.executor,
                                          pool_groups=cfg.pool_groups,
                                          worker_cap_per_group=cfg.worker_cap_per_group,
                                          thread_cache_size=cfg.thread_cache_size,
                                          dedicated_threshold=cfg.dedicated_threshold)
        self._admin_nets = [ipaddress.ip_network(n, strict=False) for n in cfg.admin_allow]
        self._conn_ids = itertools.count(1)
        self._sock: socket.socket | None = None
        self._acceptor: threading.Thread | None = None
        self._stopped = threading.Event()
        self.rejected = 0

    @property
    def address(self) -> tuple[str, int]:
        if self._sock is None:
            raise RuntimeError("server not started")
        return self._sock.getsockname()[:2]

    def start(self) -> "Server":
        family = socket.AF_INET6 if ":" in self.config.host else socket.AF_INET
        s = socket.socket(family, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((self.config.host, self.config.port))
        s.listen(512)
        self._sock = s
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True, name="acceptor")
        self._acceptor.start()
        log.info("listening on %s:%d (%s)", *self.address, self.config.policy)
        return self

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        if self._sock is not None:
            with contextlib.suppress(OSError):
                self._sock.shutdown(socket.SHUT_RDWR)
            with contextlib.suppress(OSError):
                self._sock.close()
        self.policy.stop()
        if self._acceptor is not None:
            self._acceptor.join(2)

    def serve_forever(self) -> None:
        self._stopped.wait()

    def __enter__(self) -> "Server":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def is_admin(self, addr) -> bool:
        try:
            ip = ipaddress.ip_address(addr[0])
        except (ValueError, IndexError, TypeError):
            return False
        return any(ip in n for n in self._admin_nets)

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, addr = self._sock.accept()
            except OSError:
                if self._stopped.is_set():
                    return
                continue
            if len(self.policy.open) >= self.config.max_connections:
                self.rejected += 1
                with contextlib.suppress(OSError):
                    sock.sendall((err(503, "too many connections") + "\n").encode())
                    sock.close()
                continue
            conn = Connection(sock, addr, next(self._conn_ids), self.is_admin(addr))
            try:
                self.policy.assign(conn)
            except Exception:
                log.exception("failed to assign connection")
                conn.close()

    def _stats(self) -> dict[str, object]:
        st = self.policy.stats()
        st["rejected"] = self.rejected
        return st


def load_config(path: str | None) -> ServerConfig:
    if path is None:
        return ServerConfig()
    with open(path, encoding="utf-8") as f:
        return ServerConfig.from_dict(json.load(f))


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="livekv-server", description="Run the live-patchable KV server.")
    ap.add_argument("--config", help="JSON file with server settings")
    ap.add_argument("--host")
    ap.add_argument("--port", type=int)
    ap.add_argument("--policy", choices=["otpc", "pool"])
    ap.add_argument("--pool-groups", type=int)
    ap.add_argument("--max-connections", type=int)
    ap.add_argument("--worker-cap-per-group", type=int)
    ap.add_argument("--thread-cache-size", type=int)
    ap.add_argument("--naive-quiescence", action="store_true", default=None)
    ap.add_argument("--watchdog", type=float, dest="watchdog_timeout")
    ap.add_argument("--admin-allow", action="append", help="CIDR allowed to PATCH/PRELOAD")
    ap.add_argument("--admin-only", action="store_true",
                    help="only allow admin commands from --admin-allow networks (default)")
    ap.add_argument("--admin-any", action="store_true", help="allow admin commands from any address")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config)
    for key in ("host", "port", "policy", "pool_groups", "max_connections",
                "worker_cap_per_group", "thread_cache_size", "naive_quiescence",
                "watchdog_timeout", "admin_allow"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if args.admin_any:
        cfg.admin_allow = ["0.0.0.0/0", "::/0"]
    server = Server(cfg).start()
    signal.signal(signal.SIGTERM, lambda *_: server.stop())
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
