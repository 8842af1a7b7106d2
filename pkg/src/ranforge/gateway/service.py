"""Service configuration and the running HTTP service handle.

Configuration sources, lowest to highest precedence: defaults, environment
(``RANFORGE_BIND``, ``RANFORGE_DATA_DIR``, ``RANFORGE_INVENTORY``), then a
YAML/JSON config file with keys ``bind``, ``data_dir``, ``inventory``,
``scheduler``.
"""

from __future__ import annotations

import os
import socket
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional

import uvicorn
import yaml

from ..errors import BindFailure, ConfigInvalid
from ..testbed import Testbed
from .api import create_app

DEFAULT_BIND = "127.0.0.1:8645"
DEFAULT_DATA_DIR = "ranforge-data"


@dataclass(frozen=True)
class ServiceConfig:
    bind: str = DEFAULT_BIND
    data_dir: str = DEFAULT_DATA_DIR
    inventory: Optional[str] = None
    scheduler: bool = True

    @property
    def host_port(self) -> tuple[str, int]:
        host, sep, port = self.bind.rpartition(":")
        if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
            raise ConfigInvalid(f"bind address {self.bind!r} is not host:port")
        return host or "127.0.0.1", int(port)

    def validate(self) -> "ServiceConfig":
        self.host_port
        if not self.data_dir:
            raise ConfigInvalid("data_dir must be non-empty")
        if self.inventory is not None and not Path(self.inventory).is_file():
            raise ConfigInvalid(f"inventory file {self.inventory} does not exist")
        return self

    @classmethod
    def from_env(cls, env: Optional[Mapping[str, str]] = None) -> "ServiceConfig":
        env = os.environ if env is None else env
        return cls(
            bind=env.get("RANFORGE_BIND", DEFAULT_BIND),
            data_dir=env.get("RANFORGE_DATA_DIR", DEFAULT_DATA_DIR),
            inventory=env.get("RANFORGE_INVENTORY") or None,
        )

    def with_file(self, path: str | os.PathLike) -> "ServiceConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read service config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigInvalid(f"service config {path} must be a mapping")
        unknown = set(doc) - {"bind", "data_dir", "inventory", "scheduler"}
        if unknown:
            raise ConfigInvalid(f"unknown service config keys: {', '.join(sorted(unknown))}")
        return replace(self, **{k: (bool(v) if k == "scheduler" else str(v)) for k, v in doc.items()})

    @classmethod
    def load(cls, path: Optional[str] = None, env: Optional[Mapping[str, str]] = None) -> "ServiceConfig":
        cfg = cls.from_env(env)
        return (cfg.with_file(path) if path else cfg).validate()


class ServiceHandle:
    """A live service; :meth:`stop` drains in-flight requests before returning."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, sock: socket.socket,
                 testbed: Testbed, scheduler=None):
        self._server = server
        self._thread = thread
        self._sock = sock
        self.testbed = testbed
        self.scheduler = scheduler
        host, port = sock.getsockname()[:2]
        self.url = f"http://{host}:{port}"

    def wait_ready(self, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                raise BindFailure("service did not start")
            time.sleep(0.01)

    def stop(self, timeout: float = 10.0) -> None:
        if self.scheduler is not None:
            self.scheduler.stop()
        self._server.should_exit = True
        self._thread.join(timeout)
        self._sock.close()
        self.testbed.close()

    def join(self) -> None:
        self._thread.join()


def bind_socket(host: str, port: int) -> socket.socket:
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    sock.listen(128)
    sock.set_inheritable(True)
    return sock


def serve(config: ServiceConfig, testbed: Optional[Testbed] = None, block: bool = False) -> ServiceHandle:
    config.validate()
    host, port = config.host_port
    sock = bind_socket(host, port)
    tb = testbed or Testbed(config.data_dir, config.inventory)
    app = create_app(tb)
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off", timeout_graceful_shutdown=5))
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True, name="gateway")
    thread.start()
    sched = None
    if config.scheduler:
        sched = tb.scheduler()
        sched.start()
    handle = ServiceHandle(server, thread, sock, tb, sched)
    handle.wait_ready()
    if block:
        try:
            handle.join()
        except KeyboardInterrupt:
            handle.stop()
    return handle
