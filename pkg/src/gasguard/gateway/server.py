"""Network front end for the telemetry store.

* ingest: TCP, one wire frame per line, replies ``ACK <seq>`` or ``ERR <reason>``
* HTTP: ``GET /``, ``/devices``, ``/latest/<device>``, ``/alarms/<device>?from=&to=``
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import socket
import socketserver
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, unquote, urlsplit

from gasguard.errors import ConfigurationError, UsageError
from gasguard.gateway.page import render_status_page
from gasguard.gateway.store import (
    DuplicateRejected,
    IngestError,
    NotFound,
    TelemetryStore,
    query_alarm_episodes,
    recover,
)
from gasguard.gateway.wire import MAX_FRAME, FrameError, decode_frame, encode_frame

log = logging.getLogger(__name__)

LOG_PATH_ENV = "GASGW_LOG_PATH"


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigurationError(f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


@dataclass(frozen=True)
class GatewayConfig:
    ingest_addr: tuple[str, int] = ("127.0.0.1", 7070)
    http_addr: tuple[str, int] = ("127.0.0.1", 8080)
    log_path: Optional[str] = None

    @classmethod
    def load(cls, path: Optional[str] = None, env=os.environ) -> "GatewayConfig":
        """INI file with a ``[gateway]`` section (ingest, http, log_path); env wins for the log path."""
        kw = {}
        if path is not None:
            cp = configparser.ConfigParser()
            if not cp.read(path):
                raise ConfigurationError(f"cannot read config {path}")
            sec = cp["gateway"] if cp.has_section("gateway") else {}
            if "ingest" in sec:
                kw["ingest_addr"] = parse_addr(sec["ingest"])
            if "http" in sec:
                kw["http_addr"] = parse_addr(sec["http"])
            if "log_path" in sec:
                kw["log_path"] = sec["log_path"]
        if env.get(LOG_PATH_ENV):
            kw["log_path"] = env[LOG_PATH_ENV]
        return cls(**kw)


def handle_frame(store: TelemetryStore, line: bytes) -> bytes:
    """Process one ingest line and return the reply line.

    Replays of an already-stored seq are acked: the record is durable, and the
    sender's retry loop must terminate.
    """
    try:
        record = decode_frame(line)
    except FrameError as e:
        return f"ERR {e.reason}\n".encode()
    try:
        result = store.ingest(record)
    except IngestError:
        log.exception("ingest failed")
        return b"ERR storage\n"
    if isinstance(result, DuplicateRejected):
        log.debug("duplicate %s seq=%d (last %d)", result.device_id, result.seq, result.last_seq)
    return b"ACK %d\n" % record.seq


class InProcessLink:
    """Modem data link that calls the gateway directly, no sockets."""

    def __init__(self, store: TelemetryStore):
        self.store = store
        self.closed = False

    def send(self, frame: bytes) -> bytes:
        if self.closed:
            raise ConnectionError("link closed")
        return handle_frame(self.store, frame)

    def close(self) -> None:
        self.closed = True


class SocketLink:
    """Modem data link over the real ingest socket."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def send(self, frame: bytes) -> bytes:
        self._sock.sendall(frame)
        reply = self._rfile.readline()
        if not reply:
            raise ConnectionError("gateway closed the connection")
        return reply

    def close(self) -> None:
        self._rfile.close()
        self._sock.close()


class _IngestHandler(socketserver.StreamRequestHandler):
    def handle(self):
        store: TelemetryStore = self.server.store
        while True:
            line = self.rfile.readline(MAX_FRAME + 1)
            if not line:
                return
            if not line.endswith(b"\n"):
                if len(line) <= MAX_FRAME:
                    return  # peer closed mid-frame
                while line and not line.endswith(b"\n"):
                    line = self.rfile.readline(MAX_FRAME + 1)
                self.wfile.write(b"ERR size\n")
                continue
            self.wfile.write(handle_frame(store, line))


class _IngestServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, store):
        self.store = store
        super().__init__(addr, _IngestHandler)


class _HttpHandler(BaseHTTPRequestHandler):
    server_version = "gasguard"

    def log_message(self, fmt, *args):
        log.debug("http: " + fmt, *args)

    def _send(self, status: int, body: str, ctype: str = "application/json") -> None:
        data = body.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", f"{ctype}; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        store: TelemetryStore = self.server.store
        url = urlsplit(self.path)
        parts = [unquote(p) for p in url.path.split("/") if p]
        try:
            if not parts:
                self._send(200, render_status_page(store), "text/html")
            elif parts == ["devices"]:
                self._send(200, json.dumps(store.devices()))
            elif len(parts) == 2 and parts[0] == "latest":
                self._send(200, encode_frame(store.latest(parts[1])).decode())
            elif len(parts) == 2 and parts[0] == "alarms":
                q = parse_qs(url.query)
                lo = int(q.get("from", ["0"])[0])
                hi = int(q.get("to", [str(2**63 - 1)])[0])
                eps = query_alarm_episodes(store, parts[1], lo, hi)
                self._send(200, json.dumps([e.to_dict() for e in eps]))
            else:
                self._send(404, json.dumps({"error": "not found"}))
        except NotFound as e:
            self._send(404, json.dumps({"error": f"unknown device {e}"}))
        except (UsageError, ValueError) as e:
            self._send(400, json.dumps({"error": str(e)}))


class _HttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, store):
        self.store = store
        super().__init__(addr, _HttpHandler)


class GatewayServer:
    """Ingest socket plus HTTP query server around one store, each on its own thread.

    Port 0 picks a free port; read the bound addresses back from
    ``ingest_addr`` / ``http_addr`` after ``start()``.
    """

    def __init__(self, config: GatewayConfig = GatewayConfig(), store: Optional[TelemetryStore] = None):
        if store is None:
            store = recover(config.log_path) if config.log_path else TelemetryStore()
        self.store = store
        self.config = config
        self._ingest = _IngestServer(config.ingest_addr, store)
        self._http = _HttpServer(config.http_addr, store)
        self._threads: list[threading.Thread] = []

    @property
    def ingest_addr(self) -> tuple[str, int]:
        return self._ingest.server_address[:2]

    @property
    def http_addr(self) -> tuple[str, int]:
        return self._http.server_address[:2]

    def start(self) -> "GatewayServer":
        for srv in (self._ingest, self._http):
            t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def serve_forever(self) -> None:
        self.start()
        for t in self._threads:
            t.join()

    def stop(self) -> None:
        for srv in (self._ingest, self._http):
            srv.shutdown()
            srv.server_close()
        self.store.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
