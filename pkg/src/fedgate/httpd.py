"""Loopback HTTP plumbing: a threaded server with fault switches and a tiny client."""

from __future__ import annotations

import http.client
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from .errors import Unreachable

log = logging.getLogger(__name__)


@dataclass
class Response:
    status: int = 200
    body: bytes = b""
    content_type: str = "application/xml; charset=utf-8"
    headers: dict = field(default_factory=dict)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, format, *args):
        log.debug("%s %s", self.address_string(), format % args)

    def _dispatch(self):
        server = self.server.owner
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        fault = server.fault
        if fault == "hang":
            server.release.wait(server.hang_seconds)
            self.close_connection = True
            return
        if fault == "error500":
            resp = Response(500, b"injected failure\n", "text/plain")
        else:
            parts = urlsplit(self.path)
            try:
                resp = server.app(self.command, parts.path, parts.query, body)
            except Exception:
                log.exception("handler crashed for %s", self.path)
                resp = Response(500, b"internal error\n", "text/plain")
        try:
            self.send_response(resp.status)
            self.send_header("Content-Type", resp.content_type)
            self.send_header("Content-Length", str(len(resp.body)))
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(resp.body)
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True

    do_GET = do_POST = do_PUT = do_HEAD = do_DELETE = _dispatch


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


class Server:
    """Serve ``app(method, path, query, body) -> Response`` on a loopback port.

    ``fault`` switches the server into a failure mode without stopping it:
    ``"hang"`` never answers, ``"error500"`` answers every request with 500.
    """

    def __init__(self, app, host="127.0.0.1", port=0, name="server"):
        self.app = app
        self.host = host
        self.port = port
        self.name = name
        self.fault = None
        self.hang_seconds = 300.0
        self.release = threading.Event()
        self._httpd = None
        self._thread = None

    @property
    def running(self) -> bool:
        return self._httpd is not None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self):
        if self._httpd is not None:
            return self
        self.release.clear()
        self._httpd = _Server((self.host, self.port), _Handler)
        self._httpd.owner = self
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(target=self._httpd.serve_forever, args=(0.05,), name=f"{self.name}:{self.port}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._httpd is None:
            return
        self.release.set()
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
        self._httpd = None
        self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def fetch(url: str, timeout: float = 5.0, method: str = "GET", body: bytes | None = None, headers=None):
    """Issue one request; returns (status, content_type, body).

    Non-2xx statuses are returned, not raised. Refused connections and
    timeouts raise :class:`Unreachable`.
    """
    req = urllib.request.Request(url, data=body, method=method, headers=headers or {})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as r:
            return r.status, r.headers.get("Content-Type", ""), r.read()
    except urllib.error.HTTPError as e:
        try:
            data = e.read()
        except (OSError, http.client.HTTPException):
            data = b""
        return e.code, e.headers.get("Content-Type", "") if e.headers else "", data
    except urllib.error.URLError as e:
        raise Unreachable(url, str(e.reason)) from None
    except TimeoutError:
        raise Unreachable(url, f"timed out after {timeout}s") from None
    except (OSError, http.client.HTTPException) as e:
        raise Unreachable(url, str(e) or type(e).__name__) from None
