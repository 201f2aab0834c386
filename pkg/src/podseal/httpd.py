"""Minimal threaded JSON-over-HTTP plumbing shared by the services.

Every service (registrar, agent, verifier, simulator control) is a small set
of routes on a ThreadingHTTPServer. Authentication is a per-cluster
shared-secret bearer token; quotes remain self-authenticating, the token only
gates the API surface.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

logger = logging.getLogger(__name__)


class HttpError(Exception):
    def __init__(self, status: int, message: str, **extra):
        self.status = status
        self.body = {"error": message, **extra}
        super().__init__(message)


class JsonHttpServer:
    """Route table plus server lifecycle. Routes are (method, path regex,
    handler); handlers get (path groups dict, query dict, json body) and
    return (status, body dict)."""

    def __init__(self, name: str, token: str | None = None, host: str = "127.0.0.1", port: int = 0):
        self.name = name
        self.token = token
        self.host = host
        self.port = port
        self._routes: list[tuple[str, re.Pattern, object, bool]] = []
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def add(self, method: str, pattern: str, handler, auth: bool | str = True):
        """auth: True = service token, False = open, a string = that token
        (e.g. an admin credential for destructive routes)."""
        self._routes.append((method, re.compile(pattern + r"$"), handler, auth))

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self):
        service = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                logger.debug("%s %s", service.name, fmt % args)

            def _dispatch(self, method):
                parsed = urlparse(self.path)
                query = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
                try:
                    # drain the body up front so keep-alive connections stay
                    # usable even when this request ends in a 401/404
                    raw = self._read_raw_body()
                except ValueError:
                    return self._reply(400, {"error": "bad Content-Length"})
                for route_method, pattern, fn, auth in service._routes:
                    if route_method != method:
                        continue
                    match = pattern.match(parsed.path)
                    if not match:
                        continue
                    required = service.token if auth is True else (auth or None)
                    if required is not None and not self._authorized(required):
                        return self._reply(401, {"error": "missing or bad bearer token"})
                    try:
                        status, payload = fn(match.groupdict(), query, self._parse_body(raw))
                    except HttpError as exc:
                        return self._reply(exc.status, exc.body)
                    except Exception:
                        logger.exception("%s: unhandled error on %s %s", service.name, method, self.path)
                        return self._reply(500, {"error": "internal error"})
                    return self._reply(status, payload)
                self._reply(404, {"error": f"no route for {method} {parsed.path}"})

            def _authorized(self, required: str) -> bool:
                header = self.headers.get("Authorization", "")
                return header == f"Bearer {required}"

            def _read_raw_body(self) -> bytes | None:
                length = int(self.headers.get("Content-Length") or 0)
                return self.rfile.read(length) if length else None

            @staticmethod
            def _parse_body(raw: bytes | None):
                if not raw:
                    return None
                try:
                    return json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise HttpError(400, f"request body is not valid JSON: {exc}") from exc

            def _reply(self, status, payload):
                blob = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_DELETE(self):
                self._dispatch("DELETE")

        self._httpd = ThreadingHTTPServer((self.host, self.port), Handler)
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name=f"{self.name}-http", daemon=True
        )
        self._thread.start()
        logger.info("%s listening on %s", self.name, self.url)
        return self

    def stop(self):
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        if self._thread:
            self._thread.join(timeout=5)
            self._thread = None


def bearer_headers(token: str | None) -> dict:
    return {"Authorization": f"Bearer {token}"} if token else {}
