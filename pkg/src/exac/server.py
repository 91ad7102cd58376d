"""HTTP surface for the assembly + management services.

One process serves both because a desk-scale deployment is one box:

  POST /v1/messages                         ingest a wire envelope
  GET  /v1/health                           liveness
  GET  /v1/status                           service counters
  GET  /v1/sessions                         session summaries
  GET  /v1/sessions/{id}/events.csv         event log export
  GET  /v1/sessions/{id}/trials/{k}/trajectory.csv
  POST /v1/sessions/{id}/challenge          issue a completion challenge
  POST /v1/sessions/{id}/complete           submit a completion code
  GET  /v1/mgmt/funnel                      recruitment funnel
  GET  /v1/mgmt/participants                registry records
  GET  /v1/mgmt/health                      monitor state for the dashboard
  POST /v1/mgmt/assign                      assign a treatment
  POST /v1/mgmt/sessions/{id}/verify        verify code and reward
  GET  /ui/...                              static operator dashboard

Built on the stdlib threading HTTP server: no framework, one thread per
connection, which matches the per-session locking model downstream.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import signal
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from exac.assembly import AssemblyService
from exac.completion import ChallengeStore, verify_code
from exac.errors import (
    ConflictError,
    DecodeError,
    DuplicateParticipantError,
    NotReadyError,
    UnknownSessionError,
)
from exac.management import ManagementService, Registry, compute_funnel
from exac.manifest import ExperimentManifest, parse_manifest
from exac.protocol import decode_envelope
from exac.recruitment import MockRecruitmentClient
from exac.storage import LocalDirectoryStorage, MemoryStorage

_logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 8 * 1024 * 1024


class ServiceApp:
    """Everything one deployment needs, wired together."""

    def __init__(self, manifest: ExperimentManifest, *, storage=None, registry: Registry | None = None,
                 require_registration: bool = False, assign_strategy: str = "balanced",
                 static_dir: str | None = None, seed: int | None = None):
        import random

        self.manifest = manifest
        self.storage = storage if storage is not None else MemoryStorage()
        self.assembly = AssemblyService(self.storage, require_registration=require_registration)
        self.challenges = ChallengeStore()
        self.registry = registry if registry is not None else Registry()
        self.recruitment = MockRecruitmentClient()
        self.management = ManagementService(
            manifest, self.assembly, self.challenges, self.recruitment, self.registry
        )
        self.assign_strategy = assign_strategy
        self.static_dir = static_dir
        self.rng = random.Random(seed)
        self._rng_lock = threading.Lock()

    def issue_challenge(self, session_id: str) -> dict:
        if self.assembly.get_session(session_id) is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        with self._rng_lock:
            ch = self.challenges.issue(session_id, self.rng)
        return {"session_id": ch.session_id, "nonce": ch.nonce, "issued_ts_ms": ch.issued_ts_ms}

    def complete_session(self, session_id: str, code: str) -> dict:
        rec = self.assembly.get_session(session_id)
        if rec is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        ch = self.challenges.get(session_id)
        ok = ch is not None and verify_code(code, ch, self.manifest.salt)
        if ok:
            self.assembly.mark_completed(session_id, code)
        else:
            self.assembly.record_code_submission(session_id, code)
        return {"verified": ok}

    def assign(self, participant_id: str, session_id: str = "") -> dict:
        with self._rng_lock:
            treatment = self.registry.assign_treatment(
                participant_id,
                self.manifest.treatments,
                strategy=self.assign_strategy,
                rng=self.rng,
                session_id=session_id,
            )
        return {"participant_id": participant_id, "treatment": treatment}

    def verify(self, session_id: str, code: str) -> tuple[int, dict]:
        result = self.management.verify_and_reward(session_id, code)
        if hasattr(result, "total_usd"):
            return 200, {"verified": True, "reward": result.to_json()}
        status = 404 if result.reason == "unknown_session" else 200
        return status, result.to_json()

    def mgmt_health(self) -> dict:
        status = self.assembly.service_status()
        return {
            "targets": [
                {
                    "target": "assembly_service",
                    "state": "Healthy",
                    "consecutive_failures": 0,
                    "uptime_s": status["uptime_s"],
                    "alarm": False,
                }
            ],
            "alarms_on_record": len(self.registry.alarms),
        }


_SESSION_EVENTS = re.compile(r"^/v1/sessions/([^/]+)/events\.csv$")
_SESSION_TRIAL = re.compile(r"^/v1/sessions/([^/]+)/trials/(\d+)/trajectory\.csv$")
_SESSION_CHALLENGE = re.compile(r"^/v1/sessions/([^/]+)/challenge$")
_SESSION_COMPLETE = re.compile(r"^/v1/sessions/([^/]+)/complete$")
_MGMT_VERIFY = re.compile(r"^/v1/mgmt/sessions/([^/]+)/verify$")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    app: ServiceApp = None  # set by make_server

    # -- plumbing ---------------------------------------------------------

    def log_message(self, fmt, *args):  # default writes to stderr per request
        _logger.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, code: int, body: bytes, ctype: str) -> None:
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _json(self, code: int, obj) -> None:
        self._send(code, json.dumps(obj).encode("utf-8"), "application/json")

    def _csv(self, body: bytes) -> None:
        self._send(200, body, "text/csv; charset=utf-8")

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            self._json(413, {"error": "body too large"})
            return None
        body = self.rfile.read(length)
        try:
            return json.loads(body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            self._json(400, {"error": "body is not valid JSON"})
            return None

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    # -- GET ---------------------------------------------------------------

    def do_GET(self):
        app = self.app
        path = self.path.split("?", 1)[0]
        try:
            if path == "/v1/health":
                self._json(200, {"status": "ok",
                                 "uptime_s": app.assembly.service_status()["uptime_s"]})
            elif path == "/v1/status":
                self._json(200, app.assembly.service_status())
            elif path == "/v1/sessions":
                self._json(200, {"sessions": app.assembly.sessions_summary()})
            elif m := _SESSION_EVENTS.match(path):
                self._csv(app.assembly.export_events_csv(m.group(1)))
            elif m := _SESSION_TRIAL.match(path):
                self._csv(app.assembly.export_trial_csv(m.group(1), int(m.group(2))))
            elif path == "/v1/mgmt/funnel":
                self._json(200, compute_funnel(app.assembly.sessions_summary()).to_json())
            elif path == "/v1/mgmt/participants":
                self._json(200, {"participants": app.registry.participants_summary()})
            elif path == "/v1/mgmt/health":
                self._json(200, app.mgmt_health())
            elif path == "/ui" or path.startswith("/ui/"):
                self._static(path)
            else:
                self._json(404, {"error": "no such route"})
        except UnknownSessionError as exc:
            self._json(404, {"error": str(exc)})
        except NotReadyError as exc:
            self._json(409, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001 - last-resort guard per request
            _logger.exception("GET %s failed", path)
            self._json(500, {"error": f"internal: {exc}"})

    def _static(self, path: str) -> None:
        app = self.app
        if not app.static_dir:
            self._json(404, {"error": "no static content configured"})
            return
        rel = path[len("/ui"):].lstrip("/") or "index.html"
        # keep requests inside the static dir
        base = os.path.abspath(app.static_dir)
        full = os.path.normpath(os.path.join(base, rel))
        if not full.startswith(base + os.sep) and full != base:
            self._json(404, {"error": "no such file"})
            return
        if os.path.isdir(full):
            full = os.path.join(full, "index.html")
        if not os.path.isfile(full):
            self._json(404, {"error": "no such file"})
            return
        ctype = {
            ".html": "text/html; charset=utf-8",
            ".js": "text/javascript; charset=utf-8",
            ".css": "text/css; charset=utf-8",
            ".json": "application/json",
            ".svg": "image/svg+xml",
        }.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            self._send(200, fh.read(), ctype)

    # -- POST -----------------------------------------------------------------

    def do_POST(self):
        app = self.app
        path = self.path.split("?", 1)[0]
        try:
            if path == "/v1/messages":
                length = int(self.headers.get("Content-Length") or 0)
                if length > MAX_BODY_BYTES:
                    self._json(413, {"error": "body too large"})
                    return
                body = self.rfile.read(length)
                try:
                    envelope = decode_envelope(body)
                except DecodeError as exc:
                    self._json(400, {"error": str(exc), "path": exc.path})
                    return
                try:
                    ack = app.assembly.ingest_envelope(envelope)
                except ConflictError as exc:
                    self._json(409, {"error": str(exc)})
                    return
                except UnknownSessionError as exc:
                    self._json(404, {"error": str(exc)})
                    return
                self._json(200, ack.to_json())
            elif m := _SESSION_CHALLENGE.match(path):
                # drain any request body so keep-alive connections stay aligned
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    self.rfile.read(min(length, MAX_BODY_BYTES))
                self._json(200, app.issue_challenge(m.group(1)))
            elif m := _SESSION_COMPLETE.match(path):
                obj = self._read_json()
                if obj is None:
                    return
                code = obj.get("code") if isinstance(obj, dict) else None
                if not isinstance(code, str):
                    self._json(400, {"error": "body must be {\"code\": string}"})
                    return
                self._json(200, app.complete_session(m.group(1), code))
            elif path == "/v1/mgmt/assign":
                obj = self._read_json()
                if obj is None:
                    return
                pid = obj.get("participant_id") if isinstance(obj, dict) else None
                if not isinstance(pid, str) or not pid:
                    self._json(400, {"error": "body must include participant_id"})
                    return
                try:
                    self._json(200, app.assign(pid, str(obj.get("session_id") or "")))
                except DuplicateParticipantError as exc:
                    self._json(409, {"error": str(exc)})
            elif m := _MGMT_VERIFY.match(path):
                obj = self._read_json()
                if obj is None:
                    return
                code = obj.get("code") if isinstance(obj, dict) else None
                if not isinstance(code, str):
                    self._json(400, {"error": "body must be {\"code\": string}"})
                    return
                status, payload = app.verify(m.group(1), code)
                self._json(status, payload)
            else:
                self._json(404, {"error": "no such route"})
        except UnknownSessionError as exc:
            self._json(404, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001
            _logger.exception("POST %s failed", path)
            self._json(500, {"error": f"internal: {exc}"})


def make_server(app: ServiceApp, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"app": app})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class ServerThread:
    """Run a ServiceApp on a background thread; for tests and the CLI."""

    def __init__(self, app: ServiceApp, host: str = "127.0.0.1", port: int = 0):
        self.server = make_server(app, host, port)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.stop()

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=10)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="exac-server", description=__doc__.splitlines()[0])
    parser.add_argument("--manifest", required=True, help="path to experiment.json")
    parser.add_argument("--bucket", default="", help="storage directory (memory-backed if omitted)")
    parser.add_argument("--registry", default="", help="registry journal path")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8787)
    parser.add_argument("--port-file", default="", help="write the bound port here once listening")
    parser.add_argument("--static", default="", help="directory served under /ui")
    parser.add_argument("--require-registration", action="store_true")
    parser.add_argument("--assign-strategy", default="balanced", choices=["balanced", "uniform_random"])
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    with open(args.manifest, "rb") as fh:
        manifest = parse_manifest(fh.read())
    storage = LocalDirectoryStorage(args.bucket) if args.bucket else MemoryStorage()
    registry = Registry(args.registry) if args.registry else Registry()
    # the content directory may be populated after startup (the deploy
    # step writes it once the service endpoint is known), so pass the
    # path through without requiring it to exist yet
    static_dir = os.path.abspath(args.static) if args.static else None
    app = ServiceApp(
        manifest,
        storage=storage,
        registry=registry,
        require_registration=args.require_registration,
        assign_strategy=args.assign_strategy,
        static_dir=static_dir,
        seed=args.seed,
    )
    server = make_server(app, args.host, args.port)
    port = server.server_address[1]
    if args.port_file:
        tmp = args.port_file + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(str(port))
        os.replace(tmp, args.port_file)
    _logger.info("listening on http://%s:%s (bucket=%s)", args.host, port, args.bucket or "<memory>")

    stop = threading.Event()

    def _graceful(_sig, _frm):
        stop.set()
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _graceful)
    signal.signal(signal.SIGINT, _graceful)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
