"""Chunked-telemetry assembly: the server-side heart of data collection.

Envelopes arrive in any order, possibly duplicated, possibly racing
each other from retrying clients.  This module turns that stream into
per-session state and per-trial reconstructed payloads with three
guarantees:

* Per-session serialization: every envelope for a session is applied
  under that session's lock, so event order is ingestion order and
  buffer merges never interleave.
* Idempotence: an exact duplicate envelope (same canonical bytes) is
  acknowledged but changes nothing; a chunk seq resent with different
  bytes is a 409-style ConflictError.
* Durability: the moment a trial reconstructs and its checksum
  verifies, the raw payload and its rendered CSV are written to
  storage (exactly once).  Exports serve those stored bytes, so a
  service restarted over the same storage returns byte-identical
  exports.

Session lifecycle: Onboarding -> InTrial -> Offboarding -> Completed,
with Failed and Abandoned reachable from any non-terminal state.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
import time
from dataclasses import dataclass, field

from exac import _kernels
from exac.errors import (
    ConflictError,
    IncompleteError,
    NotReadyError,
    UnknownSessionError,
)
from exac.protocol import (
    WireEnvelope,
    chunk_data,
    compute_checksum,
    encode_envelope,
)

SESSION_STATES = ("Onboarding", "InTrial", "Offboarding", "Completed", "Failed", "Abandoned")
TERMINAL_STATES = frozenset({"Completed", "Failed", "Abandoned"})

BUFFER_OPEN = "Open"
BUFFER_RECONSTRUCTED = "Reconstructed"
BUFFER_MISMATCH = "ChecksumMismatch"

# Event names the state machine recognizes; everything else is recorded only.
_EVENT_TRANSITIONS = {
    "onboarding_fail": ("Onboarding",),  # -> Failed
    "trial_start": ("Onboarding", "InTrial"),  # -> InTrial
    "session_complete": ("Onboarding", "InTrial"),  # -> Offboarding
}

TRIAL_CSV_HEADER = b"session_id,participant_id,treatment,trial,t,x,y,z,yaw,pitch\n"
EVENTS_CSV_HEADER = "session_id,ts_ms,name,data_json\n"


@dataclass
class MismatchReport:
    expected_crc32: str | None = None
    actual_crc32: str | None = None
    missing: list = field(default_factory=list)


@dataclass
class TrialBuffer:
    """Reassembly state for one (session, trial) stream."""

    header: dict | None = None
    chunks: dict = field(default_factory=dict)
    chunk_count: int | None = None
    declared_crc32: str | None = None
    status: str = BUFFER_OPEN
    bytes_buffered: int = 0

    def add_header(self, payload: dict) -> None:
        if self.header is None:
            self.header = dict(payload)
        elif self.header != payload:
            raise ConflictError("header resent with different payload")

    def add_chunk(self, seq: int, data: bytes) -> int:
        added = _kernels.merge_pairs(self.chunks, [(seq, data)])
        self.bytes_buffered += added
        return added

    def add_tail(self, chunk_count: int, crc32: str) -> None:
        if self.chunk_count is None:
            self.chunk_count = chunk_count
            self.declared_crc32 = crc32
        elif (self.chunk_count, self.declared_crc32) != (chunk_count, crc32):
            raise ConflictError("tail resent with different payload")

    def missing(self) -> list:
        if self.chunk_count is None:
            return []
        return _kernels.missing_seqs(self.chunks, self.chunk_count)

    def complete(self) -> bool:
        return self.chunk_count is not None and not self.missing()


def try_reconstruct(buffer: TrialBuffer):
    """Join a complete buffer and verify its CRC.

    Returns the payload bytes on success or a MismatchReport when the
    checksum disagrees.  Raises IncompleteError before the tail arrives
    or while chunks are missing (the report of *what* is missing is in
    the exception-free path via buffer.missing()).
    """
    if buffer.chunk_count is None:
        raise IncompleteError("tail has not arrived; chunk count unknown")
    gaps = buffer.missing()
    if gaps:
        raise IncompleteError(f"missing {len(gaps)} chunk(s), first {gaps[0]}")
    payload = _kernels.join_chunks(buffer.chunks, buffer.chunk_count)
    actual = compute_checksum(payload).hex
    if actual != buffer.declared_crc32:
        return MismatchReport(expected_crc32=buffer.declared_crc32, actual_crc32=actual, missing=[])
    return payload


@dataclass
class SessionRecord:
    session_id: str
    participant_id: str = ""
    treatment: str = ""
    state: str = "Onboarding"
    os: str = ""
    browser: str = ""
    capable: bool = False
    events: list = field(default_factory=list)  # (ts_ms, name, data)
    trials: dict = field(default_factory=dict)  # trial -> TrialBuffer
    created_ts_ms: int | None = None
    updated_ts_ms: int | None = None
    last_seen_wall_ms: int = 0
    last_code: str = ""
    completed_ts_ms: int = 0
    seen_digests: set = field(default_factory=set)

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "participant_id": self.participant_id,
            "treatment": self.treatment,
            "state": self.state,
            "os": self.os,
            "browser": self.browser,
            "capable": self.capable,
            "created_ts_ms": 0 if self.created_ts_ms is None else self.created_ts_ms,
            "updated_ts_ms": 0 if self.updated_ts_ms is None else self.updated_ts_ms,
            "trials_total": len(self.trials),
            "trials_reconstructed": sum(
                1 for b in self.trials.values() if b.status == BUFFER_RECONSTRUCTED
            ),
            "last_code": self.last_code,
            "events": len(self.events),
        }


@dataclass
class IngestAck:
    accepted: bool
    session_state: str
    trial_status: str | None = None
    duplicate: bool = False

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "session_state": self.session_state,
            "trial_status": self.trial_status,
            "duplicate": self.duplicate,
        }


def _now_ms() -> int:
    return int(time.time() * 1000)


class AssemblyService:
    """Ingests wire envelopes and owns all session state.

    `storage` receives reconstructed artifacts under `sessions/{id}/`.
    With `require_registration` unset (the default) unknown session ids
    auto-register on first contact: all raw data is kept, even from
    sessions nobody expected.
    """

    def __init__(self, storage, *, require_registration: bool = False,
                 idle_timeout_ms: int = 3_600_000, clock=_now_ms):
        self._storage = storage
        self._require_registration = require_registration
        self._idle_timeout_ms = idle_timeout_ms
        self._clock = clock
        self._meta = threading.Lock()
        self._stats = threading.Lock()
        self._sessions: dict[str, SessionRecord] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._started_monotonic = time.monotonic()
        self._trials_reconstructed = 0
        self._bytes_ingested = 0
        self._envelopes_accepted = 0

    def _count(self, *, envelopes: int = 0, bytes_added: int = 0, trials: int = 0) -> None:
        with self._stats:
            self._envelopes_accepted += envelopes
            self._bytes_ingested += bytes_added
            self._trials_reconstructed += trials

    # -- session registry -------------------------------------------------

    def register_session(self, session_id: str) -> SessionRecord:
        with self._meta:
            return self._ensure_session(session_id)

    def _ensure_session(self, session_id: str) -> SessionRecord:
        rec = self._sessions.get(session_id)
        if rec is None:
            rec = SessionRecord(session_id=session_id)
            self._sessions[session_id] = rec
            self._locks[session_id] = threading.Lock()
        return rec

    def _session_and_lock(self, session_id: str, *, create: bool):
        with self._meta:
            rec = self._sessions.get(session_id)
            if rec is None:
                if not create or self._require_registration:
                    raise UnknownSessionError(f"unknown session {session_id!r}")
                rec = self._ensure_session(session_id)
            return rec, self._locks[session_id]

    def get_session(self, session_id: str) -> SessionRecord | None:
        with self._meta:
            return self._sessions.get(session_id)

    # -- ingestion ---------------------------------------------------------

    def ingest_envelope(self, e: WireEnvelope) -> IngestAck:
        rec, lock = self._session_and_lock(e.session, create=True)
        raw = encode_envelope(e)
        digest = hashlib.sha256(raw).digest()
        with lock:
            rec.last_seen_wall_ms = self._clock()
            # min/max over envelope timestamps: session duration must not
            # depend on arrival order.
            if rec.created_ts_ms is None or e.ts_ms < rec.created_ts_ms:
                rec.created_ts_ms = e.ts_ms
            if rec.updated_ts_ms is None or e.ts_ms > rec.updated_ts_ms:
                rec.updated_ts_ms = e.ts_ms
            if digest in rec.seen_digests:
                status = None
                if e.kind in ("header", "chunk", "tail"):
                    buf = rec.trials.get(e.trial)
                    status = buf.status if buf else None
                return IngestAck(accepted=True, session_state=rec.state,
                                 trial_status=status, duplicate=True)
            if e.kind == "event":
                self._apply_event(rec, e)
                rec.seen_digests.add(digest)
                return IngestAck(accepted=True, session_state=rec.state)
            buf = rec.trials.get(e.trial)
            if buf is None:
                buf = rec.trials[e.trial] = TrialBuffer()
            added = 0
            if e.kind == "header":
                buf.add_header(e.payload)
            elif e.kind == "chunk":
                added = buf.add_chunk(e.seq, chunk_data(e))
            else:  # tail
                buf.add_tail(e.payload["chunk_count"], e.payload["crc32"])
            rec.seen_digests.add(digest)
            self._count(envelopes=1, bytes_added=added)
            if buf.status == BUFFER_OPEN and buf.complete():
                self._finish_trial(rec, e.trial, buf)
            return IngestAck(accepted=True, session_state=rec.state, trial_status=buf.status)

    def _apply_event(self, rec: SessionRecord, e: WireEnvelope) -> None:
        name = e.payload["name"]
        data = e.payload["data"]
        rec.events.append((e.ts_ms, name, data))
        self._count(envelopes=1)
        if name == "consent_given":
            rec.participant_id = str(data.get("participant_id", rec.participant_id))
            rec.treatment = str(data.get("treatment", rec.treatment))
        elif name == "onboarding_pass":
            rec.os = str(data.get("os", rec.os))
            rec.browser = str(data.get("browser", rec.browser))
            rec.capable = True
        elif name == "onboarding_fail":
            rec.os = str(data.get("os", rec.os))
            rec.browser = str(data.get("browser", rec.browser))
            if rec.state not in TERMINAL_STATES:
                self._transition(rec, "Failed")
        elif name == "trial_start":
            if rec.state in _EVENT_TRANSITIONS["trial_start"]:
                rec.state = "InTrial"
        elif name == "session_complete":
            if rec.state in _EVENT_TRANSITIONS["session_complete"]:
                rec.state = "Offboarding"
        # unrecognized names: recorded, no state change

    def _transition(self, rec: SessionRecord, state: str) -> None:
        rec.state = state
        if state in TERMINAL_STATES:
            self._persist_events(rec)

    def _finish_trial(self, rec: SessionRecord, trial: int, buf: TrialBuffer) -> None:
        result = try_reconstruct(buf)
        if isinstance(result, MismatchReport):
            buf.status = BUFFER_MISMATCH
            return
        buf.status = BUFFER_RECONSTRUCTED
        self._count(trials=1)
        sid = rec.session_id
        self._storage.put(f"sessions/{sid}/trial_{trial}.raw", result)
        self._storage.put(f"sessions/{sid}/trial_{trial}.csv", self._render_trial_csv(rec, trial, result))

    # -- rendering ---------------------------------------------------------

    @staticmethod
    def _csv_cell(value: str) -> str:
        if any(c in value for c in ",\"\r\n"):
            return '"' + value.replace('"', '""') + '"'
        return value

    def _render_trial_csv(self, rec: SessionRecord, trial: int, payload: bytes) -> bytes:
        prefix = ",".join(
            self._csv_cell(v) for v in (rec.session_id, rec.participant_id, rec.treatment, str(trial))
        ).encode("utf-8") + b","
        lines = payload.split(b"\n")
        body = b"".join([prefix + line + b"\n" for line in lines if line])
        return TRIAL_CSV_HEADER + body

    def _render_events_csv(self, rec: SessionRecord) -> bytes:
        out = io.StringIO()
        out.write(EVENTS_CSV_HEADER)
        w = csv.writer(out, lineterminator="\n")
        for ts_ms, name, data in rec.events:
            w.writerow([rec.session_id, ts_ms, name, json.dumps(data, sort_keys=True, separators=(",", ":"))])
        return out.getvalue().encode("utf-8")

    def _persist_events(self, rec: SessionRecord) -> None:
        self._storage.put(f"sessions/{rec.session_id}/events.csv", self._render_events_csv(rec))

    # -- exports -----------------------------------------------------------

    def export_trial_csv(self, session_id: str, trial: int) -> bytes:
        try:
            return self._storage.get(f"sessions/{session_id}/trial_{trial}.csv")
        except KeyError:
            pass
        rec = self.get_session(session_id)
        if rec is None:
            raise UnknownSessionError(f"unknown session {session_id!r}")
        buf = rec.trials.get(trial)
        if buf is None:
            raise NotReadyError(f"session {session_id!r} trial {trial} has no data yet")
        raise NotReadyError(f"session {session_id!r} trial {trial} is {buf.status}")

    def export_events_csv(self, session_id: str) -> bytes:
        rec = self.get_session(session_id)
        if rec is not None:
            with self._locks[session_id]:
                return self._render_events_csv(rec)
        try:
            return self._storage.get(f"sessions/{session_id}/events.csv")
        except KeyError:
            raise UnknownSessionError(f"unknown session {session_id!r}") from None

    # -- completion --------------------------------------------------------

    def record_code_submission(self, session_id: str, code: str) -> None:
        rec, lock = self._session_and_lock(session_id, create=False)
        with lock:
            rec.last_code = code

    def mark_completed(self, session_id: str, code: str, *, ts_ms: int | None = None) -> None:
        """Offboarding -> Completed after a verified completion code."""
        rec, lock = self._session_and_lock(session_id, create=False)
        with lock:
            rec.last_code = code
            if rec.state == "Completed":
                return
            if rec.state not in TERMINAL_STATES:
                rec.completed_ts_ms = ts_ms if ts_ms is not None else (rec.updated_ts_ms or 0)
                self._transition(rec, "Completed")

    # -- housekeeping --------------------------------------------------------

    def sweep_abandoned(self, now_wall_ms: int | None = None) -> int:
        """Move idle non-terminal sessions to Abandoned; returns the count."""
        now = now_wall_ms if now_wall_ms is not None else self._clock()
        flipped = 0
        with self._meta:
            items = list(self._sessions.items())
        for sid, rec in items:
            with self._locks[sid]:
                if rec.state in TERMINAL_STATES:
                    continue
                if now - rec.last_seen_wall_ms > self._idle_timeout_ms:
                    self._transition(rec, "Abandoned")
                    flipped += 1
        return flipped

    # -- reporting -----------------------------------------------------------

    def service_status(self) -> dict:
        with self._meta:
            by_state = {s: 0 for s in SESSION_STATES}
            for rec in self._sessions.values():
                by_state[rec.state] += 1
            return {
                "uptime_s": round(time.monotonic() - self._started_monotonic, 3),
                "sessions_total": len(self._sessions),
                "sessions_by_state": by_state,
                "trials_reconstructed": self._trials_reconstructed,
                "bytes_ingested": self._bytes_ingested,
                "envelopes_accepted": self._envelopes_accepted,
            }

    def sessions_summary(self) -> list:
        with self._meta:
            recs = list(self._sessions.values())
        return [r.summary() for r in recs]
