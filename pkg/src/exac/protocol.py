"""Wire protocol: envelopes, chunking, checksums, trajectory codec.

A trial's telemetry travels as one `header`, a run of `chunk` messages
with consecutive sequence numbers starting at 0, and one `tail` that
declares the chunk count and a CRC-32 of the whole payload.  Session
lifecycle markers travel as `event` messages.  All envelopes are strict
JSON objects: unknown fields are rejected, not ignored, so a client and
a service can never silently disagree about what was said.

The trajectory payload itself is line-oriented text, six fields per
line (`t,x,y,z,yaw,pitch`), each rendered with exactly six decimal
places.  The encoding is deterministic: equal sample lists produce
equal bytes, which is what makes checksums and resend deduplication
meaningful.
"""

from __future__ import annotations

import base64
import binascii
import json
import zlib
from dataclasses import dataclass, field

from exac import _kernels
from exac.errors import DecodeError, InvariantError

PROTOCOL_VERSION = 1
KINDS = ("event", "header", "chunk", "tail")
TRAJECTORY_FIELDS = ("t", "x", "y", "z", "yaw", "pitch")


@dataclass(frozen=True)
class Checksum:
    """CRC-32 (IEEE reflected polynomial, as in zlib) of a byte stream."""

    crc32: int

    def __post_init__(self):
        if not 0 <= self.crc32 <= 0xFFFFFFFF:
            raise InvariantError(f"crc32 out of range: {self.crc32}")

    @property
    def hex(self) -> str:
        """Canonical wire form: exactly 8 lowercase hex digits."""
        return f"{self.crc32:08x}"

    @classmethod
    def from_hex(cls, text: str) -> "Checksum":
        if len(text) != 8 or text != text.lower():
            raise InvariantError(f"checksum must be 8 lowercase hex digits: {text!r}")
        try:
            return cls(int(text, 16))
        except ValueError:
            raise InvariantError(f"checksum must be 8 lowercase hex digits: {text!r}") from None


def compute_checksum(data: bytes) -> Checksum:
    return Checksum(zlib.crc32(data) & 0xFFFFFFFF)


@dataclass(frozen=True)
class TrajectorySample:
    """One pose sample: seconds since trial start plus position and view angles."""

    t: float
    x: float
    y: float
    z: float
    yaw: float
    pitch: float

    def as_row(self) -> tuple[float, float, float, float, float, float]:
        return (self.t, self.x, self.y, self.z, self.yaw, self.pitch)


@dataclass
class WireEnvelope:
    """One wire message; `seq` is present exactly for kind == "chunk"."""

    v: int
    session: str
    kind: str
    trial: int
    ts_ms: int
    payload: dict = field(default_factory=dict)
    seq: int | None = None


def _check_payload(kind: str, payload, path: str) -> None:
    if not isinstance(payload, dict):
        raise DecodeError("payload must be an object", path)
    if kind == "event":
        _expect_keys(payload, {"name", "data"}, path)
        if not isinstance(payload["name"], str) or not payload["name"]:
            raise DecodeError("event name must be a non-empty string", f"{path}.name")
        if not isinstance(payload["data"], dict):
            raise DecodeError("event data must be an object", f"{path}.data")
    elif kind == "header":
        _expect_keys(payload, {"stream", "fields", "sample_hz"}, path)
        if not isinstance(payload["stream"], str) or not payload["stream"]:
            raise DecodeError("stream must be a non-empty string", f"{path}.stream")
        fields = payload["fields"]
        if not isinstance(fields, list) or not all(isinstance(f, str) for f in fields):
            raise DecodeError("fields must be a list of strings", f"{path}.fields")
        hz = payload["sample_hz"]
        if not isinstance(hz, (int, float)) or isinstance(hz, bool) or hz <= 0:
            raise DecodeError("sample_hz must be a positive number", f"{path}.sample_hz")
    elif kind == "chunk":
        _expect_keys(payload, {"b64"}, path)
        b64 = payload["b64"]
        if not isinstance(b64, str):
            raise DecodeError("b64 must be a string", f"{path}.b64")
        try:
            base64.b64decode(b64, validate=True)
        except (binascii.Error, ValueError):
            raise DecodeError("b64 is not valid base64", f"{path}.b64") from None
    elif kind == "tail":
        _expect_keys(payload, {"chunk_count", "crc32"}, path)
        count = payload["chunk_count"]
        if not isinstance(count, int) or isinstance(count, bool) or count < 0:
            raise DecodeError("chunk_count must be an integer >= 0", f"{path}.chunk_count")
        crc = payload["crc32"]
        if not isinstance(crc, str):
            raise DecodeError("crc32 must be a string", f"{path}.crc32")
        try:
            Checksum.from_hex(crc)
        except InvariantError:
            raise DecodeError("crc32 must be 8 lowercase hex digits", f"{path}.crc32") from None


def _expect_keys(obj: dict, keys: set, path: str) -> None:
    for k in obj:
        if k not in keys:
            raise DecodeError("unknown field", f"{path}.{k}")
    for k in keys:
        if k not in obj:
            raise DecodeError(f"missing field {k!r}", path)


def validate_envelope(e: WireEnvelope) -> None:
    """Raise DecodeError (with a field path) if `e` violates the schema."""
    if e.v != PROTOCOL_VERSION:
        raise DecodeError(f"unsupported version {e.v!r}", "v")
    if not isinstance(e.session, str) or not e.session:
        raise DecodeError("session must be a non-empty string", "session")
    if e.kind not in KINDS:
        raise DecodeError(f"unknown kind {e.kind!r}", "kind")
    if not isinstance(e.trial, int) or isinstance(e.trial, bool) or e.trial < 0:
        raise DecodeError("trial must be an integer >= 0", "trial")
    if not isinstance(e.ts_ms, int) or isinstance(e.ts_ms, bool) or e.ts_ms < 0:
        raise DecodeError("ts_ms must be an integer >= 0", "ts_ms")
    if e.kind == "chunk":
        if not isinstance(e.seq, int) or isinstance(e.seq, bool) or e.seq < 0:
            raise DecodeError("chunk requires seq >= 0", "seq")
    elif e.seq is not None:
        raise DecodeError(f"seq is only valid for chunks, not {e.kind!r}", "seq")
    _check_payload(e.kind, e.payload, "payload")


def encode_envelope(e: WireEnvelope) -> bytes:
    """Canonical JSON bytes: sorted keys, no whitespace.  Injective."""
    validate_envelope(e)
    obj = {
        "v": e.v,
        "session": e.session,
        "kind": e.kind,
        "trial": e.trial,
        "ts_ms": e.ts_ms,
        "payload": e.payload,
    }
    if e.kind == "chunk":
        obj["seq"] = e.seq
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


_TOP_KEYS = {"v", "session", "kind", "trial", "ts_ms", "payload"}


def decode_envelope(data: bytes | str | dict) -> WireEnvelope:
    """Parse and validate a wire message; DecodeError names the bad field."""
    if isinstance(data, dict):
        obj = data
    else:
        try:
            obj = json.loads(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DecodeError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise DecodeError("envelope must be a JSON object")
    kind = obj.get("kind")
    allowed = _TOP_KEYS | ({"seq"} if kind == "chunk" else set())
    for k in obj:
        if k not in allowed:
            raise DecodeError("unknown field", k)
    for k in _TOP_KEYS:
        if k not in obj:
            raise DecodeError(f"missing field {k!r}")
    e = WireEnvelope(
        v=obj["v"],
        session=obj["session"],
        kind=obj["kind"],
        trial=obj["trial"],
        ts_ms=obj["ts_ms"],
        payload=obj["payload"],
        seq=obj.get("seq"),
    )
    validate_envelope(e)
    return e


def event_envelope(session: str, name: str, data: dict, *, ts_ms: int, trial: int = 0) -> WireEnvelope:
    return WireEnvelope(
        v=PROTOCOL_VERSION,
        session=session,
        kind="event",
        trial=trial,
        ts_ms=ts_ms,
        payload={"name": name, "data": data},
    )


def chunk_data(e: WireEnvelope) -> bytes:
    """Decoded bytes carried by a chunk envelope."""
    if e.kind != "chunk":
        raise InvariantError(f"not a chunk envelope: {e.kind}")
    return base64.b64decode(e.payload["b64"])


def chunk_payload(
    payload: bytes,
    chunk_size: int,
    *,
    session: str = "",
    trial: int = 0,
    ts_ms: int = 0,
    sample_hz: float = 50.0,
) -> tuple[WireEnvelope, list[WireEnvelope], WireEnvelope]:
    """Split `payload` into (header, chunks, tail) envelopes.

    Every chunk except possibly the last is exactly `chunk_size` bytes;
    sequence numbers are consecutive from 0.  The tail carries the chunk
    count (ceil(len/chunk_size), 0 for an empty payload) and the CRC-32
    of the unsplit payload.
    """
    if chunk_size < 1:
        raise InvariantError(f"chunk_size must be >= 1, got {chunk_size}")
    pieces = _kernels.split_chunks(payload, chunk_size)
    header = WireEnvelope(
        v=PROTOCOL_VERSION,
        session=session,
        kind="header",
        trial=trial,
        ts_ms=ts_ms,
        payload={
            "stream": "trajectory",
            "fields": list(TRAJECTORY_FIELDS),
            "sample_hz": float(sample_hz),
        },
    )
    chunks = [
        WireEnvelope(
            v=PROTOCOL_VERSION,
            session=session,
            kind="chunk",
            trial=trial,
            ts_ms=ts_ms,
            payload={"b64": base64.b64encode(piece).decode("ascii")},
            seq=i,
        )
        for i, piece in enumerate(pieces)
    ]
    tail = WireEnvelope(
        v=PROTOCOL_VERSION,
        session=session,
        kind="tail",
        trial=trial,
        ts_ms=ts_ms,
        payload={"chunk_count": len(pieces), "crc32": compute_checksum(payload).hex},
    )
    return header, chunks, tail


def encode_trajectory(samples) -> bytes:
    """Canonical bytes for a sample list; validates ordering and angle ranges."""
    rows = []
    last_t = None
    for i, s in enumerate(samples):
        row = s.as_row() if isinstance(s, TrajectorySample) else tuple(s)
        if len(row) != 6:
            raise InvariantError(f"sample {i}: expected 6 fields")
        t, _, _, _, yaw, pitch = row
        if t < 0:
            raise InvariantError(f"sample {i}: t must be >= 0")
        if last_t is not None and t < last_t:
            raise InvariantError(f"sample {i}: t decreased ({t} < {last_t})")
        if not -180.0 <= yaw < 180.0:
            raise InvariantError(f"sample {i}: yaw {yaw} outside [-180, 180)")
        if not -90.0 <= pitch <= 90.0:
            raise InvariantError(f"sample {i}: pitch {pitch} outside [-90, 90]")
        last_t = t
        rows.append(row)
    return _kernels.encode_samples(rows)


def decode_trajectory(data: bytes) -> list[TrajectorySample]:
    try:
        rows = _kernels.decode_samples(data)
    except ValueError as exc:
        raise DecodeError(str(exc)) from None
    return [TrajectorySample(*row) for row in rows]
