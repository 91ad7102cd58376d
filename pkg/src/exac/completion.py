"""Salted challenge-response completion codes.

A session is handed a random nonce (the challenge).  The client proves
it reached the end of the experiment by deriving a short code from the
nonce, a secret salt known only to the experiment operator, and its own
session id.  The code is what a participant pastes back into the
recruitment platform, so it is short (12 chars), upper-case, and drawn
from the base32 alphabet to survive human transcription.

Derivation: SHA-256 over UTF-8 `nonce_hex:salt:session_id`, then the
first 60 bits of the digest rendered as 12 base32 characters.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import secrets
import threading
import time
from dataclasses import dataclass

from exac.errors import EmptySaltError

# RFC 4648 base32 alphabet; 5 bits per character.
ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ234567"

CODE_LENGTH = 12  # 60 bits

CompletionCode = str


@dataclass(frozen=True)
class Challenge:
    session_id: str
    nonce: str  # 16 random bytes, lowercase hex (32 chars)
    issued_ts_ms: int


def generate_challenge(session_id: str, rng: random.Random | None = None, *, now_ms: int | None = None) -> Challenge:
    """Issue a fresh challenge; `rng` only for reproducible tests."""
    if rng is None:
        nonce = secrets.token_bytes(16).hex()
    else:
        nonce = rng.getrandbits(128).to_bytes(16, "big").hex()
    if now_ms is None:
        now_ms = int(time.time() * 1000)
    return Challenge(session_id=session_id, nonce=nonce, issued_ts_ms=now_ms)


def derive_code(challenge: Challenge, salt: str) -> CompletionCode:
    """12 uppercase base32 chars from the first 60 digest bits."""
    if not salt:
        raise EmptySaltError("completion codes require a non-empty salt")
    material = f"{challenge.nonce}:{salt}:{challenge.session_id}".encode("utf-8")
    digest = hashlib.sha256(material).digest()
    bits = int.from_bytes(digest[:8], "big") >> 4  # top 60 bits
    chars = []
    for i in range(CODE_LENGTH):
        shift = 5 * (CODE_LENGTH - 1 - i)
        chars.append(ALPHABET[(bits >> shift) & 0x1F])
    return "".join(chars)


def verify_code(submitted: str, challenge: Challenge, salt: str) -> bool:
    """Case-insensitive check; never raises on participant input.

    The comparison always runs over the full expected code (constant
    shape) so timing does not leak how many characters matched.
    """
    if not isinstance(submitted, str):
        return False
    try:
        expected = derive_code(challenge, salt)
    except EmptySaltError:
        return False
    normalized = submitted.strip().upper()
    return hmac.compare_digest(expected.encode("ascii"), normalized.encode("utf-8", "replace"))


class ChallengeStore:
    """Thread-safe map session_id -> latest Challenge (reissue replaces)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_session: dict[str, Challenge] = {}

    def issue(self, session_id: str, rng: random.Random | None = None, *, now_ms: int | None = None) -> Challenge:
        ch = generate_challenge(session_id, rng, now_ms=now_ms)
        with self._lock:
            self._by_session[session_id] = ch
        return ch

    def get(self, session_id: str) -> Challenge | None:
        with self._lock:
            return self._by_session.get(session_id)
