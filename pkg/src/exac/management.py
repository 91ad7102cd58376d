"""Experiment management: assignment, rewards, health, funnel.

The registry is an append-only JSONL journal.  Every decision that
matters for money or analysis (assignment, verification, reward, alarm,
recruitment batch) is one line; replaying the file rebuilds the exact
in-memory state, which is how a restarted operator process knows who
was already paid.  The reward path is the one place double spending
could happen, so it runs inside a per-session exclusive section and the
journal line is written only after the payment call returned.
"""

from __future__ import annotations

import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal

import requests

from exac.completion import verify_code
from exac.errors import ClientError, DuplicateParticipantError, SchemaError
from exac.recruitment import HitSpec


def _now_ms() -> int:
    return int(time.time() * 1000)


# -- reward policy ----------------------------------------------------------


@dataclass(frozen=True)
class RewardDecision:
    base_usd: Decimal
    bonus_usd: Decimal
    total_usd: Decimal
    duration_min: float

    def to_json(self) -> dict:
        return {
            "base_usd": str(self.base_usd),
            "bonus_usd": str(self.bonus_usd),
            "total_usd": str(self.total_usd),
            "duration_min": round(self.duration_min, 3),
        }


@dataclass(frozen=True)
class Rejected:
    reason: str  # "unknown_session" | "not_offboarding" | "bad_code" | "already_rewarded"

    def to_json(self) -> dict:
        return {"verified": False, "reason": self.reason}


def reward_for(manifest, duration_min: float) -> RewardDecision:
    """Base pay always; bonus exactly when the session beat the threshold."""
    bonus = manifest.reward_bonus_usd if duration_min < manifest.bonus_threshold_min else Decimal("0.00")
    return RewardDecision(
        base_usd=manifest.reward_base_usd,
        bonus_usd=bonus,
        total_usd=manifest.reward_base_usd + bonus,
        duration_min=duration_min,
    )


# -- registry ----------------------------------------------------------------


@dataclass
class ParticipantRecord:
    participant_id: str
    treatment: str = ""
    session_id: str = ""
    assigned_ts_ms: int = 0
    verified: bool = False
    reward: RewardDecision | None = None

    def to_json(self) -> dict:
        out = {
            "participant_id": self.participant_id,
            "treatment": self.treatment,
            "session_id": self.session_id,
            "assigned_ts_ms": self.assigned_ts_ms,
            "verified": self.verified,
        }
        out["reward"] = self.reward.to_json() if self.reward else None
        out["rewarded_usd"] = str(self.reward.total_usd) if self.reward else None
        return out


class Registry:
    """Append-only journal plus the state replayed from it.

    Records (one JSON object per line, `kind` discriminates):
      assign {participant_id, treatment, session_id, ts_ms}
      verify {session_id, ok, ts_ms}
      reward {session_id, participant_id, base_usd, bonus_usd, total_usd,
              duration_min, ts_ms}
      alarm  {target, ts_ms}
      hit    {batch, hit_id, ts_ms}
    """

    def __init__(self, path: str | None = None, *, clock=_now_ms):
        self._path = path
        self._clock = clock
        self._write_lock = threading.Lock()
        self._state_lock = threading.RLock()
        self._session_locks: dict[str, threading.Lock] = {}
        self.participants: dict[str, ParticipantRecord] = {}
        self.rewarded_sessions: dict[str, RewardDecision] = {}
        self.verify_log: list = []  # (session_id, ok, ts_ms)
        self.alarms: list = []  # (target, ts_ms)
        self.hits: dict[int, str] = {}  # batch -> hit_id
        if path and os.path.exists(path):
            self._replay(path)

    # -- journal -------------------------------------------------------------

    def _replay(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"registry line {ln} is not valid JSON: {exc}")
                self._apply(rec)

    def _apply(self, rec: dict) -> None:
        kind = rec.get("kind")
        if kind == "assign":
            pid = rec["participant_id"]
            self.participants[pid] = ParticipantRecord(
                participant_id=pid,
                treatment=rec["treatment"],
                session_id=rec.get("session_id", ""),
                assigned_ts_ms=rec.get("ts_ms", 0),
            )
        elif kind == "verify":
            self.verify_log.append((rec["session_id"], bool(rec["ok"]), rec.get("ts_ms", 0)))
            if rec.get("participant_id") and rec["ok"]:
                p = self._ensure_participant(rec["participant_id"])
                p.verified = True
        elif kind == "reward":
            decision = RewardDecision(
                base_usd=Decimal(rec["base_usd"]),
                bonus_usd=Decimal(rec["bonus_usd"]),
                total_usd=Decimal(rec["total_usd"]),
                duration_min=float(rec["duration_min"]),
            )
            self.rewarded_sessions[rec["session_id"]] = decision
            p = self._ensure_participant(rec["participant_id"])
            p.verified = True
            p.reward = decision
            if not p.session_id:
                p.session_id = rec["session_id"]
        elif kind == "alarm":
            self.alarms.append((rec["target"], rec.get("ts_ms", 0)))
        elif kind == "hit":
            self.hits[int(rec["batch"])] = rec["hit_id"]
        else:
            raise SchemaError(f"registry record has unknown kind {kind!r}")

    def _append(self, rec: dict) -> None:
        with self._state_lock:
            self._apply(rec)
        if self._path is None:
            return
        line = json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n"
        with self._write_lock:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def _ensure_participant(self, pid: str) -> ParticipantRecord:
        p = self.participants.get(pid)
        if p is None:
            p = self.participants[pid] = ParticipantRecord(participant_id=pid)
        return p

    # -- locks ----------------------------------------------------------------

    def session_lock(self, session_id: str) -> threading.Lock:
        with self._state_lock:
            lock = self._session_locks.get(session_id)
            if lock is None:
                lock = self._session_locks[session_id] = threading.Lock()
            return lock

    # -- assignment -------------------------------------------------------------

    def assign_treatment(self, participant_id: str, treatments, *, strategy: str = "balanced",
                         rng: random.Random | None = None, session_id: str = "") -> str:
        """Assign once per participant; balanced keeps |max-min| <= 1.

        balanced is fully deterministic (ties break in treatment-list
        order); uniform_random draws iid from `rng` (seedable).
        """
        treatments = list(treatments)
        if not treatments:
            raise ValueError("treatments must be non-empty")
        # Lock held across count, choice, and journal append so concurrent
        # balanced assignments cannot both act on stale counts.
        with self._state_lock:
            existing = self.participants.get(participant_id)
            if existing is not None and existing.treatment:
                raise DuplicateParticipantError(f"participant {participant_id!r} already assigned")
            if strategy == "balanced":
                counts = {t: 0 for t in treatments}
                for p in self.participants.values():
                    if p.treatment in counts:
                        counts[p.treatment] += 1
                choice = min(treatments, key=lambda t: counts[t])
            elif strategy == "uniform_random":
                r = rng if rng is not None else random
                choice = treatments[r.randrange(len(treatments))]
            else:
                raise ValueError(f"unknown strategy {strategy!r}")
            self._append({
                "kind": "assign",
                "participant_id": participant_id,
                "treatment": choice,
                "session_id": session_id,
                "ts_ms": self._clock(),
            })
        return choice

    def record_verify(self, session_id: str, ok: bool, participant_id: str = "") -> None:
        self._append({
            "kind": "verify",
            "session_id": session_id,
            "participant_id": participant_id,
            "ok": ok,
            "ts_ms": self._clock(),
        })

    def record_reward(self, session_id: str, participant_id: str, decision: RewardDecision) -> None:
        self._append({
            "kind": "reward",
            "session_id": session_id,
            "participant_id": participant_id,
            "base_usd": str(decision.base_usd),
            "bonus_usd": str(decision.bonus_usd),
            "total_usd": str(decision.total_usd),
            "duration_min": round(decision.duration_min, 6),
            "ts_ms": self._clock(),
        })

    def record_alarm(self, target: str, state: str = "Unreachable", consecutive_failures: int = 0) -> None:
        self._append({
            "kind": "alarm",
            "target": target,
            "state": state,
            "consecutive_failures": consecutive_failures,
            "ts_ms": self._clock(),
        })

    def record_hit(self, batch: int, hit_id: str) -> None:
        self._append({"kind": "hit", "batch": batch, "hit_id": hit_id, "ts_ms": self._clock()})

    def is_rewarded(self, session_id: str) -> bool:
        with self._state_lock:
            return session_id in self.rewarded_sessions

    def alarm_count(self) -> int:
        with self._state_lock:
            return len(self.alarms)

    def participants_summary(self) -> list:
        with self._state_lock:
            recs = list(self.participants.values())
        return [p.to_json() for p in recs]


# -- recruitment batches -------------------------------------------------------


def create_hits(spec: HitSpec, batches: int, client, registry: Registry) -> list:
    """Create `batches` recruitment batches, idempotently.

    Batches already journaled are skipped on re-run.  A platform failure
    raises ClientError naming the 1-based batch index; earlier ids are
    already durable in the registry.
    """
    if batches < 1:
        raise ValueError("batches must be >= 1")
    ids = []
    for b in range(1, batches + 1):
        existing = registry.hits.get(b)
        if existing is not None:
            ids.append(existing)
            continue
        try:
            hit_id = client.create_hit(spec)
        except ClientError as exc:
            err = ClientError(f"batch {b}: {exc}")
            err.batch = b
            raise err from exc
        registry.record_hit(b, hit_id)
        ids.append(hit_id)
    return ids


# -- verify and reward ----------------------------------------------------------


class ManagementService:
    """Operator-side actions bound to one experiment deployment."""

    def __init__(self, manifest, assembly, challenges, recruitment, registry: Registry):
        self.manifest = manifest
        self.assembly = assembly
        self.challenges = challenges
        self.recruitment = recruitment
        self.registry = registry

    def verify_and_reward(self, session_id: str, submitted_code: str):
        """Verify a completion code and pay exactly once.

        Returns RewardDecision on success, Rejected(reason) otherwise.
        The per-session lock plus the already-rewarded check make the
        payment at-most-once even under concurrent submissions; the
        reward journal line is written only after pay() returns, so a
        platform failure leaves the session retryable.
        """
        rec = self.assembly.get_session(session_id)
        if rec is None:
            return Rejected("unknown_session")
        if rec.state not in ("Offboarding", "Completed"):
            return Rejected("not_offboarding")
        with self.registry.session_lock(session_id):
            if session_id in self.registry.rewarded_sessions:
                return Rejected("already_rewarded")
            participant_id = rec.participant_id or session_id
            challenge = self.challenges.get(session_id)
            ok = challenge is not None and verify_code(submitted_code, challenge, self.manifest.salt)
            self.registry.record_verify(session_id, ok, participant_id)
            if not ok:
                return Rejected("bad_code")
            if rec.created_ts_ms is None or rec.updated_ts_ms is None:
                duration_min = 0.0
            else:
                duration_min = (rec.updated_ts_ms - rec.created_ts_ms) / 60000.0
            decision = reward_for(self.manifest, duration_min)
            self.recruitment.approve(participant_id)
            self.recruitment.pay(participant_id, decision.total_usd)
            self.registry.record_reward(session_id, participant_id, decision)
            self.assembly.mark_completed(session_id, submitted_code)
            return decision


# -- health monitoring -------------------------------------------------------------


@dataclass
class HealthStatus:
    target: str
    state: str  # "Healthy" | "Degraded" | "Unreachable"
    consecutive_failures: int
    last_ok_ts_ms: int | None = None
    alarm: bool = False  # True exactly on the tick an episode crosses the threshold

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "state": self.state,
            "consecutive_failures": self.consecutive_failures,
            "last_ok_ts_ms": self.last_ok_ts_ms,
            "alarm": self.alarm,
        }


def default_probe(target: str, timeout_s: float = 2.0) -> bool:
    try:
        resp = requests.get(target.rstrip("/") + "/v1/health", timeout=timeout_s)
        return resp.status_code == 200
    except requests.RequestException:
        return False


def poll_health(targets, *, interval_ms: int = 1000, threshold: int = 3, probe=None,
                clock=_now_ms, sleep=time.sleep, max_ticks: int | None = None,
                registry: Registry | None = None, on_alarm=None):
    """Generator of HealthStatus, one per target per tick.

    Failure counting: Healthy at 0 consecutive failures, Degraded from 1
    to threshold-1, Unreachable at >= threshold.  The alarm flag is set
    exactly once per outage episode (the tick the count reaches the
    threshold); one success resets the episode so a later outage alarms
    again.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if probe is None:
        probe = lambda t: default_probe(t, timeout_s=max(0.1, interval_ms / 1250))  # noqa: E731
    targets = list(targets)
    failures = {t: 0 for t in targets}
    last_ok = {t: None for t in targets}
    tick = 0
    while max_ticks is None or tick < max_ticks:
        for t in targets:
            ok = bool(probe(t))
            alarm = False
            if ok:
                failures[t] = 0
                last_ok[t] = clock()
                state = "Healthy"
            else:
                failures[t] += 1
                if failures[t] >= threshold:
                    state = "Unreachable"
                    if failures[t] == threshold:
                        alarm = True
                else:
                    state = "Degraded"
            status = HealthStatus(
                target=t,
                state=state,
                consecutive_failures=failures[t],
                last_ok_ts_ms=last_ok[t],
                alarm=alarm,
            )
            if alarm:
                if registry is not None:
                    registry.record_alarm(t, status.state, status.consecutive_failures)
                if on_alarm is not None:
                    on_alarm(status)
            yield status
        tick += 1
        if max_ticks is None or tick < max_ticks:
            sleep(interval_ms / 1000.0)


# -- funnel -------------------------------------------------------


@dataclass
class FunnelCell:
    accessed: int = 0
    capable: int = 0
    completed: int = 0

    def rates(self) -> dict:
        capable_rate = self.capable / self.accessed if self.accessed else 0.0
        completion_rate = self.completed / self.capable if self.capable else 0.0
        return {
            "capable_rate": round(capable_rate, 4),
            "completion_rate": round(completion_rate, 4),
        }


@dataclass
class FunnelStats:
    total: FunnelCell = field(default_factory=FunnelCell)
    cells: dict = field(default_factory=dict)  # (os, browser) -> FunnelCell

    def to_json(self) -> dict:
        return {
            "total": {"accessed": self.total.accessed, "capable": self.total.capable,
                      "completed": self.total.completed, **self.total.rates()},
            "cells": [
                {"os": os_, "browser": br, "accessed": c.accessed,
                 "capable": c.capable, "completed": c.completed, **c.rates()}
                for (os_, br), c in sorted(self.cells.items())
            ],
        }


def compute_funnel(session_summaries) -> FunnelStats:
    """accessed = every session seen; capable = passed onboarding;
    completed = reached Completed.  Cells keyed by (os, browser)."""
    stats = FunnelStats()
    for s in session_summaries:
        key = (s.get("os") or "unknown", s.get("browser") or "unknown")
        cell = stats.cells.get(key)
        if cell is None:
            cell = stats.cells[key] = FunnelCell()
        for c in (stats.total, cell):
            c.accessed += 1
            if s.get("capable"):
                c.capable += 1
            if s.get("state") == "Completed":
                c.completed += 1
    return stats
