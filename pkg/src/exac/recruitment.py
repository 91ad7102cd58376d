"""Recruitment platform client interface plus the simulated implementation.

The real platform is an external paid service; everything here talks to
it through three calls (create_hit, approve, pay) so a mock can stand in
for tests and desk-scale runs.  The mock records every call and can be
told to fail on chosen call indices for fault-injection tests.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from decimal import Decimal

from exac.errors import ClientError


@dataclass(frozen=True)
class HitSpec:
    """One recruitment batch: a task listing participants can accept."""

    title: str
    reward_usd: Decimal
    max_assignments: int
    external_url: str = ""

    def __post_init__(self):
        if self.max_assignments < 1:
            raise ValueError("max_assignments must be >= 1")
        if self.reward_usd < 0:
            raise ValueError("reward_usd must be >= 0")


class MockRecruitmentClient:
    """In-memory stand-in; thread safe; injectable failures.

    `fail_create_on`, `fail_approve_on`, `fail_pay_on` hold 1-based call
    indices that raise ClientError instead of succeeding.
    """

    def __init__(self, *, fail_create_on=None, fail_approve_on=None, fail_pay_on=None):
        self._lock = threading.Lock()
        self.created: list = []  # (hit_id, HitSpec)
        self.approvals: list = []  # participant_id
        self.payments: list = []  # (participant_id, Decimal)
        self.fail_create_on: set = set(fail_create_on or ())
        self.fail_approve_on: set = set(fail_approve_on or ())
        self.fail_pay_on: set = set(fail_pay_on or ())
        self._create_calls = 0
        self._approve_calls = 0
        self._pay_calls = 0

    def create_hit(self, spec: HitSpec) -> str:
        with self._lock:
            self._create_calls += 1
            if self._create_calls in self.fail_create_on:
                raise ClientError(f"create_hit rejected (call {self._create_calls})")
            hit_id = f"HIT-{uuid.uuid4().hex[:12]}"
            self.created.append((hit_id, spec))
            return hit_id

    def approve(self, participant_id: str) -> None:
        with self._lock:
            self._approve_calls += 1
            if self._approve_calls in self.fail_approve_on:
                raise ClientError(f"approve rejected (call {self._approve_calls})")
            self.approvals.append(participant_id)

    def pay(self, participant_id: str, amount_usd: Decimal) -> None:
        with self._lock:
            self._pay_calls += 1
            if self._pay_calls in self.fail_pay_on:
                raise ClientError(f"pay rejected (call {self._pay_calls})")
            self.payments.append((participant_id, amount_usd))

    def payments_for(self, participant_id: str) -> list:
        with self._lock:
            return [amt for pid, amt in self.payments if pid == participant_id]
