"""Simulated participant clients.

Stands in for the real browser client: samples a platform capability
profile, walks a grid maze under a treatment-dependent pathing bias,
streams the trajectory to the assembly service in chunked envelopes,
and finishes with the challenge/response handshake.  Everything is
driven by seeded RNGs and a virtual clock, so a cohort run is
deterministic no matter how the thread scheduler interleaves sessions.

The built-in ground truth: treatment B raises the pathing bias, so its
walks are genuinely shorter on average, while A equals Control.  The
analysis stage should therefore find a significant B effect and a null
A effect on synthetic cohorts.
"""

from __future__ import annotations

import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import requests

from exac.completion import Challenge, derive_code
from exac.errors import InvariantError, TransportError, UnreachableError
from exac.protocol import (
    chunk_payload,
    encode_envelope,
    encode_trajectory,
    event_envelope,
)
from exac._kernels import interpolate_track

# Virtual epoch for simulated timestamps (2020-09-13T12:26:40Z).  Session
# timestamps count up from here so reruns produce byte-identical exports.
EPOCH_MS = 1_600_000_000_000

# Per-session virtual time costs (ms): capability check, consent reading,
# gap between trials, offboarding form.
ONBOARDING_MS = 30_000
CONSENT_MS = 15_000
INTER_TRIAL_MS = 20_000
OFFBOARDING_MS = 30_000

# Observed desk-scale platform split for sampled capability profiles:
# (os, browser, passed_capability_check, count).  Pass/fail marginals are
# sampled conditionally on the onboarding outcome draw.
PLATFORM_MARGINALS = (
    ("Chrome OS", "Chrome", True, 12),
    ("Linux", "Chrome", True, 3),
    ("Linux", "Firefox", True, 1),
    ("Linux", "Other", True, 1),
    ("MacOS X 10", "Chrome", True, 22),
    ("MacOS X 10", "Firefox", True, 1),
    ("Windows 10", "Chrome", True, 208),
    ("Windows 10", "Firefox", True, 20),
    ("Windows 10", "Other", True, 1),
    ("Windows 8", "Chrome", True, 9),
    ("Windows 8", "Firefox", True, 1),
    ("Windows 7", "Chrome", True, 36),
    ("Windows 7", "Firefox", True, 1),
    ("Linux", "Chrome", False, 2),
    ("MacOS X 10", "Chrome", False, 5),
    ("Windows 10", "Chrome", False, 70),
    ("Windows 8", "Chrome", False, 60),
    ("Windows 7", "Chrome", False, 9),
)

DEFAULT_TREATMENT_BIAS = {"Control": 0.70, "A": 0.70, "B": 0.85}


# -- capability profiles -------------------------------------------------------


@dataclass(frozen=True)
class CapabilityProfile:
    os: str
    browser: str
    webgl_capable: bool
    frame_rate_ok: bool


def onboarding_check(profile: CapabilityProfile):
    """("pass", None) or ("fail", reason); pass needs both flags."""
    if not profile.webgl_capable:
        return ("fail", "webgl")
    if not profile.frame_rate_ok:
        return ("fail", "frame_rate")
    return ("pass", None)


def _marginal_rows(passed: bool):
    rows = [r for r in PLATFORM_MARGINALS if r[2] is passed]
    total = sum(r[3] for r in rows)
    return rows, total


def sample_profile(rng: random.Random, passed: bool) -> CapabilityProfile:
    """Draw (os, browser) from the platform split conditional on outcome."""
    rows, total = _marginal_rows(passed)
    pick = rng.randrange(total)
    acc = 0
    for os_, browser, _, count in rows:
        acc += count
        if pick < acc:
            # failed checks report the renderer as the blocker
            return CapabilityProfile(os_, browser, webgl_capable=passed, frame_rate_ok=True)
    raise AssertionError("marginals exhausted")


def fixture_summaries(completed_total: int = 149) -> list:
    """Expand the platform split into per-session funnel summaries.

    One dict per access; exactly `completed_total` of the capable ones
    are marked Completed (assigned in row order).
    """
    summaries = []
    remaining = completed_total
    for os_, browser, passed, count in PLATFORM_MARGINALS:
        for _ in range(count):
            done = passed and remaining > 0
            if done:
                remaining -= 1
            summaries.append({
                "os": os_,
                "browser": browser,
                "capable": passed,
                "state": "Completed" if done else ("Offboarding" if passed else "Failed"),
            })
    if remaining:
        raise InvariantError(f"{remaining} completions left unassigned")
    return summaries


# -- grid world -------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Four-connected walkable grid; 1 cell = 1 meter."""

    width: int = 13
    height: int = 13
    origin: tuple = (6, 6)
    targets: tuple = ((0, 0), (12, 12), (0, 12), (12, 0), (12, 6), (0, 6))
    walls: frozenset = frozenset()

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvariantError("grid must be at least 1x1")
        if not self.targets:
            raise InvariantError("grid needs at least one target")
        for cell in (self.origin, *self.targets):
            if not self.in_bounds(cell):
                raise InvariantError(f"cell {cell} outside {self.width}x{self.height} grid")
            if cell in self.walls:
                raise InvariantError(f"cell {cell} is a wall")
        reachable = distance_field(self, self.origin)
        for t in self.targets:
            if t not in reachable:
                raise UnreachableError(f"target {t} not reachable from origin {self.origin}")

    def in_bounds(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def walkable(self, cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def neighbors(self, cell):
        x, y = cell
        out = []
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (x + dx, y + dy)
            if self.walkable(nxt):
                out.append(nxt)
        return out


@lru_cache(maxsize=256)
def distance_field(grid: GridSpec, target) -> dict:
    """BFS hop counts from every reachable cell to `target`."""
    dist = {target: 0}
    frontier = [target]
    while frontier:
        nxt = []
        for cell in frontier:
            d = dist[cell] + 1
            for nb in grid.neighbors(cell):
                if nb not in dist:
                    dist[nb] = d
                    nxt.append(nb)
        frontier = nxt
    return dist


def shortest_len(grid: GridSpec, a, b) -> int:
    field_ = distance_field(grid, b)
    if a not in field_:
        raise UnreachableError(f"{b} not reachable from {a}")
    return field_[a]


# -- agents -------------------------------------------------------------


@dataclass(frozen=True)
class SimAgentConfig:
    seed: int = 0
    grid: GridSpec = field(default_factory=GridSpec)
    bias: float | None = None  # None: look up treatment_bias
    treatment_bias: tuple = tuple(sorted(DEFAULT_TREATMENT_BIAS.items()))
    sample_period_ms: int = 20
    speed: float = 2.0  # cells per second
    capability_pass_p: float = 0.68
    completion_p: float = 0.47
    step_cap: int = 100_000

    def __post_init__(self):
        if isinstance(self.treatment_bias, dict):
            object.__setattr__(self, "treatment_bias", tuple(sorted(self.treatment_bias.items())))
        for name in ("capability_pass_p", "completion_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantError(f"{name} must be in [0, 1], got {v}")
        if self.bias is not None and not 0.0 <= self.bias <= 1.0:
            raise InvariantError(f"bias must be in [0, 1], got {self.bias}")
        for t, b in self.bias_map().items():
            if not 0.0 <= b <= 1.0:
                raise InvariantError(f"bias for {t!r} must be in [0, 1], got {b}")
        if self.sample_period_ms < 1 or self.speed <= 0:
            raise InvariantError("sample_period_ms and speed must be positive")

    def bias_map(self) -> dict:
        return dict(self.treatment_bias)

    def bias_for(self, treatment: str) -> float:
        if self.bias is not None:
            return self.bias
        bm = self.bias_map()
        if treatment not in bm:
            raise InvariantError(f"no bias configured for treatment {treatment!r}")
        return bm[treatment]


@dataclass
class SessionOutcome:
    session_id: str
    participant_id: str = ""
    treatment: str = ""
    passed_onboarding: bool = False
    completed: bool = False
    trial_samples: dict = field(default_factory=dict)  # trial -> sample count
    trial_payloads: dict = field(default_factory=dict)  # trial -> canonical bytes
    wall_s: float = 0.0
    verified: bool = False

    def __post_init__(self):
        if self.completed and not self.passed_onboarding:
            raise InvariantError("completed implies passed_onboarding")


def simulate_walk(grid: GridSpec, target, bias: float, rng: random.Random,
                  step_cap: int = 100_000) -> list:
    """Biased walk from origin to target; returns the visited cell list.

    Each step follows the shortest-path gradient with probability `bias`
    (BFS-distance minimizing neighbor, ties broken by the RNG) and moves
    to a uniformly random neighbor otherwise.
    """
    field_ = distance_field(grid, target)
    if grid.origin not in field_:
        raise UnreachableError(f"target {target} not reachable from origin")
    path = [grid.origin]
    cell = grid.origin
    steps = 0
    while cell != target:
        if steps >= step_cap:
            break  # fail-safe: return the truncated walk
        nbs = grid.neighbors(cell)
        if rng.random() < bias:
            best = min(field_[nb] for nb in nbs)
            descending = [nb for nb in nbs if field_[nb] == best]
            cell = descending[rng.randrange(len(descending))]
        else:
            cell = nbs[rng.randrange(len(nbs))]
        path.append(cell)
        steps += 1
    return path


def simulate_trajectory(cfg: SimAgentConfig, treatment: str, trial: int,
                        rng: random.Random) -> list:
    """Sampled (t, x, y, z, yaw, pitch) rows for one trial's walk."""
    target = cfg.grid.targets[(trial - 1) % len(cfg.grid.targets)]
    path = simulate_walk(cfg.grid, target, cfg.bias_for(treatment), rng, cfg.step_cap)
    return interpolate_track(path, cfg.sample_period_ms / 1000.0, cfg.speed)


def path_length_m(samples) -> float:
    """Walked distance in meters (1 cell = 1 m), summed over samples."""
    total = 0.0
    for i in range(1, len(samples)):
        _, x0, y0, z0, _, _ = samples[i - 1]
        _, x1, y1, z1, _, _ = samples[i]
        total += (abs(x1 - x0) ** 2 + abs(y1 - y0) ** 2 + abs(z1 - z0) ** 2) ** 0.5
    return total


# -- transports -------------------------------------------------------------


class DirectTransport:
    """In-process transport: calls a ServiceApp without HTTP."""

    def __init__(self, app):
        self._app = app

    def post(self, envelope) -> dict:
        from exac.protocol import decode_envelope

        # round trip through canonical bytes so exactly what HTTP would carry
        ack = self._app.assembly.ingest_envelope(decode_envelope(encode_envelope(envelope)))
        return ack.to_json()

    def challenge(self, session_id: str) -> dict:
        return self._app.issue_challenge(session_id)

    def complete(self, session_id: str, code: str) -> dict:
        return self._app.complete_session(session_id, code)

    def assign(self, participant_id: str, session_id: str = "") -> str:
        return self._app.assign(participant_id, session_id)["treatment"]


class HttpTransport:
    """requests-based transport; one pooled session per thread."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self._local = threading.local()

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def _post(self, path: str, *, data=None, json_body=None) -> dict:
        try:
            resp = self._session().post(
                self.endpoint + path, data=data, json=json_body, timeout=self.timeout_s
            )
        except requests.RequestException as exc:
            raise TransportError(f"POST {path}: {exc}") from exc
        if resp.status_code >= 500:
            raise TransportError(f"POST {path}: status {resp.status_code}")
        if resp.status_code >= 400:
            raise TransportError(f"POST {path}: status {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def post(self, envelope) -> dict:
        return self._post("/v1/messages", data=encode_envelope(envelope))

    def challenge(self, session_id: str) -> dict:
        return self._post(f"/v1/sessions/{session_id}/challenge", json_body={})

    def complete(self, session_id: str, code: str) -> dict:
        return self._post(f"/v1/sessions/{session_id}/complete", json_body={"code": code})

    def assign(self, participant_id: str, session_id: str = "") -> str:
        body = {"participant_id": participant_id, "session_id": session_id}
        return self._post("/v1/mgmt/assign", json_body=body)["treatment"]


class FlakyTransport:
    """Fault-injection wrapper: posts fail with probability `fail_p`.

    Half the injected faults fire before the inner call (message lost),
    half after it succeeded (ack lost); the latter forces duplicate
    resends, which the service must absorb.
    """

    def __init__(self, inner, fail_p: float, rng: random.Random):
        self._inner = inner
        self.fail_p = fail_p
        self._rng = rng
        self._lock = threading.Lock()
        self.injected = 0

    def post(self, envelope) -> dict:
        with self._lock:
            r = self._rng.random()
        if r < self.fail_p:
            with self._lock:
                self.injected += 1
                lose_before = self._rng.random() < 0.5
            if lose_before:
                raise TransportError("injected: message lost")
            self._inner.post(envelope)
            raise TransportError("injected: ack lost")
        return self._inner.post(envelope)

    def challenge(self, session_id: str) -> dict:
        return self._inner.challenge(session_id)

    def complete(self, session_id: str, code: str) -> dict:
        return self._inner.complete(session_id, code)

    def assign(self, participant_id: str, session_id: str = "") -> str:
        return self._inner.assign(participant_id, session_id)


def post_with_retries(transport, envelope, *, retries: int = 3,
                      base_delay_s: float = 0.1, sleep=time.sleep) -> dict:
    """At-least-once delivery: resend the identical envelope on failure."""
    attempt = 0
    while True:
        try:
            return transport.post(envelope)
        except TransportError:
            if attempt >= retries:
                raise
            sleep(base_delay_s * (2 ** attempt))
            attempt += 1


# -- session driver -------------------------------------------------------------


def run_session(cfg: SimAgentConfig, manifest, transport, rng: random.Random, *,
                session_id: str, participant_id: str, treatment: str | None = None,
                start_ms: int = EPOCH_MS, retries: int = 3, retry_sleep=time.sleep) -> SessionOutcome:
    """Drive one participant end to end against the service.

    Phases: onboarding (capability events) → consent → trials 1..N
    (trajectory streamed in chunks) → offboarding (challenge/response).
    All timestamps come off a virtual clock starting at `start_ms`, so
    outcomes depend only on the RNG, never on wall time or scheduling.
    Dropout: after onboarding the completion draw decides whether the
    agent finishes all trials or abandons after a uniformly drawn prefix.
    """
    t0 = time.monotonic()
    outcome = SessionOutcome(session_id=session_id, participant_id=participant_id)
    now_ms = start_ms

    def post(envelope):
        post_with_retries(transport, envelope, retries=retries, sleep=retry_sleep)

    # onboarding: outcome draw first, then a platform conditional on it
    passed = rng.random() < cfg.capability_pass_p
    profile = sample_profile(rng, passed)
    verdict, reason = onboarding_check(profile)
    now_ms += ONBOARDING_MS
    if verdict == "fail":
        post(event_envelope(session_id, "onboarding_fail",
                            {"os": profile.os, "browser": profile.browser, "reason": reason},
                            ts_ms=now_ms))
        outcome.wall_s = time.monotonic() - t0
        return outcome
    post(event_envelope(session_id, "onboarding_pass",
                        {"os": profile.os, "browser": profile.browser}, ts_ms=now_ms))
    outcome.passed_onboarding = True

    if treatment is None:
        treatment = transport.assign(participant_id, session_id)
    outcome.treatment = treatment
    now_ms += CONSENT_MS
    post(event_envelope(session_id, "consent_given",
                        {"participant_id": participant_id, "treatment": treatment},
                        ts_ms=now_ms))

    total_trials = manifest.trials_per_participant
    finishes = rng.random() < cfg.completion_p
    planned = total_trials if finishes else rng.randrange(total_trials)

    for trial in range(1, planned + 1):
        now_ms += INTER_TRIAL_MS
        post(event_envelope(session_id, "trial_start", {"trial": trial}, ts_ms=now_ms, trial=trial))
        samples = simulate_trajectory(cfg, treatment, trial, rng)
        payload = encode_trajectory(samples)
        header, chunks, tail = chunk_payload(
            payload, manifest.chunk_size_bytes, session=session_id, trial=trial,
            ts_ms=now_ms, sample_hz=1000.0 / cfg.sample_period_ms,
        )
        for envelope in (header, *chunks, tail):
            post(envelope)
        now_ms += int(samples[-1][0] * 1000) if samples else 0
        post(event_envelope(session_id, "trial_end",
                            {"trial": trial, "samples": len(samples)}, ts_ms=now_ms, trial=trial))
        outcome.trial_samples[trial] = len(samples)
        outcome.trial_payloads[trial] = payload

    if finishes:
        now_ms += OFFBOARDING_MS
        post(event_envelope(session_id, "session_complete", {}, ts_ms=now_ms))
        ch = transport.challenge(session_id)
        challenge = Challenge(session_id=session_id, nonce=ch["nonce"],
                              issued_ts_ms=ch["issued_ts_ms"])
        code = derive_code(challenge, manifest.salt)
        result = transport.complete(session_id, code)
        outcome.verified = bool(result.get("verified"))
        outcome.completed = True
    outcome.wall_s = time.monotonic() - t0
    return outcome


# -- cohort driver -------------------------------------------------------------


@dataclass
class ThroughputReport:
    sessions: int
    envelopes_posted: int
    elapsed_s: float
    envelopes_per_s: float
    p95_post_latency_ms: float

    def to_json(self) -> dict:
        return {
            "sessions": self.sessions,
            "envelopes_posted": self.envelopes_posted,
            "elapsed_s": round(self.elapsed_s, 3),
            "envelopes_per_s": round(self.envelopes_per_s, 1),
            "p95_post_latency_ms": round(self.p95_post_latency_ms, 3),
        }


class _MeteredTransport:
    """Counts posts and records per-post latency; delegates everything."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()
        self.latencies_ms: list = []

    def post(self, envelope) -> dict:
        t0 = time.monotonic()
        ack = self._inner.post(envelope)
        dt_ms = (time.monotonic() - t0) * 1000.0
        with self._lock:
            self.latencies_ms.append(dt_ms)
        return ack

    def challenge(self, session_id: str) -> dict:
        return self._inner.challenge(session_id)

    def complete(self, session_id: str, code: str) -> dict:
        return self._inner.complete(session_id, code)

    def assign(self, participant_id: str, session_id: str = "") -> str:
        return self._inner.assign(participant_id, session_id)


def _p95(values) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = max(0, -(-len(ordered) * 95 // 100) - 1)  # ceil(0.95 n) - 1
    return ordered[idx]


def session_seed(master_seed: int, index: int) -> str:
    return f"{master_seed}:{index}"


def run_cohort(n: int, cfg: SimAgentConfig, manifest, transport, *,
               parallelism: int = 8, retries: int = 3,
               retry_sleep=time.sleep, id_offset: int = 0) -> tuple:
    """Run `n` sessions with bounded parallelism.

    Treatments are requested from the assignment endpoint for all
    participants first, in index order; with the service's balanced
    strategy this makes assignments deterministic regardless of how the
    session threads interleave afterwards.  Returns (outcomes, report).

    `id_offset` shifts session/participant numbering (and the per-session
    seeds) so a second cohort appends to a service instead of colliding
    with ids from the first.
    """
    if n < 1:
        raise InvariantError("cohort size must be >= 1")
    if id_offset < 0:
        raise InvariantError("id_offset must be >= 0")
    metered = _MeteredTransport(transport)
    ids = [(f"s{i:04d}", f"p{i:04d}") for i in range(1 + id_offset, n + 1 + id_offset)]
    treatments = [transport.assign(pid, sid) for sid, pid in ids]

    t0 = time.monotonic()

    def one(i: int) -> SessionOutcome:
        sid, pid = ids[i]
        rng = random.Random(session_seed(cfg.seed, id_offset + i + 1))
        return run_session(cfg, manifest, metered, rng, session_id=sid,
                           participant_id=pid, treatment=treatments[i],
                           start_ms=EPOCH_MS + (id_offset + i) * 90_000,
                           retries=retries, retry_sleep=retry_sleep)

    if parallelism <= 1 or n == 1:
        outcomes = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, range(n)))
    elapsed = time.monotonic() - t0

    posted = len(metered.latencies_ms)
    report = ThroughputReport(
        sessions=n,
        envelopes_posted=posted,
        elapsed_s=elapsed,
        envelopes_per_s=posted / elapsed if elapsed > 0 else 0.0,
        p95_post_latency_ms=_p95(metered.latencies_ms),
    )
    return outcomes, report


# -- analysis fast path ----------------------------------------------------------


def generate_cohort_metrics(n_participants: int, cfg: SimAgentConfig, *,
                            treatments=("Control", "A", "B"),
                            trials: int = 6) -> list:
    """Per-trial metric rows without any service round trips.

    Deterministic round-robin assignment, every participant completes
    every trial.  Returns dict rows (participant_id, treatment, trial,
    path_length_m), the same numbers a full pipeline run would yield
    for completed sessions, minus the transport.
    """
    if n_participants < 1:
        raise InvariantError("need at least one participant")
    rows = []
    for i in range(1, n_participants + 1):
        pid = f"p{i:04d}"
        treatment = treatments[(i - 1) % len(treatments)]
        rng = random.Random(session_seed(cfg.seed, i))
        for trial in range(1, trials + 1):
            target = cfg.grid.targets[(trial - 1) % len(cfg.grid.targets)]
            path = simulate_walk(cfg.grid, target, cfg.bias_for(treatment), rng, cfg.step_cap)
            rows.append({
                "participant_id": pid,
                "treatment": treatment,
                "trial": trial,
                "path_length_m": float(len(path) - 1),
            })
    return rows
