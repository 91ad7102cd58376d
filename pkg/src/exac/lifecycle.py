"""Simulated infrastructure lifecycle: plan, apply, teardown.

The deployment is described declaratively; this module diffs the
desired resource chain against recorded state and executes the delta.
State is persisted to a JSON file with a write-temp-then-rename after
*every* action, so a crash mid-apply leaves a parseable file from which
a fresh plan resumes exactly where the dead process stopped.  An
advisory file lock keeps two operators from applying concurrently.

Resource kinds form a fixed dependency chain and are always created in
this order and destroyed in reverse:

    storage_bucket -> assembly_service -> static_content -> recruitment_hits
"""

from __future__ import annotations

import json
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
import urllib.request
from dataclasses import dataclass, field

from exac.errors import ExecutorError, StateCorruptError, StateLockError
from exac.manifest import ExperimentManifest

RESOURCE_ORDER = ("storage_bucket", "assembly_service", "static_content", "recruitment_hits")

STATUSES = ("planned", "created", "destroyed")


@dataclass
class Resource:
    id: str
    kind: str
    status: str = "planned"
    attrs: dict = field(default_factory=dict)


@dataclass
class LifecycleState:
    resources: list = field(default_factory=list)
    revision: int = 0

    def by_kind(self, kind: str) -> Resource | None:
        for r in self.resources:
            if r.kind == kind:
                return r
        return None

    def created_kinds(self) -> set:
        return {r.kind for r in self.resources if r.status == "created"}


@dataclass(frozen=True)
class PlannedAction:
    action: str  # "create" | "destroy"
    kind: str
    resource_id: str


def empty_state() -> LifecycleState:
    return LifecycleState()


def state_to_json(state: LifecycleState) -> dict:
    return {
        "revision": state.revision,
        "resources": [
            {"id": r.id, "kind": r.kind, "status": r.status, "attrs": dict(r.attrs)}
            for r in state.resources
        ],
    }


def state_from_json(obj) -> LifecycleState:
    if not isinstance(obj, dict):
        raise StateCorruptError("state must be a JSON object")
    rev = obj.get("revision")
    if not isinstance(rev, int) or isinstance(rev, bool) or rev < 0:
        raise StateCorruptError("state.revision must be an integer >= 0")
    raw = obj.get("resources")
    if not isinstance(raw, list):
        raise StateCorruptError("state.resources must be a list")
    resources = []
    seen_kinds = set()
    for i, r in enumerate(raw):
        if not isinstance(r, dict):
            raise StateCorruptError(f"state.resources[{i}] must be an object")
        try:
            res = Resource(id=r["id"], kind=r["kind"], status=r["status"], attrs=r.get("attrs", {}))
        except KeyError as exc:
            raise StateCorruptError(f"state.resources[{i}] missing {exc}") from None
        if res.kind not in RESOURCE_ORDER:
            raise StateCorruptError(f"unknown resource kind {res.kind!r}")
        if res.status not in STATUSES:
            raise StateCorruptError(f"unknown resource status {res.status!r}")
        if res.kind in seen_kinds:
            raise StateCorruptError(f"duplicate resource kind {res.kind!r}")
        if not isinstance(res.attrs, dict):
            raise StateCorruptError(f"state.resources[{i}].attrs must be an object")
        seen_kinds.add(res.kind)
        resources.append(res)
    return LifecycleState(resources=resources, revision=rev)


def load_state(path: str) -> LifecycleState:
    """Read a state file; absent file means empty state, garbage raises."""
    if not os.path.exists(path):
        return empty_state()
    try:
        with open(path, "rb") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StateCorruptError(f"cannot read state file {path}: {exc}") from None
    return state_from_json(obj)


def save_state(state: LifecycleState, path: str) -> None:
    """Atomic persist: write to a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".exac-state-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(state_to_json(state), fh, indent=2, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


class StateLock:
    """Advisory exclusive lock on `<state>.lock`; raises if already held."""

    def __init__(self, state_path: str):
        self.path = state_path + ".lock"
        self._fh = None

    def acquire(self) -> "StateLock":
        import fcntl

        directory = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(directory, exist_ok=True)
        fh = open(self.path, "a+")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            fh.close()
            raise StateLockError(f"state lock is held by another process: {self.path}") from None
        self._fh = fh
        return self

    def release(self) -> None:
        if self._fh is not None:
            import fcntl

            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()


def plan(manifest: ExperimentManifest, state: LifecycleState) -> list[PlannedAction]:
    """Actions needed to reach the fully created chain; [] when converged."""
    created = state.created_kinds()
    # A created resource must not depend on a missing one; that state can
    # only arise from hand-editing and a plan built on it would be wrong.
    seen_gap = False
    for kind in RESOURCE_ORDER:
        if kind not in created:
            seen_gap = True
        elif seen_gap:
            raise StateCorruptError(
                f"resource {kind!r} is created but a dependency earlier in the chain is not"
            )
    actions = []
    for kind in RESOURCE_ORDER:
        if kind not in created:
            actions.append(PlannedAction(action="create", kind=kind, resource_id=f"{manifest.name}.{kind}"))
    return actions


def apply(
    actions: list[PlannedAction],
    state: LifecycleState,
    executor,
    state_path: str | None = None,
) -> LifecycleState:
    """Execute a plan in order, persisting state after every action.

    On executor failure the partial state is persisted and ExecutorError
    (carrying the failing index) is raised; a later plan() resumes from
    the survivors.  Applying an empty plan changes nothing.
    """
    for idx, act in enumerate(actions):
        if act.action != "create":
            raise ExecutorError(idx, act.action, ValueError("apply only handles create actions"))
        try:
            attrs = executor.create(act.kind, state)
        except Exception as exc:
            if state_path:
                save_state(state, state_path)
            raise ExecutorError(idx, f"create {act.kind}", exc) from exc
        existing = state.by_kind(act.kind)
        if existing is None:
            state.resources.append(Resource(id=act.resource_id, kind=act.kind, status="created", attrs=attrs))
        else:
            existing.status = "created"
            existing.attrs = attrs
        state.revision += 1
        if state_path:
            save_state(state, state_path)
    return state


def teardown(state: LifecycleState, executor, state_path: str | None = None) -> LifecycleState:
    """Destroy created resources in reverse dependency order."""
    for kind in reversed(RESOURCE_ORDER):
        res = state.by_kind(kind)
        if res is None or res.status != "created":
            continue
        try:
            executor.destroy(res)
        except Exception as exc:
            if state_path:
                save_state(state, state_path)
            raise ExecutorError(RESOURCE_ORDER.index(kind), f"destroy {kind}", exc) from exc
        res.status = "destroyed"
        state.revision += 1
        if state_path:
            save_state(state, state_path)
    return state


class MockExecutor:
    """Records calls; optionally fails on chosen kinds.  For tests."""

    def __init__(self, fail_on: set | None = None):
        self.calls = []
        self.fail_on = set(fail_on or ())

    def create(self, kind: str, state: LifecycleState) -> dict:
        self.calls.append(("create", kind))
        if kind in self.fail_on:
            raise RuntimeError(f"injected failure creating {kind}")
        return {"mock": kind}

    def destroy(self, resource: Resource) -> None:
        self.calls.append(("destroy", resource.kind))
        if resource.kind in self.fail_on:
            raise RuntimeError(f"injected failure destroying {resource.kind}")


class LocalExecutor:
    """Realizes the chain on the local machine.

    storage_bucket     -> a directory
    assembly_service   -> a child process serving the HTTP API
    static_content     -> operator dashboard files plus config.json
    recruitment_hits   -> simulated recruitment batches written to hits.json

    Teardown stops the service process but keeps data directories:
    collected raw data outlives the deployment on purpose.
    """

    def __init__(self, manifest: ExperimentManifest, workdir: str, *, registry_path: str | None = None,
                 port: int = 0, hit_batches: int = 1, recruitment=None):
        self.manifest = manifest
        self.workdir = os.path.abspath(workdir)
        self.registry_path = registry_path or os.path.join(self.workdir, "registry.jsonl")
        self.port = port
        self.hit_batches = hit_batches
        self._recruitment = recruitment

    def create(self, kind: str, state: LifecycleState) -> dict:
        os.makedirs(self.workdir, exist_ok=True)
        if kind == "storage_bucket":
            path = os.path.join(self.workdir, "bucket")
            os.makedirs(path, exist_ok=True)
            return {"path": path}
        if kind == "assembly_service":
            bucket = state.by_kind("storage_bucket")
            if bucket is None or bucket.status != "created":
                raise RuntimeError("assembly_service requires storage_bucket")
            return self._spawn_service(bucket.attrs["path"])
        if kind == "static_content":
            svc = state.by_kind("assembly_service")
            endpoint = svc.attrs.get("endpoint", "") if svc else ""
            return self._write_static(endpoint)
        if kind == "recruitment_hits":
            return self._create_hits(state)
        raise RuntimeError(f"unknown resource kind {kind!r}")

    def _spawn_service(self, bucket_path: str) -> dict:
        manifest_path = os.path.join(self.workdir, "experiment.json")
        from exac.manifest import manifest_to_json

        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest_to_json(self.manifest), fh, indent=2)
        port_file = os.path.join(self.workdir, "service.port")
        if os.path.exists(port_file):
            os.unlink(port_file)
        log_path = os.path.join(self.workdir, "service.log")
        log = open(log_path, "ab")
        static_dir = os.path.join(self.workdir, "static")
        cmd = [
            sys.executable,
            "-m",
            "exac.server",
            "--manifest", manifest_path,
            "--bucket", bucket_path,
            "--registry", self.registry_path,
            "--port", str(self.port),
            "--port-file", port_file,
            "--static", static_dir,
        ]
        proc = subprocess.Popen(cmd, stdout=log, stderr=log, start_new_session=True)
        log.close()
        try:
            port = self._await_port(proc, port_file)
        except Exception:
            proc.kill()
            raise
        endpoint = f"http://127.0.0.1:{port}"
        self._await_health(proc, endpoint)
        with open(os.path.join(self.workdir, "service.pid"), "w") as fh:
            fh.write(str(proc.pid))
        return {"pid": str(proc.pid), "port": str(port), "endpoint": endpoint, "log": log_path}

    @staticmethod
    def _await_port(proc, port_file: str, timeout_s: float = 20.0) -> int:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                raise RuntimeError(f"service exited with code {proc.returncode} before listening")
            if os.path.exists(port_file):
                text = open(port_file).read().strip()
                if text:
                    return int(text)
            time.sleep(0.02)
        raise RuntimeError("service did not report a port in time")

    @staticmethod
    def _await_health(proc, endpoint: str, timeout_s: float = 20.0) -> None:
        deadline = time.monotonic() + timeout_s
        last = None
        while time.monotonic() < deadline:
            if proc.poll() is not None:
                raise RuntimeError(f"service exited with code {proc.returncode} during startup")
            try:
                with urllib.request.urlopen(endpoint + "/v1/health", timeout=2) as resp:
                    if resp.status == 200:
                        return
            except Exception as exc:  # noqa: BLE001 - retried until deadline
                last = exc
            time.sleep(0.05)
        raise RuntimeError(f"service never became healthy: {last}")

    def _write_static(self, endpoint: str) -> dict:
        static_dir = os.path.join(self.workdir, "static")
        os.makedirs(static_dir, exist_ok=True)
        # Ship the built dashboard when present; otherwise a minimal page.
        built = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))),
                             "frontend", "dist")
        wrote_app = False
        if os.path.isdir(built):
            for name in os.listdir(built):
                src = os.path.join(built, name)
                if os.path.isfile(src):
                    shutil.copy2(src, os.path.join(static_dir, name))
                    wrote_app = True
        if not wrote_app:
            with open(os.path.join(static_dir, "index.html"), "w", encoding="utf-8") as fh:
                fh.write(
                    "<!doctype html><title>exac operator</title>"
                    "<p>Dashboard build not present; the HTTP API is at "
                    f"<code>{endpoint or 'the service endpoint'}</code>.</p>\n"
                )
        with open(os.path.join(static_dir, "config.json"), "w", encoding="utf-8") as fh:
            json.dump({"endpoint": endpoint, "poll_ms": 2000}, fh)
        return {"path": static_dir}

    def _create_hits(self, state: LifecycleState) -> dict:
        from exac.management import HitSpec, Registry, create_hits
        from exac.recruitment import MockRecruitmentClient

        svc = state.by_kind("assembly_service")
        endpoint = svc.attrs.get("endpoint", "") if svc else ""
        client = self._recruitment or MockRecruitmentClient()
        registry = Registry(self.registry_path)
        spec = HitSpec(
            title=f"{self.manifest.name} session",
            reward_usd=self.manifest.reward_base_usd,
            max_assignments=9,
            external_url=endpoint,
        )
        ids = create_hits(spec, self.hit_batches, client, registry)
        hits_path = os.path.join(self.workdir, "hits.json")
        with open(hits_path, "w", encoding="utf-8") as fh:
            json.dump({"hit_ids": ids, "batches": self.hit_batches}, fh, indent=2)
        return {"path": hits_path, "count": str(len(ids))}

    def destroy(self, resource: Resource) -> None:
        if resource.kind == "assembly_service":
            pid = int(resource.attrs.get("pid", "0") or "0")
            if pid > 0:
                _stop_process(pid)
        # Other kinds keep their local artifacts; destroying them releases
        # the deployment claim, it does not delete collected data.


def _stop_process(pid: int, timeout_s: float = 10.0) -> None:
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        return
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return
        time.sleep(0.05)
    try:
        os.kill(pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
