"""Lifecycle plan/apply/teardown semantics and crash safety."""

import json
import os
import subprocess
import sys
import textwrap

import pytest

from exac.errors import ExecutorError, StateCorruptError, StateLockError
from exac.lifecycle import (
    RESOURCE_ORDER,
    MockExecutor,
    StateLock,
    apply,
    empty_state,
    load_state,
    plan,
    save_state,
    state_from_json,
    teardown,
)
from exac.manifest import ExperimentManifest

M = ExperimentManifest(name="wf", salt="x")


class TestPlan:
    def test_empty_state_plans_full_chain_in_order(self):
        actions = plan(M, empty_state())
        assert [a.kind for a in actions] == list(RESOURCE_ORDER)
        assert all(a.action == "create" for a in actions)

    def test_plan_after_apply_is_empty(self):
        state = apply(plan(M, empty_state()), empty_state(), MockExecutor())
        assert plan(M, state) == []

    def test_partial_state_plans_remainder(self):
        ex = MockExecutor(fail_on={"static_content"})
        state = empty_state()
        with pytest.raises(ExecutorError) as ei:
            apply(plan(M, state), state, ex)
        assert ei.value.index == 2
        remainder = plan(M, state)
        assert [a.kind for a in remainder] == ["static_content", "recruitment_hits"]

    def test_corrupt_dependency_order_rejected(self):
        state = state_from_json({
            "revision": 1,
            "resources": [{"id": "x", "kind": "assembly_service", "status": "created", "attrs": {}}],
        })
        with pytest.raises(StateCorruptError):
            plan(M, state)


class TestApply:
    def test_apply_executes_in_order_and_bumps_revision(self, tmp_path):
        path = str(tmp_path / "exac.state.json")
        ex = MockExecutor()
        state = apply(plan(M, empty_state()), empty_state(), ex, state_path=path)
        assert [c for c in ex.calls] == [("create", k) for k in RESOURCE_ORDER]
        assert state.revision == 4
        assert state.created_kinds() == set(RESOURCE_ORDER)
        on_disk = load_state(path)
        assert on_disk.revision == 4

    def test_apply_empty_plan_is_noop(self):
        ex = MockExecutor()
        state = apply(plan(M, empty_state()), empty_state(), ex)
        before = state.revision
        apply([], state, ex)
        assert state.revision == before
        assert plan(M, state) == []

    def test_second_full_cycle_creates_nothing_new(self):
        ex = MockExecutor()
        state = apply(plan(M, empty_state()), empty_state(), ex)
        apply(plan(M, state), state, ex)
        assert len(ex.calls) == 4  # no extra creates

    def test_failure_persists_partial_state(self, tmp_path):
        path = str(tmp_path / "exac.state.json")
        ex = MockExecutor(fail_on={"assembly_service"})
        state = empty_state()
        with pytest.raises(ExecutorError) as ei:
            apply(plan(M, state), state, ex, state_path=path)
        assert ei.value.index == 1
        persisted = load_state(path)
        assert persisted.created_kinds() == {"storage_bucket"}
        assert [a.kind for a in plan(M, persisted)] == [
            "assembly_service", "static_content", "recruitment_hits",
        ]


class TestTeardown:
    def test_reverse_order(self):
        ex = MockExecutor()
        state = apply(plan(M, empty_state()), empty_state(), ex)
        teardown(state, ex)
        destroys = [c[1] for c in ex.calls if c[0] == "destroy"]
        assert destroys == list(reversed(RESOURCE_ORDER))
        assert state.created_kinds() == set()
        assert all(r.status == "destroyed" for r in state.resources)

    def test_teardown_empty_state_is_noop(self):
        ex = MockExecutor()
        teardown(empty_state(), ex)
        assert ex.calls == []

    def test_plan_after_teardown_recreates(self):
        ex = MockExecutor()
        state = apply(plan(M, empty_state()), empty_state(), ex)
        teardown(state, ex)
        assert [a.kind for a in plan(M, state)] == list(RESOURCE_ORDER)


class TestStateFile:
    def test_missing_file_is_empty_state(self, tmp_path):
        assert load_state(str(tmp_path / "nope.json")).resources == []

    def test_garbage_raises_state_corrupt(self, tmp_path):
        p = tmp_path / "exac.state.json"
        p.write_text("{not json")
        with pytest.raises(StateCorruptError):
            load_state(str(p))

    def test_bad_structure_raises(self, tmp_path):
        p = tmp_path / "exac.state.json"
        p.write_text(json.dumps({"revision": "x", "resources": []}))
        with pytest.raises(StateCorruptError):
            load_state(str(p))
        p.write_text(json.dumps({"revision": 0, "resources": [{"id": "a", "kind": "bogus", "status": "created"}]}))
        with pytest.raises(StateCorruptError):
            load_state(str(p))

    def test_atomic_write_round_trip(self, tmp_path):
        path = str(tmp_path / "sub" / "exac.state.json")
        state = apply(plan(M, empty_state()), empty_state(), MockExecutor())
        save_state(state, path)
        again = load_state(path)
        assert again.revision == state.revision
        assert {r.kind for r in again.resources} == set(RESOURCE_ORDER)


class TestLock:
    def test_lock_excludes_second_holder(self, tmp_path):
        path = str(tmp_path / "exac.state.json")
        with StateLock(path):
            with pytest.raises(StateLockError):
                StateLock(path).acquire()
        # released: can take it again
        with StateLock(path):
            pass


class TestKillMidApply:
    def test_sigkill_mid_apply_leaves_resumable_state(self, tmp_path):
        """Simulated operator crash: child is SIGKILLed between actions.

        The state file must parse and a fresh plan must contain exactly
        the unfinished actions.
        """
        state_path = str(tmp_path / "exac.state.json")
        script = textwrap.dedent(f"""
            import time
            from exac.lifecycle import apply, empty_state, plan
            from exac.manifest import ExperimentManifest

            class SlowExecutor:
                def create(self, kind, state):
                    time.sleep(0.15)
                    return {{"kind": kind}}

            m = ExperimentManifest(name="wf", salt="x")
            state = empty_state()
            print("START", flush=True)
            apply(plan(m, state), state, SlowExecutor(), state_path={state_path!r})
        """)
        proc = subprocess.Popen(
            [sys.executable, "-c", script],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
        assert proc.stdout.readline().strip() == b"START"
        # two actions complete in ~0.3s; kill while the third is in flight
        import time

        time.sleep(0.40)
        proc.kill()
        proc.wait(timeout=10)

        persisted = load_state(state_path)  # parses, no StateCorruptError
        done = persisted.created_kinds()
        assert 1 <= len(done) <= 3
        # survivors are a prefix of the chain
        assert done == set(RESOURCE_ORDER[: len(done)])
        remainder = plan(M, persisted)
        assert [a.kind for a in remainder] == list(RESOURCE_ORDER[len(done):])
        # resume completes the chain
        finished = apply(remainder, persisted, MockExecutor(), state_path=state_path)
        assert plan(M, finished) == []
        assert os.path.exists(state_path)
