"""End-to-end HTTP coverage: every route, error statuses, CORS."""

import json

import pytest
import requests

from exac.completion import Challenge, derive_code
from exac.manifest import ExperimentManifest
from exac.protocol import chunk_payload, encode_envelope, event_envelope
from exac.server import ServerThread, ServiceApp

MANIFEST = ExperimentManifest(name="httptest", salt="pepper")


@pytest.fixture()
def live():
    app = ServiceApp(MANIFEST, seed=7)
    with ServerThread(app) as srv:
        yield app, srv.endpoint


def post_envelope(endpoint, envelope):
    return requests.post(f"{endpoint}/v1/messages", data=encode_envelope(envelope), timeout=5)


def drive_complete_session(app, endpoint, sid="s1", start=0, end=300_000):
    post_envelope(endpoint, event_envelope(
        sid, "consent_given", {"participant_id": "p1", "treatment": "A"}, ts_ms=start))
    payload = b"0.000000,1.000000,2.000000,0.000000,0.000000,0.000000\n"
    header, chunks, tail = chunk_payload(payload, 32, session=sid, trial=1, ts_ms=start + 1000)
    for e in [header, *chunks, tail]:
        post_envelope(endpoint, e)
    post_envelope(endpoint, event_envelope(sid, "session_complete", {}, ts_ms=end))


class TestCore:
    def test_health(self, live):
        _, endpoint = live
        resp = requests.get(f"{endpoint}/v1/health", timeout=5)
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert "uptime_s" in body

    def test_ingest_and_status(self, live):
        app, endpoint = live
        resp = post_envelope(endpoint, event_envelope("s1", "trial_start", {"trial": 1}, ts_ms=5))
        assert resp.status_code == 200
        ack = resp.json()
        assert ack["accepted"] is True
        assert ack["session_state"] == "InTrial"
        status = requests.get(f"{endpoint}/v1/status", timeout=5).json()
        assert status["sessions_total"] == 1
        assert status["envelopes_accepted"] == 1

    def test_ingest_rejects_unknown_field_with_path(self, live):
        _, endpoint = live
        body = json.dumps({
            "v": 1, "session": "s", "kind": "event", "trial": 0, "ts_ms": 1,
            "payload": {"name": "x", "data": {}, "bogus": 1},
        })
        resp = requests.post(f"{endpoint}/v1/messages", data=body, timeout=5)
        assert resp.status_code == 400
        err = resp.json()
        assert err["path"] == "payload.bogus"

    def test_ingest_rejects_non_json(self, live):
        _, endpoint = live
        resp = requests.post(f"{endpoint}/v1/messages", data=b"\xffnot json", timeout=5)
        assert resp.status_code == 400

    def test_conflicting_resend_is_409(self, live):
        _, endpoint = live
        _, chunks, _ = chunk_payload(b"a" * 50, 16, session="s", trial=1)
        assert post_envelope(endpoint, chunks[0]).status_code == 200
        conflicting = chunk_payload(b"b" * 50, 16, session="s", trial=1)[1][0]
        assert post_envelope(endpoint, conflicting).status_code == 409

    def test_duplicate_resend_is_200(self, live):
        _, endpoint = live
        e = event_envelope("s", "tick", {}, ts_ms=1)
        post_envelope(endpoint, e)
        resp = post_envelope(endpoint, e)
        assert resp.status_code == 200
        assert resp.json()["duplicate"] is True

    def test_sessions_listing(self, live):
        _, endpoint = live
        post_envelope(endpoint, event_envelope("sA", "tick", {}, ts_ms=1))
        post_envelope(endpoint, event_envelope("sB", "tick", {}, ts_ms=2))
        got = requests.get(f"{endpoint}/v1/sessions", timeout=5).json()
        assert {s["session_id"] for s in got["sessions"]} == {"sA", "sB"}

    def test_unknown_route_404(self, live):
        _, endpoint = live
        assert requests.get(f"{endpoint}/v1/nope", timeout=5).status_code == 404
        assert requests.post(f"{endpoint}/v1/nope", data="{}", timeout=5).status_code == 404

    def test_cors_preflight(self, live):
        _, endpoint = live
        resp = requests.options(f"{endpoint}/v1/messages", timeout=5)
        assert resp.status_code == 204
        assert resp.headers["Access-Control-Allow-Origin"] == "*"
        get = requests.get(f"{endpoint}/v1/health", timeout=5)
        assert get.headers["Access-Control-Allow-Origin"] == "*"

    def test_oversized_body_413(self, live):
        _, endpoint = live
        big = b"x" * (8 * 1024 * 1024 + 1)
        resp = requests.post(f"{endpoint}/v1/messages", data=big, timeout=10)
        assert resp.status_code == 413


class TestExports:
    def test_events_csv(self, live):
        app, endpoint = live
        drive_complete_session(app, endpoint)
        resp = requests.get(f"{endpoint}/v1/sessions/s1/events.csv", timeout=5)
        assert resp.status_code == 200
        assert resp.headers["Content-Type"].startswith("text/csv")
        assert resp.text.startswith("session_id,ts_ms,name,data_json")

    def test_trajectory_csv(self, live):
        app, endpoint = live
        drive_complete_session(app, endpoint)
        resp = requests.get(f"{endpoint}/v1/sessions/s1/trials/1/trajectory.csv", timeout=5)
        assert resp.status_code == 200
        lines = resp.text.strip().split("\n")
        assert lines[1] == "s1,p1,A,1,0.000000,1.000000,2.000000,0.000000,0.000000,0.000000"

    def test_export_404_unknown_session(self, live):
        _, endpoint = live
        assert requests.get(f"{endpoint}/v1/sessions/ghost/events.csv", timeout=5).status_code == 404
        assert requests.get(f"{endpoint}/v1/sessions/ghost/trials/1/trajectory.csv", timeout=5).status_code == 404

    def test_export_409_not_ready(self, live):
        _, endpoint = live
        header, chunks, _ = chunk_payload(b"a" * 64, 16, session="s", trial=1)
        post_envelope(endpoint, header)
        post_envelope(endpoint, chunks[0])
        resp = requests.get(f"{endpoint}/v1/sessions/s/trials/1/trajectory.csv", timeout=5)
        assert resp.status_code == 409


class TestCompletionFlow:
    def test_challenge_then_complete(self, live):
        app, endpoint = live
        drive_complete_session(app, endpoint)
        ch_resp = requests.post(f"{endpoint}/v1/sessions/s1/challenge", timeout=5)
        assert ch_resp.status_code == 200
        ch_body = ch_resp.json()
        assert len(ch_body["nonce"]) == 32
        challenge = Challenge(session_id="s1", nonce=ch_body["nonce"], issued_ts_ms=ch_body["issued_ts_ms"])
        code = derive_code(challenge, MANIFEST.salt)
        ok = requests.post(f"{endpoint}/v1/sessions/s1/complete", json={"code": code}, timeout=5)
        assert ok.status_code == 200
        assert ok.json() == {"verified": True}
        sessions = requests.get(f"{endpoint}/v1/sessions", timeout=5).json()["sessions"]
        assert sessions[0]["state"] == "Completed"

    def test_wrong_code_not_verified(self, live):
        app, endpoint = live
        drive_complete_session(app, endpoint)
        requests.post(f"{endpoint}/v1/sessions/s1/challenge", timeout=5)
        resp = requests.post(f"{endpoint}/v1/sessions/s1/complete", json={"code": "AAAAAAAAAAAA"}, timeout=5)
        assert resp.status_code == 200
        assert resp.json() == {"verified": False}

    def test_challenge_unknown_session_404(self, live):
        _, endpoint = live
        assert requests.post(f"{endpoint}/v1/sessions/ghost/challenge", timeout=5).status_code == 404

    def test_complete_requires_code_string(self, live):
        app, endpoint = live
        drive_complete_session(app, endpoint)
        resp = requests.post(f"{endpoint}/v1/sessions/s1/complete", json={"code": 5}, timeout=5)
        assert resp.status_code == 400


class TestManagementRoutes:
    def test_assign_balanced(self, live):
        _, endpoint = live
        seen = []
        for i in range(3):
            resp = requests.post(f"{endpoint}/v1/mgmt/assign",
                                 json={"participant_id": f"p{i}", "session_id": f"s{i}"}, timeout=5)
            assert resp.status_code == 200
            seen.append(resp.json()["treatment"])
        assert sorted(seen) == ["A", "B", "Control"]

    def test_assign_duplicate_409(self, live):
        _, endpoint = live
        requests.post(f"{endpoint}/v1/mgmt/assign", json={"participant_id": "p1"}, timeout=5)
        resp = requests.post(f"{endpoint}/v1/mgmt/assign", json={"participant_id": "p1"}, timeout=5)
        assert resp.status_code == 409

    def test_assign_requires_participant_id(self, live):
        _, endpoint = live
        resp = requests.post(f"{endpoint}/v1/mgmt/assign", json={}, timeout=5)
        assert resp.status_code == 400

    def test_verify_and_reward_end_to_end(self, live):
        app, endpoint = live
        drive_complete_session(app, endpoint, start=0, end=600_000)  # 10 min -> bonus
        ch_body = requests.post(f"{endpoint}/v1/sessions/s1/challenge", timeout=5).json()
        challenge = Challenge(session_id="s1", nonce=ch_body["nonce"], issued_ts_ms=ch_body["issued_ts_ms"])
        code = derive_code(challenge, MANIFEST.salt)
        resp = requests.post(f"{endpoint}/v1/mgmt/sessions/s1/verify", json={"code": code}, timeout=5)
        assert resp.status_code == 200
        body = resp.json()
        assert body["verified"] is True
        assert body["reward"]["total_usd"] == "5.50"
        again = requests.post(f"{endpoint}/v1/mgmt/sessions/s1/verify", json={"code": code}, timeout=5)
        assert again.status_code == 200
        assert again.json() == {"verified": False, "reason": "already_rewarded"}
        participants = requests.get(f"{endpoint}/v1/mgmt/participants", timeout=5).json()["participants"]
        assert participants[0]["rewarded_usd"] == "5.50"

    def test_verify_unknown_session_404(self, live):
        _, endpoint = live
        resp = requests.post(f"{endpoint}/v1/mgmt/sessions/ghost/verify", json={"code": "X"}, timeout=5)
        assert resp.status_code == 404

    def test_funnel_route(self, live):
        app, endpoint = live
        post_envelope(endpoint, event_envelope(
            "s1", "onboarding_pass", {"os": "Linux", "browser": "Chrome"}, ts_ms=1))
        post_envelope(endpoint, event_envelope(
            "s2", "onboarding_fail", {"os": "Windows 10", "browser": "Safari"}, ts_ms=1))
        funnel = requests.get(f"{endpoint}/v1/mgmt/funnel", timeout=5).json()
        assert funnel["total"]["accessed"] == 2
        assert funnel["total"]["capable"] == 1
        cells = {(c["os"], c["browser"]) for c in funnel["cells"]}
        assert cells == {("Linux", "Chrome"), ("Windows 10", "Safari")}

    def test_mgmt_health_route(self, live):
        _, endpoint = live
        body = requests.get(f"{endpoint}/v1/mgmt/health", timeout=5).json()
        assert body["targets"][0]["state"] == "Healthy"
        assert body["alarms_on_record"] == 0


class TestStatic:
    def test_static_serving_and_traversal_guard(self, tmp_path):
        (tmp_path / "index.html").write_text("<h1>dash</h1>")
        (tmp_path / "config.json").write_text('{"endpoint": "x"}')
        app = ServiceApp(MANIFEST, static_dir=str(tmp_path))
        with ServerThread(app) as srv:
            root = requests.get(f"{srv.endpoint}/ui/", timeout=5)
            assert root.status_code == 200
            assert "dash" in root.text
            cfg = requests.get(f"{srv.endpoint}/ui/config.json", timeout=5)
            assert cfg.headers["Content-Type"] == "application/json"
            sneaky = requests.get(f"{srv.endpoint}/ui/../../etc/passwd", timeout=5)
            assert sneaky.status_code == 404

    def test_no_static_configured_404(self, live):
        _, endpoint = live
        assert requests.get(f"{endpoint}/ui/", timeout=5).status_code == 404

    def test_static_dir_may_appear_after_startup(self, tmp_path):
        # deploy populates the directory only after the service is up,
        # so a not-yet-existing path must 404 and then start serving
        late = tmp_path / "static"
        app = ServiceApp(MANIFEST, static_dir=str(late))
        with ServerThread(app) as srv:
            assert requests.get(f"{srv.endpoint}/ui/", timeout=5).status_code == 404
            late.mkdir()
            (late / "index.html").write_text("<h1>late</h1>")
            ok = requests.get(f"{srv.endpoint}/ui/", timeout=5)
            assert ok.status_code == 200
            assert "late" in ok.text


class TestRegistrationMode:
    def test_unregistered_session_rejected(self):
        app = ServiceApp(MANIFEST, require_registration=True)
        with ServerThread(app) as srv:
            resp = post_envelope(srv.endpoint, event_envelope("stranger", "tick", {}, ts_ms=1))
            assert resp.status_code == 404
            app.assembly.register_session("known")
            ok = post_envelope(srv.endpoint, event_envelope("known", "tick", {}, ts_ms=1))
            assert ok.status_code == 200
