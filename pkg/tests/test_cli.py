"""Command line: parsing, exit codes, and the full operator sequence.

The pipeline tests here deploy a real local service (child process),
run a small cohort over HTTP, and tear it down, mirroring how an
operator drives the tool.
"""

import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest
import requests

from exac.cli import CliConfig, main, parse_args, resolve_endpoint
from exac.errors import UsageError

SIM_N = 30
SIM_SEED = 7  # gives every treatment at least 2 completed participants at n=30


def run_cli(capsys, *argv):
    rc = main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


class TestParse:
    def test_deploy_manifest_flag(self):
        command, cfg = parse_args(["deploy", "--manifest", "x.json"])
        assert command == "deploy"
        assert cfg.manifest == "x.json"
        assert cfg.state == "exac.state.json"

    def test_simulate_n_and_seed(self):
        command, cfg = parse_args(["simulate", "-n", "462", "--seed", "7"])
        assert command == "simulate"
        assert cfg.participants == 462
        assert cfg.seed == 7

    def test_long_participants_flag(self):
        _, cfg = parse_args(["simulate", "--participants", "9"])
        assert cfg.participants == 9

    def test_verify_positionals(self):
        command, cfg = parse_args(["verify", "s0001", "ABCDEF123456"])
        assert command == "verify"
        assert cfg.session == "s0001"
        assert cfg.code == "ABCDEF123456"

    def test_unknown_flag_raises_usage(self, capsys):
        with pytest.raises(UsageError):
            parse_args(["deploy", "--bogus"])
        capsys.readouterr()

    def test_unknown_flag_exit_2(self, capsys):
        rc, _, _ = run_cli(capsys, "deploy", "--bogus")
        assert rc == 2

    def test_missing_command_exit_2(self, capsys):
        rc, _, _ = run_cli(capsys)
        assert rc == 2

    def test_bad_endpoint_url_exit_2(self, capsys):
        rc, _, err = run_cli(capsys, "monitor", "--endpoint", "not-a-url")
        assert rc == 2
        assert "endpoint" in err

    def test_monitor_interval_flag(self):
        _, cfg = parse_args(["monitor", "--interval-ms", "250", "--ticks", "3"])
        assert cfg.interval_ms == 250
        assert cfg.ticks == 3


class TestEndpointResolution:
    def test_flag_wins(self, monkeypatch):
        monkeypatch.setenv("EXAC_ENDPOINT", "http://env:1")
        cfg = CliConfig(endpoint="http://flag:2/")
        assert resolve_endpoint(cfg) == "http://flag:2"

    def test_env_beats_default(self, monkeypatch, tmp_path):
        monkeypatch.setenv("EXAC_ENDPOINT", "http://env:1")
        cfg = CliConfig(state=str(tmp_path / "missing.json"))
        assert resolve_endpoint(cfg) == "http://env:1"

    def test_default_without_sources(self, monkeypatch, tmp_path):
        monkeypatch.delenv("EXAC_ENDPOINT", raising=False)
        cfg = CliConfig(state=str(tmp_path / "missing.json"))
        assert resolve_endpoint(cfg) == "http://127.0.0.1:8787"


class TestMonitorDownService:
    def test_alarm_once_and_exit_zero(self, capsys):
        rc, out, err = run_cli(
            capsys, "monitor", "--endpoint", "http://127.0.0.1:1",
            "--interval-ms", "5", "--ticks", "5")
        assert rc == 0
        assert err.count("ALARM") == 1
        assert "\a" in err
        lines = [json.loads(l) for l in out.strip().splitlines()]
        assert len(lines) == 5
        assert [l["health"]["alarm"] for l in lines] == [False, False, True, False, False]
        assert lines[2]["health"]["state"] == "Unreachable"
        assert all(l["funnel"] is None for l in lines)


# -- full operator sequence ----------------------------------------------------


@pytest.fixture(scope="module")
def deployment(tmp_path_factory):
    """deploy + simulate once; hand tests the workdir and endpoint."""
    work = tmp_path_factory.mktemp("cli_pipeline")
    state = str(work / "exac.state.json")
    manifest = str(work / "experiment.json")
    base = ["--state", state, "--manifest", manifest]
    rc = main(["deploy", *base])
    assert rc == 0, "deploy failed"
    endpoint = resolve_endpoint(CliConfig(state=state))
    try:
        rc = main(["simulate", *base, "-n", str(SIM_N), "--seed", str(SIM_SEED)])
        assert rc == 0, "simulate failed"
        yield {"work": work, "state": state, "manifest": manifest,
               "base": base, "endpoint": endpoint}
    finally:
        main(["teardown", *base])  # idempotent; stops the child service


def _sessions(endpoint):
    return requests.get(endpoint + "/v1/sessions", timeout=10).json()["sessions"]


class TestPipeline:
    def test_deploy_again_no_changes(self, deployment, capsys):
        rc, out, err = run_cli(capsys, "deploy", *deployment["base"])
        assert rc == 0
        assert "no changes" in err
        body = json.loads(out)
        assert body["message"] == "no changes"
        assert body["actions"] == []
        assert body["endpoint"] == deployment["endpoint"]

    def test_deploy_wrote_registry_and_manifest(self, deployment):
        assert (deployment["work"] / "registry.jsonl").exists()
        assert (deployment["work"] / "experiment.json").exists()
        assert (deployment["work"] / "static" / "config.json").exists()

    def test_simulate_counts_funnel(self, deployment):
        funnel = requests.get(
            deployment["endpoint"] + "/v1/mgmt/funnel", timeout=10).json()
        assert funnel["total"]["accessed"] == SIM_N
        assert funnel["total"]["capable"] > funnel["total"]["completed"] > 0

    def test_simulate_appends_with_fresh_ids(self, deployment, capsys):
        rc, out, _ = run_cli(capsys, "simulate", *deployment["base"],
                             "-n", "3", "--seed", "99")
        assert rc == 0
        body = json.loads(out)
        assert body["id_offset"] == SIM_N
        ids = {s["session_id"] for s in _sessions(deployment["endpoint"])}
        assert len(ids) == SIM_N + 3
        assert f"s{SIM_N + 3:04d}" in ids

    def test_export_matches_bucket_bytes(self, deployment, capsys):
        out_dir = deployment["work"] / "exported"
        rc, out, _ = run_cli(capsys, "export", *deployment["base"],
                             "--out", str(out_dir))
        assert rc == 0
        body = json.loads(out)
        assert body["sessions"] >= SIM_N
        assert body["trials"] > 0
        bucket = deployment["work"] / "bucket" / "sessions"
        compared = 0
        for sid_dir in (out_dir / "sessions").iterdir():
            for f in sid_dir.glob("trial_*.csv"):
                persisted = bucket / sid_dir.name / f.name
                assert persisted.exists()
                assert f.read_bytes() == persisted.read_bytes()
                compared += 1
        assert compared == body["trials"]

    def test_monitor_healthy_with_funnel(self, deployment, capsys):
        rc, out, err = run_cli(capsys, "monitor", *deployment["base"],
                               "--interval-ms", "5", "--ticks", "2")
        assert rc == 0
        assert "ALARM" not in err
        lines = [json.loads(l) for l in out.strip().splitlines()]
        assert all(l["health"]["state"] == "Healthy" for l in lines)
        assert lines[0]["funnel"]["total"]["accessed"] >= SIM_N

    def test_verify_pays_once_then_rejects(self, deployment, capsys):
        completed = [s for s in _sessions(deployment["endpoint"])
                     if s["state"] == "Completed" and s["last_code"]]
        assert completed, "cohort produced no completed sessions"
        target = completed[0]
        rc, out, _ = run_cli(capsys, "verify", *deployment["base"],
                             target["session_id"], target["last_code"])
        assert rc == 0
        body = json.loads(out)
        assert body["verified"] is True
        assert "total_usd" in body["reward"]
        rc, out, _ = run_cli(capsys, "verify", *deployment["base"],
                             target["session_id"], target["last_code"])
        assert rc == 0
        body = json.loads(out)
        assert body["verified"] is False
        assert body["reason"] == "already_rewarded"

    def test_verify_unknown_session_exit_1(self, deployment, capsys):
        rc, out, err = run_cli(capsys, "verify", *deployment["base"],
                               "never-seen", "AAAAAAAAAAAA")
        assert rc == 1
        assert json.loads(out)["reason"] == "unknown_session"
        assert "status 404" in err

    def test_analyze_writes_report(self, deployment, capsys):
        out_dir = deployment["work"] / "analysis"
        rc, out, _ = run_cli(capsys, "analyze", *deployment["base"],
                             "--out", str(out_dir))
        assert rc == 0
        body = json.loads(out)
        assert body["agreement"] is True
        assert (out_dir / "report.json").exists()
        assert (out_dir / "fit_all.json").exists()
        tests = body["cohorts"][0]["tests"]
        assert set(tests) >= {"A", "B"}

    def test_teardown_then_analyze_from_bucket(self, deployment, capsys):
        rc, out, _ = run_cli(capsys, "teardown", *deployment["base"])
        assert rc == 0
        assert json.loads(out)["message"] == "torn down"
        with pytest.raises(requests.RequestException):
            requests.get(deployment["endpoint"] + "/v1/health", timeout=2)
        out_dir = deployment["work"] / "analysis_offline"
        rc, out, err = run_cli(capsys, "analyze", *deployment["base"],
                               "--out", str(out_dir))
        assert rc == 0
        assert "bucket" in err
        assert (out_dir / "report.json").exists()
        rc, out, _ = run_cli(capsys, "teardown", *deployment["base"])
        assert rc == 0
        assert json.loads(out)["message"] == "no changes"


class TestServe:
    def test_foreground_serve_and_clean_interrupt(self, tmp_path):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        manifest = tmp_path / "experiment.json"
        manifest.write_text(json.dumps({"name": "serve-test", "salt": "s"}))
        proc = subprocess.Popen(
            [sys.executable, "-m", "exac.cli", "serve",
             "--manifest", str(manifest),
             "--state", str(tmp_path / "exac.state.json"),
             "--endpoint", f"http://127.0.0.1:{port}"],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
            cwd=str(tmp_path))
        try:
            deadline = time.monotonic() + 20
            last = None
            while time.monotonic() < deadline:
                try:
                    resp = requests.get(f"http://127.0.0.1:{port}/v1/health", timeout=1)
                    if resp.status_code == 200:
                        break
                except requests.RequestException as exc:
                    last = exc
                assert proc.poll() is None, "serve exited before listening"
                time.sleep(0.05)
            else:
                pytest.fail(f"serve never became healthy: {last}")
            proc.send_signal(signal.SIGINT)
            assert proc.wait(timeout=15) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait(timeout=10)

    def test_serve_without_manifest_exit_1(self, tmp_path, capsys, monkeypatch):
        monkeypatch.chdir(tmp_path)
        rc, _, err = run_cli(capsys, "serve", "--manifest", "absent.json",
                             "--state", str(tmp_path / "exac.state.json"))
        assert rc == 1
        assert "manifest not found" in err
