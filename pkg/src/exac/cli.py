"""Operator command line for the experiment pipeline.

Commands mirror the run-book order: deploy, serve, simulate, monitor,
verify, export, analyze, teardown.  Machine-readable results go to
standard output as JSON; progress and diagnostics go to standard error.
Exit codes: 0 success, 1 operational failure, 2 usage error.

Every command is safe to re-run except simulate, which appends new
sessions to the service it targets.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import dataclass
from urllib.parse import urlsplit

import requests

from exac.errors import ExacError, TransportError, UsageError
from exac.lifecycle import LocalExecutor, StateLock, apply, load_state, plan, teardown
from exac.manifest import ServiceRequirement, parse_manifest, validate_manifest

DEFAULT_ENDPOINT = "http://127.0.0.1:8787"
HEALTH_THRESHOLD = 3

_STARTER_MANIFEST = {
    "name": "wayfinding-demo",
    "salt": "change-this-salt-before-recruiting",
    "treatments": ["Control", "A", "B"],
    "trials_per_participant": 6,
    "sample_period_ms": 20,
    "chunk_size_bytes": 4300,
    "reward_base_usd": "4.50",
    "reward_bonus_usd": "1.00",
    "bonus_threshold_min": 20.0,
}


@dataclass
class CliConfig:
    manifest: str = "experiment.json"
    state: str = "exac.state.json"
    endpoint: str = ""
    registry: str = ""
    out: str = "out"
    seed: int = 0
    participants: int = 24
    parallelism: int = 8
    interval_ms: int = 1000
    ticks: int = 0
    session: str = ""
    code: str = ""


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", default="experiment.json",
                        help="experiment manifest path (default experiment.json)")
    common.add_argument("--state", default="exac.state.json",
                        help="deployment state file (default exac.state.json)")
    common.add_argument("--endpoint", default="",
                        help="service URL (default: EXAC_ENDPOINT, then the state file)")
    common.add_argument("--registry", default="",
                        help="participant registry journal (default: next to the state file)")
    common.add_argument("--out", default="out",
                        help="output directory for export/analyze (default out)")
    common.add_argument("--seed", type=int, default=0, help="master RNG seed")

    parser = argparse.ArgumentParser(
        prog="exac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("deploy", parents=[common],
                   help="create (or resume creating) the deployment")
    sub.add_parser("serve", parents=[common],
                   help="run the assembly service in the foreground")
    sim = sub.add_parser("simulate", parents=[common],
                         help="run a cohort of simulated participants")
    sim.add_argument("-n", "--participants", type=int, default=24,
                     help="cohort size (default 24)")
    sim.add_argument("--parallelism", type=int, default=8,
                     help="concurrent sessions (default 8)")
    mon = sub.add_parser("monitor", parents=[common],
                         help="poll service health and funnel until interrupted")
    mon.add_argument("--interval-ms", type=int, default=1000, dest="interval_ms",
                     help="poll interval in milliseconds (default 1000)")
    mon.add_argument("--ticks", type=int, default=0,
                     help="stop after this many polls (default: run until interrupted)")
    ver = sub.add_parser("verify", parents=[common],
                         help="verify a completion code and authorize the reward")
    ver.add_argument("session", help="session id")
    ver.add_argument("code", help="completion code the participant submitted")
    sub.add_parser("export", parents=[common],
                   help="download events and trajectory CSVs for every session")
    sub.add_parser("analyze", parents=[common],
                   help="compute metrics, fit the model, write the report")
    sub.add_parser("teardown", parents=[common],
                   help="destroy deployed resources (data directories are kept)")
    return parser


def parse_args(argv) -> tuple:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            raise UsageError("") from None  # argparse printed the message
        raise
    if ns.endpoint:
        url = urlsplit(ns.endpoint)
        if url.scheme not in ("http", "https") or not url.netloc:
            raise UsageError(f"--endpoint must be an http(s) URL, got {ns.endpoint!r}")
    cfg = CliConfig(
        manifest=ns.manifest,
        state=ns.state,
        endpoint=ns.endpoint,
        registry=ns.registry,
        out=ns.out,
        seed=ns.seed,
        participants=getattr(ns, "participants", 24),
        parallelism=getattr(ns, "parallelism", 8),
        interval_ms=getattr(ns, "interval_ms", 1000),
        ticks=getattr(ns, "ticks", 0),
        session=getattr(ns, "session", ""),
        code=getattr(ns, "code", ""),
    )
    return ns.command, cfg


# -- plumbing -------------------------------------------------------------------


def _diag(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _workdir(cfg: CliConfig) -> str:
    return os.path.dirname(os.path.abspath(cfg.state))


def _registry_path(cfg: CliConfig) -> str:
    return cfg.registry or os.path.join(_workdir(cfg), "registry.jsonl")


def resolve_endpoint(cfg: CliConfig) -> str:
    """--endpoint flag, then EXAC_ENDPOINT, then the state file, then default."""
    if cfg.endpoint:
        return cfg.endpoint.rstrip("/")
    env = os.environ.get("EXAC_ENDPOINT", "")
    if env:
        return env.rstrip("/")
    state = load_state(cfg.state)
    svc = state.by_kind("assembly_service")
    if svc is not None and svc.status == "created":
        ep = svc.attrs.get("endpoint", "")
        if ep:
            return ep.rstrip("/")
    return DEFAULT_ENDPOINT


def _manifest_candidates(cfg: CliConfig) -> list:
    primary = cfg.manifest
    fallback = os.path.join(_workdir(cfg), "experiment.json")
    out = [primary]
    if os.path.abspath(fallback) != os.path.abspath(primary):
        out.append(fallback)
    return out


def _read_manifest(cfg: CliConfig):
    for path in _manifest_candidates(cfg):
        if os.path.exists(path):
            with open(path, "rb") as fh:
                return parse_manifest(fh.read())
    raise ExacError(
        f"manifest not found at {cfg.manifest!r} (run deploy first, or pass --manifest)")


def _load_or_create_manifest(cfg: CliConfig):
    if not os.path.exists(cfg.manifest):
        directory = os.path.dirname(os.path.abspath(cfg.manifest))
        os.makedirs(directory, exist_ok=True)
        with open(cfg.manifest, "w", encoding="utf-8") as fh:
            json.dump(_STARTER_MANIFEST, fh, indent=2)
            fh.write("\n")
        _diag(f"wrote starter manifest to {cfg.manifest} (edit the salt before recruiting)")
    with open(cfg.manifest, "rb") as fh:
        return parse_manifest(fh.read())


def _default_services() -> list:
    return [
        ServiceRequirement(name="bucket", kind="storage"),
        ServiceRequirement(name="assembly", kind="compute"),
        ServiceRequirement(name="operator-ui", kind="static_site"),
        ServiceRequirement(name="recruiting", kind="recruitment"),
    ]


def _get(endpoint: str, path: str, timeout_s: float = 10.0) -> requests.Response:
    try:
        return requests.get(endpoint + path, timeout=timeout_s)
    except requests.RequestException as exc:
        raise TransportError(f"GET {path}: {exc}") from exc


def _get_json(endpoint: str, path: str) -> dict:
    resp = _get(endpoint, path)
    if resp.status_code != 200:
        raise TransportError(f"GET {path}: status {resp.status_code}")
    return resp.json()


# -- commands -------------------------------------------------------------------


def cmd_deploy(cfg: CliConfig) -> int:
    manifest = _load_or_create_manifest(cfg)
    report = validate_manifest(manifest, _default_services())
    for w in report.warnings:
        _diag(f"warning: {w}")
    if not report.ok:
        for e in report.errors:
            _diag(f"error: {e}")
        return 1
    with StateLock(cfg.state):
        state = load_state(cfg.state)
        actions = plan(manifest, state)
        if not actions:
            svc = state.by_kind("assembly_service")
            _diag("no changes")
            _emit({"message": "no changes", "actions": [],
                   "endpoint": svc.attrs.get("endpoint", "") if svc else ""})
            return 0
        executor = LocalExecutor(manifest, _workdir(cfg),
                                 registry_path=_registry_path(cfg))
        for act in actions:
            _diag(f"creating {act.kind}")
        apply(actions, state, executor, cfg.state)
    svc = state.by_kind("assembly_service")
    _emit({
        "message": "deployed",
        "actions": [f"create {a.kind}" for a in actions],
        "endpoint": svc.attrs.get("endpoint", "") if svc else "",
        "state": os.path.abspath(cfg.state),
    })
    return 0


def cmd_serve(cfg: CliConfig) -> int:
    from exac.server import main as server_main

    for path in _manifest_candidates(cfg):
        if os.path.exists(path):
            manifest_path = path
            break
    else:
        raise ExacError(f"manifest not found at {cfg.manifest!r}")
    url = urlsplit(resolve_endpoint(cfg))
    workdir = _workdir(cfg)
    argv = [
        "--manifest", manifest_path,
        "--bucket", os.path.join(workdir, "bucket"),
        "--registry", _registry_path(cfg),
        "--host", url.hostname or "127.0.0.1",
        "--port", str(url.port or 8787),
        "--seed", str(cfg.seed),
    ]
    static = os.path.join(workdir, "static")
    if os.path.isdir(static):
        argv += ["--static", static]
    return server_main(argv)


def cmd_simulate(cfg: CliConfig) -> int:
    from exac.clientsim import HttpTransport, SimAgentConfig, run_cohort

    manifest = _read_manifest(cfg)
    endpoint = resolve_endpoint(cfg)
    existing = len(_get_json(endpoint, "/v1/sessions")["sessions"])
    if existing:
        _diag(f"service already holds {existing} sessions; appending after them")
    sim = SimAgentConfig(seed=cfg.seed)
    _diag(f"simulating {cfg.participants} sessions against {endpoint} "
          f"(parallelism {cfg.parallelism}, seed {cfg.seed})")
    outcomes, report = run_cohort(
        cfg.participants, sim, manifest, HttpTransport(endpoint),
        parallelism=cfg.parallelism, id_offset=existing)
    _emit({
        "sessions": cfg.participants,
        "id_offset": existing,
        "capable": sum(o.passed_onboarding for o in outcomes),
        "completed": sum(o.completed for o in outcomes),
        "verified": sum(o.verified for o in outcomes),
        "report": report.to_json(),
    })
    return 0


def cmd_monitor(cfg: CliConfig) -> int:
    from exac.management import poll_health

    endpoint = resolve_endpoint(cfg)

    def bell(status) -> None:
        # alarm is a diagnostic: terminal bell plus a visible line
        sys.stderr.write(f"\aALARM {status.target} unreachable "
                         f"({status.consecutive_failures} consecutive failures)\n")
        sys.stderr.flush()

    _diag(f"monitoring {endpoint} every {cfg.interval_ms} ms (interrupt to stop)")
    statuses = poll_health(
        [endpoint], interval_ms=cfg.interval_ms, threshold=HEALTH_THRESHOLD,
        max_ticks=cfg.ticks if cfg.ticks > 0 else None, on_alarm=bell)
    for status in statuses:
        funnel = None
        if status.state == "Healthy":
            try:
                funnel = _get_json(endpoint, "/v1/mgmt/funnel")
            except (TransportError, ValueError):
                funnel = None
        print(json.dumps({"health": status.to_json(), "funnel": funnel}), flush=True)
    return 0


def cmd_verify(cfg: CliConfig) -> int:
    endpoint = resolve_endpoint(cfg)
    try:
        resp = requests.post(
            f"{endpoint}/v1/mgmt/sessions/{cfg.session}/verify",
            json={"code": cfg.code}, timeout=10)
    except requests.RequestException as exc:
        raise TransportError(f"verify: {exc}") from exc
    try:
        body = resp.json()
    except ValueError:
        body = {"error": resp.text[:200]}
    _emit(body)
    if resp.status_code == 200:
        return 0
    _diag(f"verify failed: status {resp.status_code}")
    return 1


def _fetch_trials(cfg: CliConfig, endpoint: str):
    """Yield (session summary, trial number, csv bytes) for every
    reconstructed trial the service can export."""
    manifest_trials = 6
    for path in _manifest_candidates(cfg):
        if os.path.exists(path):
            with open(path, "rb") as fh:
                manifest_trials = parse_manifest(fh.read()).trials_per_participant
            break
    sessions = _get_json(endpoint, "/v1/sessions")["sessions"]
    for s in sessions:
        sid = s["session_id"]
        bound = max(int(s.get("trials_total", 0)), manifest_trials)
        for k in range(1, bound + 1):
            resp = _get(endpoint, f"/v1/sessions/{sid}/trials/{k}/trajectory.csv")
            if resp.status_code == 200:
                yield s, k, resp.content


def cmd_export(cfg: CliConfig) -> int:
    endpoint = resolve_endpoint(cfg)
    sessions = _get_json(endpoint, "/v1/sessions")["sessions"]
    base = os.path.join(cfg.out, "sessions")
    files = 0
    trials = 0
    for s in sessions:
        sid = s["session_id"]
        d = os.path.join(base, sid)
        os.makedirs(d, exist_ok=True)
        resp = _get(endpoint, f"/v1/sessions/{sid}/events.csv")
        if resp.status_code == 200:
            with open(os.path.join(d, "events.csv"), "wb") as fh:
                fh.write(resp.content)
            files += 1
    for s, k, content in _fetch_trials(cfg, endpoint):
        d = os.path.join(base, s["session_id"])
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, f"trial_{k}.csv"), "wb") as fh:
            fh.write(content)
        files += 1
        trials += 1
    _emit({"sessions": len(sessions), "trials": trials, "files": files,
           "out": os.path.abspath(base)})
    return 0


def cmd_analyze(cfg: CliConfig) -> int:
    from exac.analysis import compute_metrics, session_report

    endpoint = resolve_endpoint(cfg)
    sources = []
    try:
        for s, k, content in _fetch_trials(cfg, endpoint):
            sources.append((f"{s['session_id']}/trial_{k}.csv", content))
        origin = endpoint
    except TransportError:
        # service is down (possibly torn down); fall back to the bucket dir
        state = load_state(cfg.state)
        bucket = state.by_kind("storage_bucket")
        bucket_dir = (bucket.attrs.get("path", "") if bucket else "") or \
            os.path.join(_workdir(cfg), "bucket")
        sources = sorted(glob.glob(os.path.join(bucket_dir, "sessions", "*", "trial_*.csv")))
        origin = bucket_dir
        _diag(f"service unreachable; reading persisted trials from {bucket_dir}")
    if not sources:
        _diag(f"no reconstructed trials found via {origin}; nothing to analyze")
        return 1
    metrics = compute_metrics(sources)
    report = session_report([("all", metrics)], out_dir=cfg.out)
    _diag(f"analyzed {len(metrics)} trials from {origin}; report in {cfg.out}")
    _emit({
        "out": os.path.abspath(cfg.out),
        "trials": len(metrics),
        "agreement": report["agreement"],
        "cohorts": [{"name": c["name"], "tests": c["tests"]} for c in report["cohorts"]],
    })
    return 0


def cmd_teardown(cfg: CliConfig) -> int:
    if not os.path.exists(cfg.state):
        _diag("no changes")
        _emit({"message": "no changes", "destroyed": []})
        return 0
    try:
        manifest = _read_manifest(cfg)
    except ExacError:
        manifest = parse_manifest(json.dumps(_STARTER_MANIFEST))  # destroy needs no fields
    with StateLock(cfg.state):
        state = load_state(cfg.state)
        created = [r.kind for r in state.resources if r.status == "created"]
        if not created:
            _diag("no changes")
            _emit({"message": "no changes", "destroyed": []})
            return 0
        executor = LocalExecutor(manifest, _workdir(cfg),
                                 registry_path=_registry_path(cfg))
        teardown(state, executor, cfg.state)
    _diag("data directories are kept; only the deployment was destroyed")
    _emit({"message": "torn down", "destroyed": created})
    return 0


_COMMANDS = {
    "deploy": cmd_deploy,
    "serve": cmd_serve,
    "simulate": cmd_simulate,
    "monitor": cmd_monitor,
    "verify": cmd_verify,
    "export": cmd_export,
    "analyze": cmd_analyze,
    "teardown": cmd_teardown,
}


def execute(command: str, cfg: CliConfig) -> int:
    handler = _COMMANDS.get(command)
    if handler is None:
        raise UsageError(f"unknown command {command!r}")
    return handler(cfg)


def main(argv=None) -> int:
    try:
        command, cfg = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        if str(exc):
            _diag(f"usage error: {exc}")
        return 2
    try:
        return execute(command, cfg)
    except KeyboardInterrupt:
        _diag("interrupted")
        return 0
    except UsageError as exc:
        _diag(f"usage error: {exc}")
        return 2
    except ExacError as exc:
        _diag(f"error: {exc}")
        return 1
    except requests.RequestException as exc:
        _diag(f"error: {exc}")
        return 1
    except OSError as exc:
        _diag(f"error: {exc}")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
