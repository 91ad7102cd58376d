"""Experiment manifest: the single versionable description of a study.

The manifest fixes everything the rest of the pipeline needs to agree
on: treatment labels, trial count, sampling period, chunk size, the
completion-code salt, and the payment rule.  Parsing is strict (unknown
fields are schema errors) so a typo in a config cannot silently change
an experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

from exac.errors import InvariantError, SchemaError

# The ten design-review questions every experiment description answers.
CHECKLIST_KEYS = (
    "domain_specificity",
    "ecological_validity",
    "technical_feasibility",
    "user_feasibility",
    "user_motivation",
    "task_adaptability",
    "performance_quantification",
    "immersive_capacities",
    "training_feasibility",
    "predictable_pitfalls",
)


@dataclass(frozen=True)
class ProtocolChecklist:
    """Answers to the ten standing design questions, keyed by CHECKLIST_KEYS."""

    entries: dict = field(default_factory=dict)

    def missing_keys(self) -> list[str]:
        return [k for k in CHECKLIST_KEYS if k not in self.entries]


@dataclass(frozen=True)
class ExperimentManifest:
    name: str
    salt: str
    treatments: tuple = ("Control", "A", "B")
    trials_per_participant: int = 6
    sample_period_ms: int = 20
    chunk_size_bytes: int = 4300
    reward_base_usd: Decimal = Decimal("4.50")
    reward_bonus_usd: Decimal = Decimal("1.00")
    bonus_threshold_min: float = 20.0
    protocol_doc: ProtocolChecklist | None = None


@dataclass(frozen=True)
class ServiceRequirement:
    name: str
    kind: str  # "storage" | "compute" | "static_site" | "recruitment"
    params: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


_MANIFEST_FIELDS = {
    "name",
    "salt",
    "treatments",
    "trials_per_participant",
    "sample_period_ms",
    "chunk_size_bytes",
    "reward_base_usd",
    "reward_bonus_usd",
    "bonus_threshold_min",
    "protocol_doc",
}

SERVICE_KINDS = ("storage", "compute", "static_site", "recruitment")


def _load_object(data, what: str) -> dict:
    if isinstance(data, (bytes, str)):
        try:
            data = json.loads(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise SchemaError(f"{what} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise SchemaError(f"{what} must be a JSON object")
    return data


def _string(obj, key: str, path: str) -> str:
    v = obj[key]
    if not isinstance(v, str):
        raise SchemaError("must be a string", f"{path}.{key}")
    return v


def _positive_int(obj, key: str, path: str) -> int:
    v = obj[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise SchemaError("must be an integer >= 1", f"{path}.{key}")
    return v


def _money(obj, key: str, path: str) -> Decimal:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise SchemaError("must be a number", f"{path}.{key}")
    try:
        d = Decimal(str(v))
    except InvalidOperation:
        raise SchemaError("must be a number", f"{path}.{key}") from None
    if d < 0:
        raise InvariantError(f"{path}.{key} must be >= 0")
    return d.quantize(Decimal("0.01"))


def parse_manifest(data) -> ExperimentManifest:
    """Parse manifest JSON (bytes/str/dict).  Strict: unknown fields fail."""
    obj = _load_object(data, "manifest")
    for k in obj:
        if k not in _MANIFEST_FIELDS:
            raise SchemaError("unknown field", f"manifest.{k}")
    for k in ("name", "salt"):
        if k not in obj:
            raise SchemaError(f"missing field {k!r}", "manifest")

    name = _string(obj, "name", "manifest")
    if not name:
        raise InvariantError("manifest.name must be non-empty")
    salt = _string(obj, "salt", "manifest")
    if not salt:
        raise InvariantError("manifest.salt must be non-empty")

    kwargs = {}
    if "treatments" in obj:
        t = obj["treatments"]
        if not isinstance(t, list) or not all(isinstance(x, str) for x in t):
            raise SchemaError("must be a list of strings", "manifest.treatments")
        if not t:
            raise InvariantError("manifest.treatments must be non-empty")
        if len(set(t)) != len(t):
            raise InvariantError("manifest.treatments must be unique")
        kwargs["treatments"] = tuple(t)
    if "trials_per_participant" in obj:
        kwargs["trials_per_participant"] = _positive_int(obj, "trials_per_participant", "manifest")
    if "sample_period_ms" in obj:
        kwargs["sample_period_ms"] = _positive_int(obj, "sample_period_ms", "manifest")
    if "chunk_size_bytes" in obj:
        v = _positive_int(obj, "chunk_size_bytes", "manifest")
        if v < 64:
            raise InvariantError(f"manifest.chunk_size_bytes must be >= 64, got {v}")
        kwargs["chunk_size_bytes"] = v
    if "reward_base_usd" in obj:
        kwargs["reward_base_usd"] = _money(obj, "reward_base_usd", "manifest")
    if "reward_bonus_usd" in obj:
        kwargs["reward_bonus_usd"] = _money(obj, "reward_bonus_usd", "manifest")
    if "bonus_threshold_min" in obj:
        v = obj["bonus_threshold_min"]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
            raise SchemaError("must be a positive number", "manifest.bonus_threshold_min")
        kwargs["bonus_threshold_min"] = float(v)
    if "protocol_doc" in obj and obj["protocol_doc"] is not None:
        doc = obj["protocol_doc"]
        if not isinstance(doc, dict):
            raise SchemaError("must be an object", "manifest.protocol_doc")
        for k, v in doc.items():
            if k not in CHECKLIST_KEYS:
                raise SchemaError("unknown field", f"manifest.protocol_doc.{k}")
            if not isinstance(v, str):
                raise SchemaError("must be a string", f"manifest.protocol_doc.{k}")
            if not v.strip():
                raise InvariantError(f"manifest.protocol_doc.{k} must be non-empty")
        kwargs["protocol_doc"] = ProtocolChecklist(dict(doc))

    return ExperimentManifest(name=name, salt=salt, **kwargs)


def manifest_to_json(m: ExperimentManifest) -> dict:
    obj = {
        "name": m.name,
        "salt": m.salt,
        "treatments": list(m.treatments),
        "trials_per_participant": m.trials_per_participant,
        "sample_period_ms": m.sample_period_ms,
        "chunk_size_bytes": m.chunk_size_bytes,
        "reward_base_usd": str(m.reward_base_usd),
        "reward_bonus_usd": str(m.reward_bonus_usd),
        "bonus_threshold_min": m.bonus_threshold_min,
    }
    if m.protocol_doc is not None:
        obj["protocol_doc"] = dict(m.protocol_doc.entries)
    return obj


def parse_services(data) -> list[ServiceRequirement]:
    """Parse the service requirement list (the `services.json` document)."""
    if isinstance(data, (bytes, str)):
        try:
            data = json.loads(data)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise SchemaError(f"services document is not valid JSON: {exc}")
    if not isinstance(data, list):
        raise SchemaError("services document must be a JSON array")
    out = []
    seen = set()
    for i, item in enumerate(data):
        path = f"services[{i}]"
        if not isinstance(item, dict):
            raise SchemaError("must be an object", path)
        for k in item:
            if k not in ("name", "kind", "params"):
                raise SchemaError("unknown field", f"{path}.{k}")
        for k in ("name", "kind"):
            if k not in item:
                raise SchemaError(f"missing field {k!r}", path)
        name = _string(item, "name", path)
        kind = _string(item, "kind", path)
        if kind not in SERVICE_KINDS:
            raise SchemaError(f"kind must be one of {SERVICE_KINDS}", f"{path}.kind")
        params = item.get("params", {})
        if not isinstance(params, dict):
            raise SchemaError("must be an object", f"{path}.params")
        if name in seen:
            raise InvariantError(f"duplicate service name {name!r}")
        seen.add(name)
        out.append(ServiceRequirement(name=name, kind=kind, params=dict(params)))
    return out


def validate_manifest(m: ExperimentManifest, services=()) -> ValidationReport:
    """Cross-check a manifest against its service requirements.

    Missing checklist answers are warnings (the experiment can still run);
    missing storage or compute capability is an error (it cannot).
    """
    report = ValidationReport()
    if m.protocol_doc is None:
        for k in CHECKLIST_KEYS:
            report.warnings.append(f"protocol checklist answer missing: {k}")
    else:
        for k in m.protocol_doc.missing_keys():
            report.warnings.append(f"protocol checklist answer missing: {k}")
    kinds = {s.kind for s in services}
    if "storage" not in kinds:
        report.errors.append("no storage service requirement declared")
    if "compute" not in kinds:
        report.errors.append("no compute service requirement declared")
    return report
