"""Dependent-variable construction from exported trajectory CSVs."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

from exac.errors import ParseError

CSV_HEADER = [
    "session_id", "participant_id", "treatment", "trial",
    "t", "x", "y", "z", "yaw", "pitch",
]


@dataclass(frozen=True)
class TrialMetrics:
    participant_id: str
    treatment: str
    trial: int
    path_length_m: float  # sum of Euclidean step distances
    duration_s: float  # t_last - t_first
    sample_count: int

    def to_json(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "treatment": self.treatment,
            "trial": self.trial,
            "path_length_m": self.path_length_m,
            "duration_s": self.duration_s,
            "sample_count": self.sample_count,
        }


def _iter_sources(sources):
    """Yield (name, text) for paths, (name, bytes) pairs, or (name, str)."""
    for src in sources:
        if isinstance(src, (tuple, list)) and len(src) == 2:
            name, data = src
            if isinstance(data, bytes):
                data = data.decode("utf-8")
            yield str(name), data
        else:
            path = os.fspath(src)
            with open(path, "r", encoding="utf-8") as fh:
                yield path, fh.read()


def compute_metrics(sources) -> list:
    """One TrialMetrics per (participant, trial) across all CSV sources.

    Sources are file paths or (name, bytes/str) pairs in assembly's
    export format.  Deterministic: output sorted by participant, trial,
    session.  Malformed rows raise ParseError naming the file and line.
    """
    groups: dict = {}  # (participant, trial, session) -> [(t, x, y, z)]
    meta: dict = {}
    for name, text in _iter_sources(sources):
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ParseError(f"unexpected header {header!r}", source=name, line=1)
        for ln, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(
                    f"expected {len(CSV_HEADER)} fields, got {len(row)}",
                    source=name, line=ln)
            sid, pid, treatment, trial_s = row[:4]
            try:
                trial = int(trial_s)
                t, x, y, z = (float(v) for v in row[4:8])
            except ValueError:
                raise ParseError("non-numeric field", source=name, line=ln) from None
            key = (pid, trial, sid)
            groups.setdefault(key, []).append((t, x, y, z))
            meta[key] = treatment
    out = []
    for key in sorted(groups):
        pid, trial, _sid = key
        pts = groups[key]
        length = 0.0
        for (t0, x0, y0, z0), (t1, x1, y1, z1) in zip(pts, pts[1:]):
            length += math.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2 + (z1 - z0) ** 2)
        duration = pts[-1][0] - pts[0][0] if len(pts) > 1 else 0.0
        out.append(TrialMetrics(
            participant_id=pid,
            treatment=meta[key],
            trial=trial,
            path_length_m=length,
            duration_s=duration,
            sample_count=len(pts),
        ))
    return out


def metrics_from_rows(rows) -> list:
    """TrialMetrics from plain dict rows (the simulator's fast path)."""
    out = []
    for r in rows:
        out.append(TrialMetrics(
            participant_id=r["participant_id"],
            treatment=r["treatment"],
            trial=int(r["trial"]),
            path_length_m=float(r["path_length_m"]),
            duration_s=float(r.get("duration_s", 0.0)),
            sample_count=int(r.get("sample_count", 0)),
        ))
    return out
