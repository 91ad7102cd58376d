"""Cross-cohort reporting: fits, hypothesis tests, agreement verdict.

A report covers one or more cohorts (named lists of per-trial metrics).
Each cohort gets its own random-intercept fit and Wald tests; the report
then judges whether the cohorts agree.  Two cohorts agree on a
coefficient when they reach the same significance call at the chosen
alpha, and, if both calls are significant, the same sign.  Magnitudes
are deliberately not compared: replications at different sample sizes
share conclusions, not estimates.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from exac.analysis.lmm import ModelSpec, fit_random_intercept, wald_test

SIZING_NOTE = (
    "Requested cohort sizes are taken as observation counts and converted "
    "to participant counts as max(6, round(n / trials_per_session)); the "
    "floor of 6 keeps every treatment arm fittable."
)


def participants_for_observations(n_obs: int, trials_per_session: int = 6) -> int:
    """Participant count whose completed sessions yield about n_obs trials."""
    return max(6, round(n_obs / trials_per_session))


def _group_stats(metrics, response="path_length_m"):
    by_t: dict = {}
    for m in metrics:
        by_t.setdefault(m.treatment, []).append(getattr(m, response))
    out = []
    for t in sorted(by_t):
        vals = by_t[t]
        n = len(vals)
        mean = sum(vals) / n
        sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / (n - 1)) if n > 1 else 0.0
        out.append({"treatment": t, "n": n, "mean": mean, "sd": sd})
    return out


def _verdicts(tests, names, alpha):
    out = {}
    for name in names:
        p = tests[name]["p"]
        significant = p < alpha
        sign = 0
        if significant:
            sign = 1 if tests[name]["z"] > 0 else -1
        out[name] = (significant, sign)
    return out


def session_report(cohorts, *, out_dir, alpha: float = 0.05,
                   spec: ModelSpec = ModelSpec()) -> dict:
    """Fit every cohort, write report files, return the report dict.

    `cohorts` is a list of (name, metrics) pairs.  Files written under
    `out_dir`: metrics.csv (all rows, tagged by cohort), fit_{name}.json
    per cohort, report.json, plot_data.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["cohort,participant_id,treatment,trial,path_length_m,duration_s,sample_count"]
    for name, metrics in cohorts:
        for m in metrics:
            lines.append(f"{name},{m.participant_id},{m.treatment},{m.trial},"
                         f"{m.path_length_m},{m.duration_s},{m.sample_count}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    entries = []
    for name, metrics in cohorts:
        fit = fit_random_intercept(metrics, spec)
        tests = wald_test(fit)
        entry = {"name": name, "fit": fit.to_json(), "tests": tests}
        entries.append(entry)
        (out / f"fit_{name}.json").write_text(json.dumps(entry, indent=2) + "\n")

    effect_names = sorted(
        {c for e in entries for c in e["tests"] if c != "(Intercept)"})
    verdict_sets = [_verdicts(e["tests"], effect_names, alpha) for e in entries]
    agreement = all(v == verdict_sets[0] for v in verdict_sets[1:])

    report = {
        "agreement": agreement,
        "alpha": alpha,
        "cohort_sizing_note": SIZING_NOTE,
        "cohorts": entries,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    plot = {"cohorts": [
        {"name": name, "treatments": _group_stats(metrics, spec.response)}
        for name, metrics in cohorts
    ]}
    (out / "plot_data.json").write_text(json.dumps(plot, indent=2) + "\n")
    return report
