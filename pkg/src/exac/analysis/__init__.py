"""Statistical analysis: trial metrics, mixed-model fits, reports."""

from exac.analysis.lmm import LmmFit, ModelSpec, fit_random_intercept, wald_test
from exac.analysis.metrics import (
    CSV_HEADER,
    TrialMetrics,
    compute_metrics,
    metrics_from_rows,
)
from exac.analysis.report import participants_for_observations, session_report

__all__ = [
    "CSV_HEADER",
    "LmmFit",
    "ModelSpec",
    "TrialMetrics",
    "compute_metrics",
    "fit_random_intercept",
    "metrics_from_rows",
    "participants_for_observations",
    "session_report",
    "wald_test",
]
