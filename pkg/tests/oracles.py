"""Independent oracles shared by the analysis and acceptance tests.

Everything here is implemented from first principles, on purpose: the
balanced-design ANOVA method-of-moments estimator and plain least
squares give reference values for the REML fit without touching any of
the code under test.
"""

import math
import random

import numpy as np


def anova_mom_oracle(rows):
    """Balanced-design method-of-moments variance estimates.

    sigma_e2 = MS_within (within-participant mean square);
    sigma_u2 = (MS_participant - MS_within) / k, where MS_participant is
    the between-participant-within-treatment mean square on M - T df.
    """
    by_p = {}
    for r in rows:
        by_p.setdefault(r["participant_id"], []).append(r)
    k = len(next(iter(by_p.values())))
    assert all(len(v) == k for v in by_p.values()), "oracle needs balance"
    treatments = {}
    for pid, rs in by_p.items():
        treatments.setdefault(rs[0]["treatment"], []).append(pid)
    m_total = len(by_p)
    t_count = len(treatments)

    p_mean = {pid: sum(r["path_length_m"] for r in rs) / k for pid, rs in by_p.items()}
    t_mean = {
        t: sum(p_mean[pid] for pid in pids) / len(pids)
        for t, pids in treatments.items()
    }
    ss_within = sum(
        (r["path_length_m"] - p_mean[pid]) ** 2 for pid, rs in by_p.items() for r in rs
    )
    ms_within = ss_within / (m_total * (k - 1))
    ss_part = k * sum(
        (p_mean[pid] - t_mean[t]) ** 2 for t, pids in treatments.items() for pid in pids
    )
    ms_part = ss_part / (m_total - t_count)
    return (ms_part - ms_within) / k, ms_within


def ols_oracle(rows, treatments=("Control", "A", "B")):
    """Least squares coefficients via numpy for the dummy-coded design."""
    non_ref = [t for t in treatments if t != "Control"]
    X = []
    y = []
    for r in rows:
        X.append([1.0] + [1.0 if r["treatment"] == t else 0.0 for t in non_ref])
        y.append(r["path_length_m"])
    beta, *_ = np.linalg.lstsq(np.array(X), np.array(y), rcond=None)
    return beta


def normal_p_oracle(z):
    return math.erfc(abs(z) / math.sqrt(2.0))


def make_balanced(m_per_treatment, k, *, beta_a=0.0, beta_b=-5.0, intercept=30.0,
                  sigma_u=2.0, sigma_e=3.0, seed=0):
    """Gaussian rows under the random-intercept model, balanced design."""
    rng = random.Random(seed)
    rows = []
    idx = 0
    for t, shift in (("Control", 0.0), ("A", beta_a), ("B", beta_b)):
        for _ in range(m_per_treatment):
            idx += 1
            pid = f"p{idx:03d}"
            u = rng.gauss(0.0, sigma_u)
            for trial in range(1, k + 1):
                rows.append({
                    "participant_id": pid,
                    "treatment": t,
                    "trial": trial,
                    "path_length_m": intercept + shift + u + rng.gauss(0.0, sigma_e),
                })
    return rows
