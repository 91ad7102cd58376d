"""Analysis stage: metrics, REML random-intercept fits, reports.

The fit tests check against two independent oracles (tests/oracles.py)
implemented from first principles: the balanced-design ANOVA
method-of-moments estimator for the variance components, and plain
least squares (numpy lstsq) for the lambda = 0 boundary.
"""

import json
import math
import random

import numpy as np
import pytest

from exac.analysis import (
    LmmFit,
    ModelSpec,
    TrialMetrics,
    compute_metrics,
    fit_random_intercept,
    metrics_from_rows,
    participants_for_observations,
    session_report,
    wald_test,
)
from exac.clientsim import SimAgentConfig, generate_cohort_metrics
from exac.errors import DegenerateDesignError, NotConvergedError, ParseError

from oracles import anova_mom_oracle, make_balanced, normal_p_oracle, ols_oracle


def fit_rows(rows, **kw):
    return fit_random_intercept(metrics_from_rows(rows), ModelSpec(), **kw)


# -- metrics ------------------------------------------------------------------


def trial_csv(samples, sid="s1", pid="p1", treatment="Control", trial=1):
    lines = ["session_id,participant_id,treatment,trial,t,x,y,z,yaw,pitch"]
    for row in samples:
        lines.append(f"{sid},{pid},{treatment},{trial}," + ",".join(f"{v:.6f}" for v in row))
    return ("\n".join(lines) + "\n").encode()


class TestComputeMetrics:
    def test_single_sample_trial(self):
        data = trial_csv([(0.0, 3.0, 4.0, 0.0, 0.0, 0.0)])
        (m,) = compute_metrics([("t1.csv", data)])
        assert isinstance(m, TrialMetrics)
        assert m.path_length_m == 0.0
        assert m.duration_s == 0.0
        assert m.sample_count == 1

    def test_axis_aligned_walk_length(self):
        # 3 cells -> 2 m, sampled every 0.02 s at 2 cells/s
        samples = []
        t = 0.0
        while t * 2.0 < 2.0:
            d = t * 2.0
            x = min(d, 1.0)
            y = max(0.0, d - 1.0)
            samples.append((t, x, y, 0.0, 0.0, 0.0))
            t += 0.02
        samples.append((1.0, 1.0, 1.0, 0.0, 90.0, 0.0))
        (m,) = compute_metrics([("t.csv", trial_csv(samples))])
        assert m.path_length_m == pytest.approx(2.0, abs=1e-6)
        assert m.duration_s == pytest.approx(1.0)

    def test_path_at_least_straight_line(self):
        rng = random.Random(6)
        for _ in range(25):
            pts = [(i * 0.02, rng.uniform(0, 12), rng.uniform(0, 12), 0.0, 0.0, 0.0)
                   for i in range(rng.randrange(2, 40))]
            (m,) = compute_metrics([("r.csv", trial_csv(pts))])
            x0, y0 = pts[0][1], pts[0][2]
            x1, y1 = pts[-1][1], pts[-1][2]
            chord = math.hypot(x1 - x0, y1 - y0)
            assert m.path_length_m >= chord - 1e-9

    def test_parse_error_names_file_and_line(self):
        bad = b"session_id,participant_id,treatment,trial,t,x,y,z,yaw,pitch\ns,p,A,1,0,0,0\n"
        with pytest.raises(ParseError) as exc_info:
            compute_metrics([("broken.csv", bad)])
        assert exc_info.value.source == "broken.csv"
        assert exc_info.value.line == 2

    def test_non_numeric_field_rejected(self):
        bad = b"session_id,participant_id,treatment,trial,t,x,y,z,yaw,pitch\ns,p,A,1,0,x,0,0,0,0\n"
        with pytest.raises(ParseError):
            compute_metrics([("b.csv", bad)])

    def test_reparse_is_identical(self):
        samples = [(i * 0.02, i * 0.04, 0.0, 0.0, 0.0, 0.0) for i in range(50)]
        data = trial_csv(samples)
        first = compute_metrics([("a.csv", data)])
        second = compute_metrics([("a.csv", data)])
        assert first == second

    def test_multiple_trials_grouped(self):
        s1 = trial_csv([(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), (0.5, 1.0, 0.0, 0.0, 0.0, 0.0)], trial=1)
        s2 = trial_csv([(0.0, 0.0, 0.0, 0.0, 0.0, 0.0), (2.0, 0.0, 3.0, 0.0, 90.0, 0.0)], trial=2)
        got = compute_metrics([("t1.csv", s1), ("t2.csv", s2)])
        assert [(m.trial, m.path_length_m, m.duration_s) for m in got] == [
            (1, 1.0, 0.5), (2, 3.0, 2.0)]


# -- REML fit -----------------------------------------------------------------


class TestFitNoiseless:
    def test_exact_means_zero_variance(self):
        rows = []
        for i, (t, mu) in enumerate([("Control", 30.0), ("Control", 30.0),
                                     ("A", 30.0), ("A", 30.0),
                                     ("B", 25.0), ("B", 25.0)]):
            for trial in range(1, 4):
                rows.append({"participant_id": f"p{i}", "treatment": t, "trial": trial,
                             "path_length_m": mu})
        fit = fit_rows(rows)
        assert fit.converged
        assert fit.beta["(Intercept)"] == pytest.approx(30.0, abs=1e-9)
        assert fit.beta["A"] == pytest.approx(0.0, abs=1e-9)
        assert fit.beta["B"] == pytest.approx(-5.0, abs=1e-9)
        assert fit.sigma_u2 == pytest.approx(0.0, abs=1e-12)
        assert fit.sigma_e2 == pytest.approx(0.0, abs=1e-12)


class TestFitMatchesAnovaOracle:
    @pytest.mark.parametrize("m", [3, 5, 10])
    @pytest.mark.parametrize("k", [2, 6])
    def test_balanced_equivalence(self, m, k):
        rows = make_balanced(m, k, seed=m * 100 + k)
        oracle_u2, oracle_e2 = anova_mom_oracle(rows)
        if oracle_u2 <= 0:
            pytest.skip("boundary case: oracle outside the parameter space")
        fit = fit_rows(rows)
        assert fit.converged
        assert fit.sigma_e2 == pytest.approx(oracle_e2, rel=1e-6)
        assert fit.sigma_u2 == pytest.approx(oracle_u2, rel=1e-6)

    def test_at_least_one_interior_case_per_shape(self):
        # guard against the parametrized cases all skipping
        interior = 0
        for m in (3, 5, 10):
            for k in (2, 6):
                u2, _ = anova_mom_oracle(make_balanced(m, k, seed=m * 100 + k))
                interior += u2 > 0
        assert interior >= 4


class TestFitLambdaZeroIsOls:
    def test_matches_lstsq(self):
        rows = make_balanced(5, 4, seed=9)
        fit = fit_rows(rows, lambda_override=0.0)
        oracle = ols_oracle(rows)
        assert fit.beta["(Intercept)"] == pytest.approx(oracle[0], abs=1e-10)
        assert fit.beta["A"] == pytest.approx(oracle[1], abs=1e-10)
        assert fit.beta["B"] == pytest.approx(oracle[2], abs=1e-10)
        assert fit.sigma_u2 == 0.0


class TestFitProperties:
    def test_scale_equivariance(self):
        rows = make_balanced(6, 5, seed=12)
        fit1 = fit_rows(rows)
        scaled = [dict(r, path_length_m=r["path_length_m"] * 3.5) for r in rows]
        fit2 = fit_rows(scaled)
        for name in fit1.beta:
            assert fit2.beta[name] == pytest.approx(fit1.beta[name] * 3.5, rel=1e-7)
        assert math.sqrt(fit2.sigma_e2) == pytest.approx(math.sqrt(fit1.sigma_e2) * 3.5, rel=1e-6)
        z1 = {c: r["z"] for c, r in wald_test(fit1).items()}
        z2 = {c: r["z"] for c, r in wald_test(fit2).items()}
        for c in z1:
            assert z2[c] == pytest.approx(z1[c], abs=1e-8)

    def test_bracket_perturbation_insensitive(self):
        rows = make_balanced(8, 6, seed=3)
        fit1 = fit_rows(rows)
        fit2 = fit_rows(rows, lambda_max=2e6)
        lam1 = fit1.sigma_u2 / fit1.sigma_e2
        lam2 = fit2.sigma_u2 / fit2.sigma_e2
        assert lam2 == pytest.approx(lam1, rel=1e-4, abs=1e-8)

    def test_monte_carlo_recovery(self):
        # beta_B -5, sigma_u 2, sigma_e 3; about 17 participants per
        # treatment (50 total), 6 trials.  Thresholds from the sampling
        # distribution: se(beta_B) = sqrt((9 + 6*4)(1/17 + 1/17)/6) = 0.80;
        # +/-1.8 is 2.25 se (97.5% per rep).  sd(sigma_e rel) = 4.5%,
        # sd(sigma_u rel) = 14% -> 15% / 35% bounds.
        hits_beta = hits_e = hits_u = 0
        reps = 200
        for rep in range(reps):
            rows = make_balanced(17, 6, seed=10_000 + rep)
            fit = fit_rows(rows)
            hits_beta += abs(fit.beta["B"] - (-5.0)) <= 1.8
            hits_e += abs(math.sqrt(fit.sigma_e2) - 3.0) <= 0.45
            hits_u += abs(math.sqrt(fit.sigma_u2) - 2.0) <= 0.70
        assert hits_beta >= 0.95 * reps
        assert hits_e >= 0.95 * reps
        assert hits_u >= 0.95 * reps


class TestFitErrors:
    def test_single_participant_treatment_degenerate(self):
        rows = make_balanced(2, 3, seed=1)
        rows = [r for r in rows if not (r["treatment"] == "B" and r["participant_id"] != "p005")]
        with pytest.raises(DegenerateDesignError):
            fit_rows(rows)

    def test_participant_in_two_treatments_degenerate(self):
        rows = make_balanced(2, 3, seed=1)
        rows[0] = dict(rows[0], treatment="B")
        with pytest.raises(DegenerateDesignError):
            fit_rows(rows)

    def test_missing_reference_level(self):
        rows = [r for r in make_balanced(3, 3, seed=1) if r["treatment"] != "Control"]
        with pytest.raises(DegenerateDesignError):
            fit_rows(rows)

    def test_lambda_beyond_bracket_not_converged(self):
        # enormous participant spread over microscopic noise: the REML
        # optimum sits far beyond the default bracket end
        rng = random.Random(5)
        rows = []
        for i in range(6):
            t = ("Control", "A", "B")[i % 3]
            u = rng.gauss(0, 1e6)
            for trial in range(1, 4):
                rows.append({"participant_id": f"p{i}", "treatment": t, "trial": trial,
                             "path_length_m": u + rng.gauss(0, 1e-6)})
        with pytest.raises(NotConvergedError):
            fit_rows(rows)


class TestWald:
    def test_zero_beta_p_one(self):
        fit = LmmFit(beta={"(Intercept)": 1.0, "B": 0.0},
                     se={"(Intercept)": 0.5, "B": 0.5},
                     sigma_u2=1.0, sigma_e2=1.0, converged=True, loglik_reml=0.0)
        assert wald_test(fit)["B"]["p"] == pytest.approx(1.0)

    def test_z_196(self):
        fit = LmmFit(beta={"B": 1.96}, se={"B": 1.0},
                     sigma_u2=1.0, sigma_e2=1.0, converged=True, loglik_reml=0.0)
        assert wald_test(fit)["B"]["p"] == pytest.approx(0.050, abs=0.0005)

    def test_matches_erfc_oracle(self):
        for z in (0.0, 0.5, 1.0, 2.5, 4.0):
            fit = LmmFit(beta={"B": z}, se={"B": 1.0},
                         sigma_u2=0.0, sigma_e2=1.0, converged=True, loglik_reml=0.0)
            assert wald_test(fit)["B"]["p"] == pytest.approx(normal_p_oracle(z), rel=1e-12)

    def test_synthetic_cohort_pattern(self):
        rows = generate_cohort_metrics(
            participants_for_observations(275), SimAgentConfig(seed=100))
        fit = fit_rows(rows)
        tests = wald_test(fit)
        assert tests["B"]["p"] < 0.05
        assert tests["A"]["p"] > 0.05
        assert fit.beta["B"] < 0


# -- report -------------------------------------------------------------------


class TestSizing:
    def test_observation_to_participant_mapping(self):
        assert participants_for_observations(275) == 46
        assert participants_for_observations(495) == 82
        assert participants_for_observations(1) == 6  # floor keeps the design fittable
        assert participants_for_observations(36) == 6


class TestSessionReport:
    def cohort(self, seed, **cfg_kw):
        cfg = SimAgentConfig(seed=seed, **cfg_kw)
        return generate_cohort_metrics(participants_for_observations(275), cfg)

    def test_identical_cohorts_agree(self, tmp_path):
        rows = self.cohort(42)
        report = session_report(
            [("one", metrics_from_rows(rows)), ("two", metrics_from_rows(rows))],
            out_dir=tmp_path)
        assert report["agreement"] is True
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "fit_one.json").exists()
        assert (tmp_path / "fit_two.json").exists()
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "plot_data.json").exists()
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk["agreement"] is True
        assert "cohort_sizing_note" in on_disk

    def test_default_cohorts_agree(self, tmp_path):
        report = session_report(
            [("s1", metrics_from_rows(self.cohort(1))),
             ("s2", metrics_from_rows(self.cohort(2)))],
            out_dir=tmp_path)
        assert report["agreement"] is True
        for cohort in report["cohorts"]:
            assert cohort["tests"]["B"]["p"] < 0.05
            assert cohort["tests"]["A"]["p"] > 0.05

    def test_disabled_effect_breaks_agreement(self, tmp_path):
        flat = {"Control": 0.70, "A": 0.70, "B": 0.70}
        report = session_report(
            [("real", metrics_from_rows(self.cohort(1))),
             ("null", metrics_from_rows(self.cohort(3, treatment_bias=flat)))],
            out_dir=tmp_path)
        assert report["agreement"] is False

    def test_metrics_csv_shape(self, tmp_path):
        rows = self.cohort(42)
        session_report([("solo", metrics_from_rows(rows))], out_dir=tmp_path)
        text = (tmp_path / "metrics.csv").read_text().strip().split("\n")
        assert text[0] == "cohort,participant_id,treatment,trial,path_length_m,duration_s,sample_count"
        assert len(text) == 1 + len(rows)

    def test_plot_data_shape(self, tmp_path):
        rows = self.cohort(42)
        session_report([("solo", metrics_from_rows(rows))], out_dir=tmp_path)
        plot = json.loads((tmp_path / "plot_data.json").read_text())
        (cohort,) = plot["cohorts"]
        by_treatment = {c["treatment"]: c for c in cohort["treatments"]}
        assert set(by_treatment) == {"Control", "A", "B"}
        for c in by_treatment.values():
            assert c["n"] > 0
            assert c["mean"] > 0
            assert c["sd"] >= 0
