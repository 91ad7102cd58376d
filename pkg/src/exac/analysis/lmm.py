"""Random-intercept linear mixed model fitted by REML profiling.

Model: y_ij = x_ij' beta + u_i + e_ij with u_i ~ N(0, sigma_u^2) per
participant and e_ij ~ N(0, sigma_e^2).  Writing lambda = sigma_u^2 /
sigma_e^2, the covariance of group g is sigma_e^2 (I + lambda J), whose
inverse and determinant are closed-form:

    (I + lambda J)^-1 = I - (lambda / (1 + lambda n_g)) J
    log det(I + lambda J) = log(1 + lambda n_g)

so beta and sigma_e^2 have GLS closed forms at fixed lambda, and only
the scalar lambda needs numeric search.  The profiled REML criterion is
minimized by a coarse log-spaced scan to bracket the optimum, then
golden-section inside the bracket.  Near the optimum the criterion is
flat to within float rounding, so golden-section stops at a width where
value comparisons are still trustworthy and a sign bisection on the
analytic derivative (the REML score) finishes the job; the score
crosses zero sharply even where criterion differences have collapsed
into noise.  The search hitting the bracket's far end raises
NotConvergedError; the lambda = 0 boundary is a valid answer (the fit
degenerates to ordinary least squares).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from exac.errors import DegenerateDesignError, NotConvergedError

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0  # 1/phi


@dataclass(frozen=True)
class ModelSpec:
    response: str = "path_length_m"
    fixed: str = "treatment"
    reference: str = "Control"
    random: str = "participant_id"


@dataclass
class LmmFit:
    beta: dict  # "(Intercept)" + one entry per non-reference level
    se: dict
    sigma_u2: float
    sigma_e2: float
    converged: bool
    loglik_reml: float
    n_obs: int = 0
    n_groups: int = 0
    coefficients: tuple = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {
            "beta": dict(self.beta),
            "se": dict(self.se),
            "sigma_u2": self.sigma_u2,
            "sigma_e2": self.sigma_e2,
            "converged": self.converged,
            "loglik_reml": self.loglik_reml,
            "n_obs": self.n_obs,
            "n_groups": self.n_groups,
        }


def _value(row, name):
    if isinstance(row, dict):
        return row[name]
    return getattr(row, name)


def _check_design(rows, spec: ModelSpec):
    by_participant: dict = {}
    for r in rows:
        pid = _value(r, spec.random)
        t = _value(r, spec.fixed)
        seen = by_participant.setdefault(pid, set())
        seen.add(t)
        if len(seen) > 1:
            raise DegenerateDesignError(
                f"participant {pid!r} appears under treatments {sorted(seen)}")
    participants_per: dict = {}
    for pid, seen in by_participant.items():
        (t,) = seen
        participants_per[t] = participants_per.get(t, 0) + 1
    if spec.reference not in participants_per:
        raise DegenerateDesignError(
            f"reference level {spec.reference!r} absent from the data")
    thin = {t: c for t, c in participants_per.items() if c < 2}
    if thin:
        raise DegenerateDesignError(
            f"treatments with fewer than 2 participants: {sorted(thin)}")
    return by_participant, participants_per


def fit_random_intercept(rows, spec: ModelSpec = ModelSpec(), *,
                         lambda_max: float = 1e6, tol: float = 1e-8,
                         lambda_override: float | None = None) -> LmmFit:
    """REML fit; see module docstring for the profiling scheme.

    `lambda_override` pins the variance ratio instead of searching (the
    value 0.0 reproduces ordinary least squares exactly).
    """
    rows = list(rows)
    if not rows:
        raise DegenerateDesignError("no observations")
    _check_design(rows, spec)

    levels = sorted({_value(r, spec.fixed) for r in rows})
    non_ref = [t for t in levels if t != spec.reference]
    names = ("(Intercept)", *non_ref)
    p = len(names)
    pids = sorted({_value(r, spec.random) for r in rows})
    pid_index = {pid: i for i, pid in enumerate(pids)}
    g_count = len(pids)

    n = len(rows)
    if n <= p:
        raise DegenerateDesignError(f"{n} observations cannot fit {p} coefficients")
    X = np.zeros((n, p))
    y = np.empty(n)
    group = np.empty(n, dtype=np.int64)
    col = {t: 1 + i for i, t in enumerate(non_ref)}
    for i, r in enumerate(rows):
        X[i, 0] = 1.0
        t = _value(r, spec.fixed)
        if t != spec.reference:
            X[i, col[t]] = 1.0
        y[i] = float(_value(r, spec.response))
        group[i] = pid_index[_value(r, spec.random)]

    # per-group sufficient statistics: everything lambda-dependent reduces
    # to rank-one corrections of these
    n_g = np.bincount(group, minlength=g_count).astype(float)
    sx = np.zeros((g_count, p))
    np.add.at(sx, group, X)
    sy = np.bincount(group, weights=y, minlength=g_count)
    Sxx = X.T @ X
    Sxy = X.T @ y
    Syy = float(y @ y)
    outer_sx = np.einsum("gi,gj->gij", sx, sx)
    sxsy = sx * sy[:, None]

    df = n - p

    def gls(lam: float):
        w = lam / (1.0 + lam * n_g)
        A = Sxx - np.tensordot(w, outer_sx, axes=1)
        b = Sxy - w @ sxsy
        yVy = Syy - float(w @ (sy * sy))
        beta = np.linalg.solve(A, b)
        rvr = yVy - float(beta @ b)
        return A, beta, max(rvr, 0.0)

    def objective(lam: float) -> float:
        A, _, rvr = gls(lam)
        sign, logdet_a = np.linalg.slogdet(A)
        if sign <= 0:
            return math.inf
        if rvr <= 0.0:
            return -math.inf
        return df * math.log(rvr) + float(np.sum(np.log1p(lam * n_g))) + logdet_a

    def score(lam: float) -> float:
        # d objective / d lambda via the envelope theorem: the beta
        # derivative term vanishes at the GLS solution
        A, beta, rvr = gls(lam)
        if rvr <= 0.0:
            return -math.inf
        wp = 1.0 / (1.0 + lam * n_g) ** 2
        r = sy - sx @ beta
        drvr = -float(wp @ (r * r))
        quad = np.einsum("gp,pg->g", sx, np.linalg.solve(A, sx.T))
        return (df * drvr / rvr
                + float(np.sum(n_g / (1.0 + lam * n_g)))
                - float(wp @ quad))

    def bisect(lo: float, hi: float) -> float:
        if score(lo) >= 0.0:
            return lo
        if score(hi) <= 0.0:
            return hi
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if score(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    if lambda_override is not None:
        lam = float(lambda_override)
    else:
        grid = [0.0] + list(np.logspace(-8, math.log10(lambda_max), 60))
        values = [objective(l) for l in grid]
        if all(v == -math.inf for v in values):
            lam = 0.0  # perfect fit at every lambda: noiseless data
        else:
            best = min(range(len(grid)), key=lambda i: values[i])
            if best == len(grid) - 1:
                raise NotConvergedError(
                    f"REML optimum above lambda bracket end {lambda_max:g}")
            glo = grid[best - 1] if best > 0 else 0.0
            ghi = grid[best + 1]
            # golden-section only down to a width where criterion value
            # comparisons still beat float noise
            lo, hi = glo, ghi
            c = hi - _INVPHI * (hi - lo)
            d = lo + _INVPHI * (hi - lo)
            fc, fd = objective(c), objective(d)
            while hi - lo > max(tol, 1e-4 * (1.0 + hi)):
                if fc < fd:
                    hi, d, fd = d, c, fc
                    c = hi - _INVPHI * (hi - lo)
                    fc = objective(c)
                else:
                    lo, c, fc = c, d, fd
                    d = lo + _INVPHI * (hi - lo)
                    fd = objective(d)
            if score(lo) < 0.0 < score(hi):
                lam = bisect(lo, hi)
            else:
                # noise pushed the narrowed interval off the root; the
                # grid bracket still straddles it by unimodality
                lam = bisect(glo, ghi)

    A, beta, rvr = gls(lam)
    sigma_e2 = rvr / df
    sigma_u2 = lam * sigma_e2
    if sigma_e2 > 0.0:
        cov = np.linalg.inv(A) * sigma_e2
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    else:
        se = np.zeros(p)
    if sigma_e2 > 0.0:
        sign, logdet_a = np.linalg.slogdet(A)
        loglik = -0.5 * (
            df * (math.log(2.0 * math.pi * sigma_e2) + 1.0)
            + float(np.sum(np.log1p(lam * n_g)))
            + logdet_a
        )
    else:
        loglik = math.inf
    return LmmFit(
        beta={name: float(b) for name, b in zip(names, beta)},
        se={name: float(s) for name, s in zip(names, se)},
        sigma_u2=float(sigma_u2),
        sigma_e2=float(sigma_e2),
        converged=True,
        loglik_reml=float(loglik),
        n_obs=n,
        n_groups=g_count,
        coefficients=names,
    )


def wald_test(fit: LmmFit) -> dict:
    """Two-sided normal z-tests, one per coefficient: {name: {z, p}}."""
    out = {}
    for name, b in fit.beta.items():
        s = fit.se.get(name, 0.0)
        if s > 0.0:
            z = b / s
        else:
            z = 0.0 if b == 0.0 else math.copysign(math.inf, b)
        p = math.erfc(abs(z) / math.sqrt(2.0)) if math.isfinite(z) else 0.0
        out[name] = {"z": z, "p": p}
    return out
