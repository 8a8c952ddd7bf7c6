"""Piecewise-linear difference-in-differences on matched 60-day windows.

The outcome model over window time t = 1..60 (break at t0 = 30) is

    Y = b0 + b1*t + b2*P + b3*(t - 30)*D + b4*(t - 30)*D*P + error,

with P the treated-group dummy and D = 1 for t >= 31. The treatment effect
is b4 (a post-break slope change for the treated group), and the containment
ratio expresses -b4 as a share of the counterfactual post-break slope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.linalg import qr, solve_triangular
from scipy.special import betainc

from .panel import Window
from .psm import MatchResult

__all__ = [
    "REGRESSOR_NAMES",
    "DidDesign",
    "DidFit",
    "build_design",
    "design_from_groups",
    "fit_ols",
    "containment_ratio",
    "fitted_lines",
    "student_t_pvalue",
    "stars_for_pvalue",
]

REGRESSOR_NAMES = ["const", "t", "group", "post_slope", "post_slope_x_group"]
T0 = 30


@dataclass
class DidDesign:
    """Stacked matched-country observations over a 60-day window."""

    country: list[str]
    t: np.ndarray
    y: np.ndarray
    p: np.ndarray
    d: np.ndarray
    t0: int = T0

    def __post_init__(self):
        if not np.array_equal(self.d, (self.t >= self.t0 + 1).astype(float)):
            raise ValueError("post indicator must equal 1 exactly when t >= 31")

    @property
    def n(self) -> int:
        return self.y.size

    def matrix(self) -> np.ndarray:
        """Design matrix with columns [1, t, P, (t-30)D, (t-30)D*P]."""
        u = (self.t - self.t0) * self.d
        return np.column_stack([np.ones(self.n), self.t, self.p, u, u * self.p])


def design_from_groups(window: Window, controls, treated) -> DidDesign:
    """Stack the given control (P=0) and treated (P=1) countries.

    Every country must carry the full 60-offset series in the window; a
    missing one is an error naming the country.
    """
    for country in list(controls) + list(treated):
        if country not in window.series:
            raise ValueError(
                f"matched country {country} has no complete series in the "
                f"window around {window.anchor_date}"
            )
    t = np.arange(1, 61, dtype=float)
    d = (t >= T0 + 1).astype(float)
    country, ts, ys, ps, ds_ = [], [], [], [], []
    for group, members in ((0.0, controls), (1.0, treated)):
        for c in members:
            country.extend([c] * 60)
            ts.append(t)
            ys.append(window.series[c])
            ps.append(np.full(60, group))
            ds_.append(d)
    return DidDesign(
        country=country,
        t=np.concatenate(ts),
        y=np.concatenate(ys).astype(float),
        p=np.concatenate(ps),
        d=np.concatenate(ds_),
    )


def build_design(window: Window, result: MatchResult) -> DidDesign:
    """Stack matched controls (P=0) and their matched treated partners (P=1)."""
    return design_from_groups(window, result.matched_controls, result.matched_treated)


def student_t_pvalue(t_stat: float, df: int) -> float:
    """Two-sided Student-t p-value via the regularized incomplete beta."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    t2 = float(t_stat) ** 2
    if t2 == 0.0:
        return 1.0
    return float(betainc(df / 2.0, 0.5, df / (df + t2)))


def stars_for_pvalue(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class DidFit:
    beta: np.ndarray
    covariance: np.ndarray
    se: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    stars: list[str]
    sigma2: float
    n: int
    df: int
    cr: float | None
    cr_note: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def effect(self) -> float:
        return float(self.beta[4])


def fit_ols(design: DidDesign) -> DidFit:
    """Least squares for the piecewise-linear model with classical inference.

    Solves via pivoted QR (rank deficiency is an error naming the collinear
    column); covariance is sigma2 * (X'X)^-1 with sigma2 = RSS/(n-5);
    two-sided p-values use Student-t with n-5 degrees of freedom. Stars:
    * for 0.01 <= p < 0.05, ** for 0.001 <= p < 0.01, *** for p < 0.001.
    """
    X = design.matrix()
    y = design.y
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more than {k} observations, got {n}")

    Q, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, k) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    deficient = np.where(diag <= tol)[0]
    if deficient.size:
        names = ", ".join(REGRESSOR_NAMES[piv[j]] for j in deficient)
        raise ValueError(f"design matrix is rank deficient; collinear column(s): {names}")

    qty = Q.T @ y
    beta_piv = solve_triangular(R, qty)
    beta = np.empty(k)
    beta[piv] = beta_piv

    resid = y - X @ beta
    rss = float(resid @ resid)
    df = n - k
    sigma2 = rss / df

    # (X'X)^-1 = P R^-1 R^-T P' from the pivoted factorization
    r_inv = solve_triangular(R, np.eye(k))
    xtx_inv_piv = r_inv @ r_inv.T
    xtx_inv = np.empty((k, k))
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_piv
    covariance = sigma2 * xtx_inv

    se = np.sqrt(np.diag(covariance))
    t_stats = beta / se
    p_values = np.array([student_t_pvalue(t, df) for t in t_stats])
    stars = [stars_for_pvalue(p) for p in p_values]

    xtr = X.T @ resid
    diagnostics = {
        "residual_orthogonality": float(np.max(np.abs(xtr))),
        "xty_scale": float(np.max(np.abs(X.T @ y))),
        "rss": rss,
    }

    fit = DidFit(
        beta=beta,
        covariance=covariance,
        se=se,
        t_stats=t_stats,
        p_values=p_values,
        stars=stars,
        sigma2=sigma2,
        n=n,
        df=df,
        cr=None,
        diagnostics=diagnostics,
    )
    _attach_cr(fit)
    return fit


def _attach_cr(fit: DidFit) -> None:
    slope = fit.beta[1] + fit.beta[3]
    if slope <= 0:
        fit.cr = None
        fit.cr_note = "n/a (non-rising baseline)"
    else:
        fit.cr = float(max(-fit.beta[4], 0.0) / slope * 100.0)
        fit.cr_note = ""


def containment_ratio(fit: DidFit) -> float:
    """Percent of the counterfactual post-break slope removed by treatment.

    CR = max(-b4, 0) / (b1 + b3) * 100. Requires a rising counterfactual
    baseline (b1 + b3 > 0); otherwise the ratio is undefined.
    """
    slope = fit.beta[1] + fit.beta[3]
    if slope <= 0:
        raise ValueError("containment ratio undefined: n/a (non-rising baseline)")
    return float(max(-fit.beta[4], 0.0) / slope * 100.0)


def fitted_lines(fit: DidFit) -> pd.DataFrame:
    """Control, treatment, and counterfactual-treatment lines over t = 1..60.

    The counterfactual treatment line keeps the treated intercept shift but
    removes the post-break slope change, so it coincides with the treatment
    line through t = 30 and diverges by -b4*(t-30) afterwards.
    """
    b0, b1, b2, b3, b4 = fit.beta
    t = np.arange(1, 61, dtype=float)
    u = (t - T0) * (t >= T0 + 1)
    control = b0 + b1 * t + b3 * u
    treatment = control + b2 + b4 * u
    counterfactual = control + b2
    return pd.DataFrame({
        "t": t.astype(int),
        "control": control,
        "treatment": treatment,
        "counterfactual_treatment": counterfactual,
    })
