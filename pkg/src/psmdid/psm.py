"""Propensity score matching: treatment split, logistic scores, optimal pairing.

Countries are split into treatment/control by a policy's intensity at an
anchor date, scored with a ridge-stabilized logistic regression on the nine
macro covariates, and paired by an exact minimum-total-distance assignment
of controls to treated units on the logit scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .panel import COVARIATE_NAMES, MacroCovariates, PanelDataset

__all__ = [
    "DegenerateSplit",
    "TreatmentAssignment",
    "PropensityModel",
    "MatchResult",
    "BalanceReport",
    "assign_treatment",
    "fit_propensity",
    "predict_propensity",
    "optimal_pair_match",
    "balance_report",
    "propensity_histogram",
]

# logit(p) saturates at +-36.7 for float64 probabilities; clamp keeps exact
# 0/1 scores finite instead of infinite.
LOGIT_CLAMP = 36.7


class DegenerateSplit(Exception):
    """Raised when a treatment split leaves one side empty."""

    def __init__(self, policy: str, anchor: date, n_treated: int, n_control: int):
        self.policy = policy
        self.anchor = anchor
        self.n_treated = n_treated
        self.n_control = n_control
        super().__init__(
            f"{policy} at {anchor}: degenerate split "
            f"({n_treated} treated, {n_control} control)"
        )


@dataclass
class TreatmentAssignment:
    policy: str
    anchor_date: date
    threshold: float
    treated: set[str]
    control: set[str]
    excluded: list[str] = field(default_factory=list)

    @property
    def countries(self) -> list[str]:
        return sorted(self.treated | self.control)

    def label(self, country: str) -> int:
        return 1 if country in self.treated else 0


def assign_treatment(
    ds: PanelDataset,
    covs: Mapping[str, MacroCovariates],
    policy: str,
    anchor: date,
    threshold: float,
    eligible: Sequence[str] | None = None,
) -> TreatmentAssignment:
    """Partition countries by whether ``policy`` exceeds ``threshold`` at ``anchor``.

    Countries without a covariate record, or without an observed policy
    value at the anchor date, are excluded and reported. Raises
    DegenerateSplit when either group comes out empty.
    """
    if not ds.has_date(anchor):
        raise ValueError(f"anchor {anchor} outside panel range")
    pool = list(eligible) if eligible is not None else list(ds.countries)
    treated, control, excluded = set(), set(), []
    for country in pool:
        if country not in covs:
            excluded.append(country)
            continue
        v = ds.value(country, anchor, policy)
        if not np.isfinite(v):
            excluded.append(country)
            continue
        (treated if v > threshold else control).add(country)
    if excluded:
        warnings.warn(
            f"{policy} at {anchor}: excluded {len(excluded)} countries "
            f"without covariates or observed policy value: {', '.join(sorted(excluded))}"
        )
    if not treated or not control:
        raise DegenerateSplit(policy, anchor, len(treated), len(control))
    return TreatmentAssignment(
        policy=policy, anchor_date=anchor, threshold=threshold,
        treated=treated, control=control, excluded=sorted(excluded),
    )


@dataclass
class PropensityModel:
    intercept: float
    coefficients: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    converged: bool
    iterations: int
    covariate_names: list[str] = field(default_factory=lambda: list(COVARIATE_NAMES))
    dropped: list[str] = field(default_factory=list)
    separation: bool = False


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _penalized_loglik(beta, X, y, ridge):
    z = X @ beta
    # log-likelihood sum(y*z - log(1+e^z)), stable via logaddexp
    ll = float(np.sum(y * z - np.logaddexp(0.0, z)))
    return ll - 0.5 * ridge * float(np.sum(beta[1:] ** 2))


def fit_propensity(
    data: Sequence[tuple[MacroCovariates, int]],
    ridge: float = 1e-6,
) -> PropensityModel:
    """Fit treatment probability by penalized logistic regression.

    Covariates are standardized to zero mean / unit sd; the ridge penalty
    (on standardized slopes, never the intercept) keeps the maximizer finite
    under separation and can be disabled with ridge=0. Optimization is damped
    Newton; convergence means gradient max-norm below 1e-8 within 100
    iterations. Perfect separation is reported via ``separation`` and
    converged=False.
    """
    y = np.array([label for _, label in data], dtype=float)
    n1, n0 = int(y.sum()), int((1 - y).sum())
    if n1 < 2 or n0 < 2:
        raise ValueError(f"need >=2 observations per label, got {n1} treated / {n0} control")

    raw = np.array([cov.as_vector() for cov, _ in data], dtype=float)
    means = raw.mean(axis=0)
    sds = raw.std(axis=0, ddof=0)
    dropped = [COVARIATE_NAMES[j] for j in range(raw.shape[1]) if sds[j] == 0.0]
    if dropped:
        warnings.warn(f"dropping constant covariates: {', '.join(dropped)}")
    keep = sds > 0
    safe_sds = np.where(keep, sds, 1.0)
    Z = (raw - means) / safe_sds
    Z[:, ~keep] = 0.0

    X = np.column_stack([np.ones(len(y)), Z[:, keep]])
    k = X.shape[1]
    beta = np.zeros(k)
    beta[0] = np.log(n1 / n0)
    penalty = np.zeros(k)
    penalty[1:] = ridge

    converged = False
    iterations = 0
    for iterations in range(1, 101):
        p = _sigmoid(X @ beta)
        grad = X.T @ (y - p) - penalty * beta
        gnorm = np.max(np.abs(grad))
        if gnorm < 1e-8:
            converged = True
        # keep polishing well past the convergence flag: near-flat
        # likelihoods leave coefficient slack at gradient 1e-8
        if gnorm < 1e-12:
            break
        w = np.maximum(p * (1.0 - p), 1e-12)
        H = (X * w[:, None]).T @ X + np.diag(penalty)
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(k), grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # backtracking on the penalized log-likelihood
        obj = _penalized_loglik(beta, X, y, ridge)
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            if _penalized_loglik(cand, X, y, ridge) >= obj - 1e-14:
                break
            t *= 0.5
        beta = beta + t * step

    p = _sigmoid(X @ beta)
    separation = bool(np.all(np.abs(y - p) < 0.01))
    if separation:
        warnings.warn(
            "perfect separation detected: probabilities pinned to labels; "
            "coefficients are the ridge-penalized solution"
        )
        converged = False

    coefficients = np.zeros(raw.shape[1])
    coefficients[keep] = beta[1:]
    return PropensityModel(
        intercept=float(beta[0]),
        coefficients=coefficients,
        means=means,
        sds=np.where(keep, sds, 1.0),
        converged=converged,
        iterations=iterations,
        dropped=dropped,
        separation=separation,
    )


def predict_propensity(model: PropensityModel, cov: MacroCovariates) -> float:
    """Treatment probability for one country, strictly inside (0, 1)."""
    z = (cov.as_vector() - model.means) / model.sds
    eta = model.intercept + float(z @ model.coefficients)
    p = float(_sigmoid(np.array([eta]))[0])
    return min(max(p, np.finfo(float).tiny), np.nextafter(1.0, 0.0))


def _logit(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        warnings.warn(f"propensity score {p} at the boundary; logit clamped to +-{LOGIT_CLAMP}")
        return -LOGIT_CLAMP if p <= 0.0 else LOGIT_CLAMP
    return float(np.log(p / (1.0 - p)))


@dataclass
class MatchResult:
    pairs: list[tuple[str, str, float]]
    total_distance: float
    unmatched_treated: set[str]
    unmatched_control: set[str] = field(default_factory=set)
    swapped: bool = False

    @property
    def matched_controls(self) -> list[str]:
        return [c for c, _, _ in self.pairs]

    @property
    def matched_treated(self) -> list[str]:
        return [t for _, t, _ in self.pairs]

    @property
    def matched_countries(self) -> list[str]:
        return sorted(set(self.matched_controls) | set(self.matched_treated))


def optimal_pair_match(
    assignment: TreatmentAssignment,
    scores: Mapping[str, float],
    caliper: float | None = None,
) -> MatchResult:
    """Injective minimum-total-distance pairing of controls to treated units.

    Distance is the absolute logit difference of propensity scores. The
    rectangular assignment problem is solved exactly; among equal-cost
    optima, pairs are canonicalized toward lexicographic country order.
    When controls outnumber treated, roles are swapped for the assignment
    and reported via ``swapped``. A caliper, if given, drops pairs whose
    distance exceeds it (with a warning).
    """
    controls = sorted(assignment.control)
    treated = sorted(assignment.treated)
    for country in controls + treated:
        if country not in scores:
            raise ValueError(f"missing propensity score for {country}")

    swapped = len(controls) > len(treated)
    if swapped:
        warnings.warn(
            f"{len(controls)} controls exceed {len(treated)} treated; "
            "matching treated units to controls instead"
        )
        small, large = treated, controls
    else:
        small, large = controls, treated

    small_pos = {c: i for i, c in enumerate(small)}
    large_pos = {c: i for i, c in enumerate(large)}
    lg_small = np.array([_logit(scores[c]) for c in small])
    lg_large = np.array([_logit(scores[c]) for c in large])
    cost = np.abs(lg_small[:, None] - lg_large[None, :])
    rows, cols = linear_sum_assignment(cost)

    match = {small[r]: large[c] for r, c in zip(rows, cols)}
    match = _canonicalize_ties(match, small, cost, small_pos, large_pos)

    pairs = []
    for s in small:
        l = match[s]
        d = float(cost[small_pos[s], large_pos[l]])
        c, t = (l, s) if swapped else (s, l)
        pairs.append((c, t, d))
    pairs.sort(key=lambda p: p[0])

    if caliper is not None:
        kept = [p for p in pairs if p[2] <= caliper]
        if len(kept) < len(pairs):
            dropped = [p for p in pairs if p[2] > caliper]
            warnings.warn(
                f"caliper {caliper} dropped {len(dropped)} pairs: "
                + ", ".join(f"{c}-{t}" for c, t, _ in dropped)
            )
        pairs = kept

    matched_c = {c for c, _, _ in pairs}
    matched_t = {t for _, t, _ in pairs}
    return MatchResult(
        pairs=pairs,
        total_distance=float(sum(d for _, _, d in pairs)),
        unmatched_treated=set(treated) - matched_t,
        unmatched_control=set(controls) - matched_c,
        swapped=swapped,
    )


def _canonicalize_ties(match, small, cost, small_pos, large_pos):
    """Swap cost-neutral pair crossings toward lexicographic order."""
    changed = True
    while changed:
        changed = False
        for i in range(len(small)):
            for j in range(i + 1, len(small)):
                a, b = small[i], small[j]
                ta, tb = match[a], match[b]
                if ta <= tb:
                    continue
                cur = cost[small_pos[a], large_pos[ta]] + cost[small_pos[b], large_pos[tb]]
                alt = cost[small_pos[a], large_pos[tb]] + cost[small_pos[b], large_pos[ta]]
                if abs(alt - cur) < 1e-12:
                    match[a], match[b] = tb, ta
                    changed = True
    return match


@dataclass
class BalanceReport:
    covariates: list[str]
    smd_before: dict[str, float]
    smd_after: dict[str, float]
    n_before: tuple[int, int]
    n_after: tuple[int, int]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "covariate": self.covariates,
            "smd_before": [self.smd_before[c] for c in self.covariates],
            "smd_after": [self.smd_after[c] for c in self.covariates],
        })


def _smd(treated: np.ndarray, control: np.ndarray) -> float:
    pooled = 0.5 * (treated.var(ddof=1) + control.var(ddof=1))
    if pooled == 0:
        return float("nan")
    return float((treated.mean() - control.mean()) / np.sqrt(pooled))


def balance_report(
    assignment: TreatmentAssignment,
    covs: Mapping[str, MacroCovariates],
    result: MatchResult,
) -> BalanceReport:
    """Standardized mean differences per covariate, before vs after matching.

    Before-matching uses every assigned country; after-matching only the
    matched pairs. Zero pooled variance flags the SMD as NaN.
    """
    if not result.pairs:
        raise ValueError("match result has no pairs")

    def group_matrix(countries):
        return np.array([covs[c].as_vector() for c in sorted(countries)])

    t_all = group_matrix(assignment.treated)
    c_all = group_matrix(assignment.control)
    t_matched = group_matrix(result.matched_treated)
    c_matched = group_matrix(result.matched_controls)

    before, after = {}, {}
    for j, name in enumerate(COVARIATE_NAMES):
        before[name] = _smd(t_all[:, j], c_all[:, j])
        after[name] = _smd(t_matched[:, j], c_matched[:, j])
    return BalanceReport(
        covariates=list(COVARIATE_NAMES),
        smd_before=before,
        smd_after=after,
        n_before=(len(t_all), len(c_all)),
        n_after=(len(t_matched), len(c_matched)),
    )


def propensity_histogram(
    scores: Mapping[str, float],
    assignment: TreatmentAssignment,
    bins: int = 10,
) -> pd.DataFrame:
    """Binned propensity-score counts per group (figure data, CSV-friendly)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for group, members in (("control", assignment.control), ("treated", assignment.treated)):
        vals = np.array([scores[c] for c in sorted(members)])
        counts, _ = np.histogram(vals, bins=edges)
        for b in range(bins):
            rows.append({
                "group": group,
                "bin_low": edges[b],
                "bin_high": edges[b + 1],
                "count": int(counts[b]),
            })
    return pd.DataFrame(rows)
