#!/usr/bin/env python3
"""Build the pinned snapshot fixture, covariates file, and benchmark config.

The snapshot is a synthetic 38-country x 626-day panel engineered so that
the full evaluation chain reproduces the benchmark grid shipped with the
test suite: treatment splits of the documented sizes, matched-sample
piecewise-linear fits with the documented effects, standard errors in the
documented significance bands, aggregate-series change points at the three
anchor dates, and summary moments matching the documented table.

Construction notes:
  * Outcome windows around each anchor follow the fitted model exactly:
    per country, Y_t = a_i + b*t + c_i*(t-30)*D_t + e_it with a common
    pre-break slope b per anchor. The per-country noise e_i is projected
    orthogonal to span{1, t, (t-30)D} and rescaled to a fixed norm, so the
    pooled least-squares coefficients of every matched sample equal the
    group means of (a_i, c_i) exactly and the residual sum of squares is
    controlled in closed form.
  * The c_i are the minimum-norm solution of the linear system pinning
    each grid cell's effect (difference of matched-group means) and, where
    a containment ratio is documented, the matched-control mean.
  * Everything is deterministic given the seeds below.

Run from the repository root:  python3 scripts/make_snapshot.py
"""

from __future__ import annotations

import gzip
import math
import sys
import warnings
from datetime import date, timedelta
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from psmdid.changepoint import DetectorConfig, detect, filter_rising, promote_outbreaks
from psmdid.did import build_design, fit_ols
from psmdid.panel import (
    COVARIATE_NAMES,
    MacroCovariates,
    OXCGRT_SCHEMA,
    PanelDataset,
)
from psmdid.psm import assign_treatment, fit_propensity, optimal_pair_match, predict_propensity

OUT_DIR = REPO / "data"

START = date(2020, 3, 15)
END = date(2021, 11, 30)
N_DAYS = (END - START).days + 1           # 626
DATES = [START + timedelta(days=k) for k in range(N_DAYS)]
DATE_POS = {d: i for i, d in enumerate(DATES)}

ANCHORS = [date(2020, 9, 14), date(2021, 2, 12), date(2021, 10, 4)]
# window time runs 1..60 with the anchor at offset 30
WINDOW_SLICES = [
    (DATE_POS[a - timedelta(days=29)], DATE_POS[a + timedelta(days=30)] + 1) for a in ANCHORS
]

# per anchor: common pre-break slope, window base level, level jitter sd;
# the aggregate post-break slope must clear the decoy margin for promotion
PRE_SLOPE = [1.0, 1.1, 1.3]
MIN_AGG_POST_SLOPE = 2.0
BASE_LEVEL = [85.0, 330.0, 500.0]
LEVEL_SD = [4.0, 10.0, 10.0]

# benchmark split thresholds (fixed across anchors)
THRESHOLDS = {"C1": 1, "C3": 1, "C4": 2, "C6": 0, "E1": 1, "E2": 0,
              "H2": 1, "H7": 2, "H8": 1}
GRID_POLICIES = list(THRESHOLDS)

# per (policy, anchor): effect on the matched sample, containment ratio
# (0 = clamped at zero, None = skip cell), control-group size
CELL_TARGETS = {
    ("C1", 0): (0.1451, 0.0, 4), ("C1", 1): (-0.4832, 11.07, 3), ("C1", 2): (4.4789, 0.0, 6),
    ("C3", 0): (-1.2940, 35.89, 4), ("C3", 1): (-6.1438, 100.99, 3), ("C3", 2): (-3.4422, 52.31, 10),
    ("C4", 0): (-0.6398, 22.66, 3), ("C4", 1): None, ("C4", 2): (-0.3187, 3.97, 3),
    ("C6", 0): None, ("C6", 1): (-2.6323, 45.99, 4), ("C6", 2): (-11.0200, 141.00, 3),
    ("E1", 0): (1.7113, 0.0, 4), ("E1", 1): (0.2987, 0.0, 3), ("E1", 2): (-0.0969, 1.18, 3),
    ("E2", 0): (0.2083, 0.0, 4), ("E2", 1): (-6.4460, 90.00, 3), ("E2", 2): (-0.2798, 3.44, 3),
    ("H2", 0): (-1.6034, 38.99, 4), ("H2", 1): (-3.0598, 61.40, 3), ("H2", 2): (0.2454, 0.0, 3),
    ("H7", 0): None, ("H7", 1): (-2.3722, 48.60, 3), ("H7", 2): (-5.5568, 63.73, 7),
    ("H8", 0): (-0.3310, 10.75, 4), ("H8", 1): (0.1783, 0.0, 3), ("H8", 2): (-4.0268, 45.00, 12),
}

# noise calibration: per anchor, the cell whose standard error is pinned
KEY_CELLS = [("C4", 0.2946), ("C6", 0.9096), ("C3", 1.19578)]

# stars the generated grid must produce (derived from the cell effects and
# the engineered standard-error bands)
EXPECTED_STARS = {
    ("C1", 0): "", ("C3", 0): "***", ("C4", 0): "*", ("E1", 0): "***",
    ("E2", 0): "", ("H2", 0): "***", ("H8", 0): "",
    ("C1", 1): "", ("C3", 1): "***", ("C6", 1): "**", ("E1", 1): "",
    ("E2", 1): "***", ("H2", 1): "**", ("H7", 1): "*", ("H8", 1): "",
    ("C1", 2): "**", ("C3", 2): "**", ("C4", 2): "", ("C6", 2): "***",
    ("E1", 2): "", ("E2", 2): "", ("H2", 2): "", ("H7", 2): "***", ("H8", 2): "***",
}

# non-missing cell counts the snapshot must reproduce per variable
TARGET_N = {
    "C1": 23729, "C2": 23732, "C3": 23732, "C4": 23732, "C5": 23717,
    "C6": 23707, "C7": 23662, "C8": 23730, "E1": 23724, "E2": 23717,
    "H1": 23680, "H2": 23709, "H3": 23625, "H6": 23690, "H7": 23709,
    "H8": 23693, "GRI": 23740, "SI": 23742, "CHI": 23741, "ESI": 23723,
    "NCSM": 23788, "R": 23668,
}

NCSM_MEAN, NCSM_SD = 182.23, 238.34
R_MEAN, R_SD = 1.08, 0.31
R_COUNTRY_NOISE = 0.215

# indicator scale maxima (min is 0 for all)
POLICY_MAX = {"C1": 3, "C2": 3, "C3": 2, "C4": 4, "C5": 2, "C6": 3, "C7": 2,
              "C8": 4, "E1": 2, "E2": 2, "H1": 2, "H2": 3, "H3": 2, "H6": 4,
              "H7": 5, "H8": 3}

# country, population, density, aged65, gdp_ppp, cvd, diabetes, beds, life_exp, hdi
COUNTRY_TABLE = [
    ("ALB", 2.88e6, 105, 14.0, 13965, 304, 10.1, 2.9, 78.6, 0.795),
    ("AUT", 8.92e6, 107, 19.2, 55806, 145, 6.4, 7.4, 81.5, 0.922),
    ("BEL", 11.56e6, 377, 19.0, 51934, 114, 4.3, 5.6, 81.6, 0.931),
    ("BGR", 6.93e6, 64, 21.3, 23156, 424, 5.8, 7.5, 75.1, 0.816),
    ("BIH", 3.28e6, 65, 17.0, 15935, 330, 10.1, 3.5, 77.4, 0.780),
    ("BLR", 9.40e6, 46, 15.2, 19268, 443, 5.2, 11.0, 74.8, 0.823),
    ("CHE", 8.65e6, 214, 18.6, 71352, 100, 5.6, 4.5, 83.8, 0.955),
    ("CYP", 1.21e6, 128, 13.4, 39973, 141, 9.2, 3.4, 81.0, 0.887),
    ("CZE", 10.70e6, 137, 19.8, 40585, 227, 6.8, 6.6, 79.4, 0.900),
    ("DEU", 83.24e6, 237, 21.5, 54076, 156, 10.4, 8.0, 81.3, 0.947),
    ("DNK", 5.83e6, 137, 20.0, 57781, 114, 6.4, 2.5, 80.9, 0.940),
    ("ESP", 47.35e6, 94, 19.4, 40172, 99, 7.2, 3.0, 83.6, 0.904),
    ("EST", 1.33e6, 31, 19.9, 38540, 255, 4.0, 4.7, 78.7, 0.892),
    ("FIN", 5.53e6, 18, 22.3, 49334, 153, 5.8, 3.3, 81.9, 0.938),
    ("FRA", 67.39e6, 119, 20.4, 46184, 86, 4.8, 6.0, 82.7, 0.901),
    ("GBR", 67.22e6, 275, 18.5, 46699, 122, 4.3, 2.5, 81.3, 0.932),
    ("GRC", 10.43e6, 81, 21.9, 29592, 175, 4.6, 4.2, 82.2, 0.888),
    ("HRV", 4.05e6, 71, 20.9, 28504, 254, 5.6, 5.5, 78.5, 0.851),
    ("HUN", 9.75e6, 105, 19.7, 33593, 278, 7.6, 7.0, 76.9, 0.854),
    ("IRL", 4.99e6, 70, 14.2, 89689, 126, 3.3, 3.0, 82.3, 0.955),
    ("ISL", 0.37e6, 3.5, 15.2, 55492, 118, 5.3, 2.9, 83.0, 0.949),
    ("ITA", 59.55e6, 200, 23.0, 42776, 113, 5.0, 3.2, 83.5, 0.892),
    ("LTU", 2.79e6, 43, 19.9, 38605, 343, 3.7, 6.6, 75.9, 0.882),
    ("LUX", 0.63e6, 242, 14.3, 118002, 128, 4.4, 4.5, 82.3, 0.916),
    ("LVA", 1.90e6, 30, 20.4, 32897, 350, 4.9, 5.6, 75.3, 0.866),
    ("MDA", 2.62e6, 91, 11.7, 13574, 408, 5.7, 5.8, 71.9, 0.750),
    ("MKD", 2.08e6, 83, 14.1, 16897, 323, 10.1, 4.3, 75.8, 0.774),
    ("NLD", 17.44e6, 508, 19.6, 57534, 110, 5.3, 3.3, 82.3, 0.944),
    ("NOR", 5.38e6, 15, 17.3, 65662, 114, 5.3, 3.6, 82.4, 0.957),
    ("POL", 37.85e6, 124, 18.1, 34218, 227, 5.9, 6.6, 78.7, 0.880),
    ("PRT", 10.30e6, 112, 22.4, 36246, 127, 9.9, 3.4, 82.1, 0.864),
    ("ROU", 19.24e6, 85, 18.8, 32238, 370, 9.7, 6.9, 76.1, 0.828),
    ("RUS", 145.93e6, 9, 15.1, 28213, 431, 6.2, 8.2, 72.6, 0.824),
    ("SRB", 6.91e6, 80, 19.1, 19762, 439, 10.1, 5.6, 76.0, 0.806),
    ("SVK", 5.46e6, 113, 16.2, 32184, 288, 7.3, 5.8, 77.5, 0.860),
    ("SVN", 2.10e6, 103, 20.2, 40820, 153, 6.9, 4.5, 81.3, 0.917),
    ("SWE", 10.38e6, 25, 20.1, 53208, 134, 4.8, 2.2, 82.8, 0.945),
    ("UKR", 43.73e6, 75, 16.7, 13341, 539, 7.1, 7.5, 72.1, 0.779),
]
COUNTRIES = [row[0] for row in COUNTRY_TABLE]
N_C = len(COUNTRIES)

T60 = np.arange(1, 61, dtype=float)
U60 = (T60 - 30.0) * (T60 >= 31.0)
TREND_BASIS = np.column_stack([np.ones(60), T60, U60])

# R aggregate path: (date, new level); first entry sets the starting level.
# Rising shifts at the three anchors plus three decoys; falls in between.
R_SEGMENTS = [
    (date(2020, 3, 15), 1.50),
    (date(2020, 5, 1), 0.82),    # falling
    (date(2020, 6, 20), 1.02),   # rising decoy
    (date(2020, 9, 14), 1.35),   # rising: anchor 1
    (date(2020, 10, 25), 0.95),  # falling
    (date(2021, 2, 12), 1.45),   # rising: anchor 2
    (date(2021, 3, 20), 0.88),   # falling
    (date(2021, 4, 20), 1.05),   # rising decoy
    (date(2021, 7, 5), 1.25),    # rising decoy
    (date(2021, 8, 20), 0.92),   # falling
    (date(2021, 10, 4), 1.26),   # rising: anchor 3
    (date(2021, 11, 10), 1.05),  # falling
]

# policy phase boundaries (values step at jittered versions of these)
PHASE_EDGES = [date(2020, 6, 1), date(2020, 9, 1), date(2020, 11, 1),
               date(2021, 2, 1), date(2021, 5, 1), date(2021, 8, 1),
               date(2021, 10, 15)]

# per-policy mean intensity by phase, tuned toward the documented moments
PHASE_MEANS = {
    "C1": [2.6, 0.9, 1.3, 2.3, 2.2, 1.0, 1.1, 1.4],
    "C2": [2.5, 1.1, 1.5, 2.2, 2.1, 1.1, 1.2, 1.4],
    "C3": [2.0, 1.0, 1.4, 1.9, 1.8, 1.1, 1.2, 1.5],
    "C4": [3.9, 2.2, 3.0, 3.9, 3.7, 2.6, 2.7, 3.1],
    "C5": [1.1, 0.2, 0.3, 0.7, 0.5, 0.1, 0.2, 0.3],
    "C6": [1.9, 0.3, 0.6, 1.5, 1.2, 0.3, 0.5, 0.8],
    "C7": [1.5, 0.3, 0.5, 1.1, 0.9, 0.2, 0.3, 0.5],
    "C8": [3.5, 2.1, 2.4, 3.1, 2.9, 2.2, 2.3, 2.5],
    "E1": [1.3, 1.5, 1.6, 1.7, 1.7, 1.5, 1.5, 1.5],
    "E2": [1.2, 1.2, 1.2, 1.4, 1.4, 1.2, 1.2, 1.2],
    "H1": [2.0, 2.0, 2.0, 2.0, 2.0, 1.9, 1.9, 1.9],
    "H2": [1.5, 2.2, 2.4, 2.5, 2.5, 2.4, 2.4, 2.4],
    "H3": [1.3, 1.6, 1.6, 1.6, 1.6, 1.5, 1.5, 1.5],
    "H6": [1.0, 1.8, 2.4, 3.0, 2.9, 2.3, 2.3, 2.4],
    "H7": [0.0, 0.0, 0.0, 1.2, 2.9, 3.8, 4.3, 4.6],
    "H8": [2.4, 1.6, 1.8, 2.3, 2.1, 1.6, 1.6, 1.8],
}

CFG_NAME = "benchmark.cfg"


def build_covariates():
    covs = {}
    rows = []
    for row in COUNTRY_TABLE:
        key = dict(zip(["country"] + COVARIATE_NAMES, row))
        covs[row[0]] = MacroCovariates(**{k: float(v) for k, v in key.items() if k != "country"})
        rows.append(key)
    return covs, rows


def hdi_z():
    hdi = np.array([row[9] for row in COUNTRY_TABLE])
    return (hdi - hdi.mean()) / hdi.std()


def design_anchor_assignments(rng):
    """Pick each grid cell's control set and the anchor-date policy values.

    Controls lean toward lower-HDI countries (confounding the split with
    the covariates); the tilt direction alternates by policy so splits stay
    distinct. Values are integers consistent with the cell's threshold.
    """
    z = hdi_z()
    anchor_values = {p: [dict() for _ in ANCHORS] for p in POLICY_MAX}
    control_sets = {}

    for p_idx, policy in enumerate(GRID_POLICIES):
        thr = THRESHOLDS[policy]
        hi = POLICY_MAX[policy]
        tilt = 0.8 if p_idx % 2 == 0 else -0.8
        for a_idx in range(3):
            target = CELL_TARGETS[(policy, a_idx)]
            if (policy, a_idx) == ("H7", 0):
                # vaccination not yet rolled out: everyone at zero
                for c in COUNTRIES:
                    anchor_values[policy][a_idx][c] = 0
                continue
            if target is None:
                n_small = 2
                small_is_treated = policy == "C6"
            else:
                n_small = target[2]
                small_is_treated = False
            score = tilt * z + rng.normal(0.0, 1.2, N_C)
            order = np.argsort(score)
            small = [COUNTRIES[i] for i in order[:n_small]]
            small_set = frozenset(small)
            if not small_is_treated and target is not None:
                if (a_idx, small_set) in control_sets.values():
                    score = tilt * z + rng.normal(0.0, 1.2, N_C)
                    order = np.argsort(score)
                    small = [COUNTRIES[i] for i in order[:n_small]]
                    small_set = frozenset(small)
                control_sets[(policy, a_idx)] = (a_idx, small_set)
            for c in COUNTRIES:
                in_small = c in small_set
                is_control = in_small if not small_is_treated else not in_small
                if is_control:
                    v = thr if rng.uniform() < 0.7 else max(0, thr - 1)
                else:
                    v = min(hi, thr + 1) if rng.uniform() < 0.75 else min(hi, thr + 2)
                anchor_values[policy][a_idx][c] = int(v)

    # policies outside the grid: near-uniform at anchors so a default
    # median-threshold split degenerates
    for policy in POLICY_MAX:
        if policy in GRID_POLICIES:
            continue
        for a_idx in range(3):
            level = int(round(PHASE_MEANS[policy][_phase_of(ANCHORS[a_idx])]))
            level = min(max(level, 0), POLICY_MAX[policy])
            for c in COUNTRIES:
                anchor_values[policy][a_idx][c] = level
    return anchor_values


def _phase_of(day):
    for i, edge in enumerate(PHASE_EDGES):
        if day < edge:
            return i
    return len(PHASE_EDGES)


# means and sample sds the indicators aim for, used by the calibration loop
INDICATOR_MOMENTS = {
    "C1": (1.66, 0.87), "C2": (1.67, 0.76), "C3": (1.52, 0.61), "C4": (3.16, 1.10),
    "C5": (0.43, 0.59), "C6": (0.88, 0.82), "C7": (0.65, 0.84), "C8": (2.61, 0.87),
    "E1": (1.55, 0.66), "E2": (1.24, 0.76), "H1": (1.96, 0.21), "H2": (2.33, 0.69),
    "H3": (1.52, 0.62), "H6": (2.26, 1.11), "H7": (2.00, 2.10), "H8": (1.88, 0.95),
}


def _draw_policy(rng, policy, anchor_values, shift, spread):
    hi = POLICY_MAX[policy]
    arr = np.zeros((N_C, N_DAYS))
    for i, c in enumerate(COUNTRIES):
        jitter = rng.integers(-6, 7, len(PHASE_EDGES))
        edges = [DATE_POS[e] + int(j) for e, j in zip(PHASE_EDGES, jitter)]
        bounds = [0] + edges + [N_DAYS]
        for ph in range(len(bounds) - 1):
            mean = PHASE_MEANS[policy][ph] + shift
            v = int(np.clip(round(mean + rng.normal(0, spread)), 0, hi))
            arr[i, bounds[ph]:bounds[ph + 1]] = v
        # pin a plateau around each anchor to the designed value
        for a_idx, a in enumerate(ANCHORS):
            pos = DATE_POS[a]
            v = anchor_values[policy][a_idx][c]
            arr[i, max(0, pos - 10):min(N_DAYS, pos + 11)] = v
    # guarantee the full scale is attained somewhere
    if arr.min() > 0:
        arr[int(rng.integers(N_C)), DATE_POS[date(2020, 7, 15)]] = 0
    if arr.max() < hi:
        arr[int(rng.integers(N_C)), DATE_POS[date(2021, 1, 20)]] = hi
    return arr


def build_policy_paths(seed, anchor_values):
    """Step-function paths per (country, policy) honoring the anchor pins.

    A short fixed-point loop nudges each policy's draw distribution until
    its panel moments sit near the documented values (anchor plateaus are
    pinned throughout, so the evaluation grid never shifts)."""
    arrays = {}
    for p_idx, policy in enumerate(POLICY_MAX):
        target_mean, target_sd = INDICATOR_MOMENTS[policy]
        shift, spread = 0.0, 0.8
        best = None
        for it in range(6):
            rng = np.random.default_rng(seed + 1000 * p_idx + it)
            arr = _draw_policy(rng, policy, anchor_values, shift, spread)
            mean, sd = arr.mean(), arr.std(ddof=1)
            err = abs(mean - target_mean) / max(target_mean, 0.2) +                 abs(sd - target_sd) / target_sd
            if best is None or err < best[0]:
                best = (err, arr)
            if abs(mean - target_mean) / max(target_mean, 0.2) < 0.03 and                     abs(sd - target_sd) / target_sd < 0.05:
                break
            shift += float(np.clip(target_mean - mean, -0.6, 0.6))
            spread *= float(np.clip(target_sd / max(sd, 1e-6), 0.6, 1.6))
            spread = float(np.clip(spread, 0.12, 2.2))
        arrays[policy] = best[1]
    return arrays


def compute_indices(policies):
    """Composite 0-100 indices as rescaled means of indicator groups."""
    def rescaled_mean(codes):
        stacked = np.stack([policies[c] / POLICY_MAX[c] for c in codes])
        return 100.0 * stacked.mean(axis=0)

    c_codes = [f"C{i}" for i in range(1, 9)]
    h_codes = ["H1", "H2", "H3", "H6", "H7", "H8"]
    e_codes = ["E1", "E2"]
    return {
        "GRI": rescaled_mean(c_codes + e_codes + h_codes),
        "SI": rescaled_mean(c_codes + ["H1"]),
        "CHI": rescaled_mean(c_codes + h_codes),
        "ESI": rescaled_mean(e_codes),
    }


def matched_sets(policies, covs):
    """Run the real split/score/match chain per grid cell."""
    schema = [v for v in OXCGRT_SCHEMA if v.name in policies]
    panel = PanelDataset(
        countries=list(COUNTRIES), dates=list(DATES),
        variables=schema, values={k: v.copy() for k, v in policies.items()},
    )
    cells = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for (policy, a_idx), target in CELL_TARGETS.items():
            if target is None:
                continue
            assignment = assign_treatment(
                panel, covs, policy, ANCHORS[a_idx], THRESHOLDS[policy])
            data = [(covs[c], assignment.label(c)) for c in assignment.countries]
            # tiny control groups separate perfectly in 9 covariates; the
            # ridge keeps the scores finite and the chain deterministic
            model = fit_propensity(data)
            scores = {c: predict_propensity(model, covs[c]) for c in assignment.countries}
            match = optimal_pair_match(assignment, scores)
            if len(match.pairs) != target[2]:
                raise RuntimeError(
                    f"{policy}@{a_idx}: expected {target[2]} pairs, got {len(match.pairs)}")
            cells[(policy, a_idx)] = {
                "assignment": assignment,
                "match": match,
                "controls": match.matched_controls,
                "treated": match.matched_treated,
            }
    return cells


def solve_post_slopes(a_idx, cells):
    """Minimum-variance c vector satisfying every cell's effect (and, where
    a containment ratio is pinned, the matched-control mean).

    Minimizing the spread of c keeps the matched fits' deterministic
    residual dispersion small, leaving room for the calibrated noise."""
    pos = {c: i for i, c in enumerate(COUNTRIES)}
    b = PRE_SLOPE[a_idx]

    rows, rhs = [], []
    for (policy, idx), info in cells.items():
        if idx != a_idx:
            continue
        beta4, cr, m = CELL_TARGETS[(policy, idx)]
        row = np.zeros(N_C)
        for c in info["treated"]:
            row[pos[c]] += 1.0 / m
        for c in info["controls"]:
            row[pos[c]] -= 1.0 / m
        rows.append(row)
        rhs.append(beta4)
        if cr and cr > 0:
            level = abs(beta4) / cr * 100.0 - b
            row2 = np.zeros(N_C)
            for c in info["controls"]:
                row2[pos[c]] += 1.0 / m
            rows.append(row2)
            rhs.append(level)

    A = np.vstack(rows)
    d = np.asarray(rhs)
    n_rows = A.shape[0]
    # minimize c'Pc + eps*c'c subject to Ac = d, P the centering projector
    P = np.eye(N_C) - np.full((N_C, N_C), 1.0 / N_C)
    kkt = np.block([
        [2.0 * (P + 1e-8 * np.eye(N_C)), A.T],
        [A, np.zeros((n_rows, n_rows))],
    ])
    sol = np.linalg.solve(kkt, np.concatenate([np.zeros(N_C), d]))
    c = sol[:N_C]
    if np.max(np.abs(A @ c - d)) > 1e-8:
        raise RuntimeError(f"anchor {a_idx}: constraint solve failed")
    agg_slope = b + float(c.mean())
    if agg_slope < MIN_AGG_POST_SLOPE:
        raise RuntimeError(
            f"anchor {a_idx}: aggregate post-break slope {agg_slope:.2f} below "
            f"the promotion margin {MIN_AGG_POST_SLOPE}")
    print(f"  anchor {a_idx}: c in [{c.min():.2f}, {c.max():.2f}], "
          f"sd {c.std():.2f}, aggregate slope {agg_slope:.2f}")
    return c


def _inv44_one_pair():
    """(X'X)^-1 diagonal entry for the effect column, one matched pair;
    the pooled moment matrix for m pairs is m times this one."""
    rows = []
    for p in (0.0, 1.0):
        X = np.column_stack([np.ones(60), T60, np.full(60, p), U60, U60 * p])
        rows.append(X)
    X = np.vstack(rows)
    return float(np.linalg.inv(X.T @ X)[4, 4])


INV44_ONE = _inv44_one_pair()


def burst_noise(rng, norm2, headroom):
    """Skewed residual path: positive case bursts over the trend, bounded
    dips below it, orthogonal to the trend basis, with a fixed norm.

    Retries until the scaled path's lowest dip stays inside the positivity
    headroom; burst-shaped residuals carry much more energy per unit of
    downside than white noise."""
    grid = np.arange(60, dtype=float)
    for _ in range(200):
        e = np.zeros(60)
        for _ in range(int(rng.integers(3, 7))):
            center = rng.uniform(0.0, 60.0)
            width = rng.uniform(2.0, 7.0)
            amp = rng.uniform(0.4, 1.0)
            e += amp * np.exp(-0.5 * ((grid - center) / width) ** 2)
        coef, *_ = np.linalg.lstsq(TREND_BASIS, e, rcond=None)
        e = e - TREND_BASIS @ coef
        e *= math.sqrt(norm2 / float(e @ e))
        if e.min() >= -headroom:
            return e
    raise RuntimeError(f"no residual path fits headroom {headroom:.1f} at energy {norm2:.0f}")


def build_windows(rng, cells):
    """Anchor windows with exact effects and per-cell residual budgets.

    A single residual scale per anchor is set by the key cell; every other
    cell's residual sum then follows from the shared scale. The per-country
    burst energies v_i solve the cell-sum system under positivity caps."""
    from scipy.optimize import lsq_linear

    pos = {cc: i for i, cc in enumerate(COUNTRIES)}
    windows = []
    abc = []
    for a_idx in range(3):
        c = solve_post_slopes(a_idx, cells)
        a = BASE_LEVEL[a_idx] + rng.normal(0.0, LEVEL_SD[a_idx], N_C)
        b = PRE_SLOPE[a_idx]
        struct = a[:, None] + b * T60[None, :] + c[:, None] * U60[None, :]

        key_policy, key_se = KEY_CELLS[a_idx]
        m_key = CELL_TARGETS[(key_policy, a_idx)][2]
        sigma2 = key_se ** 2 * m_key / INV44_ONE

        rows, rhs = [], []
        for (policy, idx), info in cells.items():
            if idx != a_idx:
                continue
            m = len(info["controls"])
            det = _noiseless_rss(struct, info)
            need = sigma2 * (120 * m - 5) - det
            if need <= 0:
                raise RuntimeError(
                    f"{policy}@{a_idx}: deterministic dispersion {det:.0f} exceeds "
                    f"the residual budget {sigma2 * (120 * m - 5):.0f}")
            row = np.zeros(N_C)
            for cc in info["controls"] + info["treated"]:
                row[pos[cc]] = 1.0
            rows.append(row)
            rhs.append(need)

        headroom = np.maximum(struct.min(axis=1) - 6.0, 10.0)
        caps = 60.0 * (headroom / 1.45) ** 2
        A = np.vstack(rows)
        d = np.asarray(rhs)
        res = lsq_linear(A, d, bounds=(1e3 * np.ones(N_C), caps), tol=1e-14)
        rel = np.max(np.abs(A @ res.x - d) / d)
        if rel > 1e-7:
            raise RuntimeError(f"anchor {a_idx}: residual budget solve off by {rel:.2e}")
        v = res.x
        untouched = A.sum(axis=0) == 0
        v[untouched] = float(np.median(v[~untouched]))

        noise = np.stack([
            burst_noise(rng, v[i], headroom[i]) for i in range(N_C)
        ])
        windows.append(struct + noise)
        abc.append((a, b, c))
        print(f"  anchor {a_idx}: sigma {math.sqrt(sigma2):.1f}, "
              f"residual energies {v.min():.0f}..{v.max():.0f}, "
              f"window min {(struct + noise).min():.1f}")
    return windows, abc


def _noiseless_rss(struct, info):
    pos = {c: i for i, c in enumerate(COUNTRIES)}
    rss = 0.0
    for group in ("controls", "treated"):
        members = info[group]
        rows = np.stack([struct[pos[c]] for c in members])
        mean_coef, *_ = np.linalg.lstsq(
            TREND_BASIS, rows.mean(axis=0), rcond=None)
        fitted = TREND_BASIS @ mean_coef
        rss += float(((rows - fitted[None, :]) ** 2).sum())
    return rss


def keyframe_curve(levels, positions, n):
    """Log-linear interpolation through (position, level) keyframes."""
    out = np.empty(n)
    logs = np.log(np.maximum(levels, 1e-6))
    for seg in range(len(positions) - 1):
        p0, p1 = positions[seg], positions[seg + 1]
        span = max(p1 - p0, 1)
        frac = np.arange(span) / span
        out[p0:p1] = np.exp(logs[seg] + frac * (logs[seg + 1] - logs[seg]))
    out[positions[-1]:] = np.exp(logs[-1])
    return out


def assemble_ncsm(rng, windows, abc, winter_scale, surge_scale):
    """Full NCSM paths: engineered windows plus keyframed wave segments."""
    ncsm = np.zeros((N_C, N_DAYS))
    for a_idx, (lo, hi) in enumerate(WINDOW_SLICES):
        ncsm[:, lo:hi] = windows[a_idx]

    (a1, b1, c1), (a2, b2, c2), (a3, b3, c3) = abc
    w1_lo, w1_hi = WINDOW_SLICES[0]
    w2_lo, w2_hi = WINDOW_SLICES[1]
    w3_lo, w3_hi = WINDOW_SLICES[2]

    for i in range(N_C):
        u = math.exp(rng.normal(0.0, 0.15))
        start_a1 = windows[0][i, 0]
        end_a1 = windows[0][i, -1]
        start_a2 = windows[1][i, 0]
        end_a2 = windows[1][i, -1]
        start_a3 = windows[2][i, 0]
        end_a3 = windows[2][i, -1]

        # before the first window: early wave fading into the summer lull
        pre_positions = [0, DATE_POS[date(2020, 5, 1)], DATE_POS[date(2020, 6, 20)], w1_lo]
        pre_levels = [62.0 * u, 40.0 * u, 29.0 * u, max(start_a1, 25.0)]
        ncsm[i, :w1_lo] = keyframe_curve(pre_levels, pre_positions, N_DAYS)[:w1_lo]

        # between window 1 and window 2: the winter wave
        mid1_pos = [w1_hi, DATE_POS[date(2020, 11, 20)], DATE_POS[date(2020, 12, 28)],
                    DATE_POS[date(2021, 1, 13)] + 1]
        mid1_lvl = [end_a1, max(end_a1 * 1.8 * winter_scale, 14.0),
                    max(end_a1 * 2.9 * winter_scale, 14.0), start_a2]
        curve = keyframe_curve(mid1_lvl, mid1_pos, N_DAYS)
        ncsm[i, w1_hi:w2_lo] = curve[w1_hi:w2_lo]

        # between window 2 and window 3: spring decline, gentle summer bump
        mid2_pos = [w2_hi, DATE_POS[date(2021, 4, 25)], DATE_POS[date(2021, 6, 10)],
                    DATE_POS[date(2021, 7, 5)], DATE_POS[date(2021, 8, 4)],
                    DATE_POS[date(2021, 9, 4)] + 1]
        trough = lambda f: max(end_a2 * f * winter_scale, 14.0)
        mid2_lvl = [end_a2, trough(0.55), trough(0.30), trough(0.30), trough(0.38), start_a3]
        curve = keyframe_curve(mid2_lvl, mid2_pos, N_DAYS)
        ncsm[i, w2_hi:w3_lo] = curve[w2_hi:w3_lo]

        # after window 3: the year-end surge (the heavy right tail)
        post_pos = [w3_hi - 1, N_DAYS - 1]
        post_lvl = [end_a3, end_a3 * surge_scale]
        curve = keyframe_curve(post_lvl, post_pos, N_DAYS)
        ncsm[i, w3_hi:] = curve[w3_hi:]
    return ncsm


def solve_ncsm_knobs(rng_seed, windows, abc):
    """Pick (winter_scale, surge_scale) so global moments hit the targets."""
    w, g = 1.0, 4.0
    for _ in range(60):
        rng = np.random.default_rng(rng_seed)
        ncsm = assemble_ncsm(rng, windows, abc, w, g)
        mean = ncsm.mean()
        sd = ncsm.std(ddof=1)
        if abs(mean - NCSM_MEAN) < 0.4 and abs(sd - NCSM_SD) < 0.8:
            return w, g, ncsm
        w *= (1.0 + 0.9 * (NCSM_MEAN - mean) / NCSM_MEAN)
        g *= (1.0 + 0.9 * (NCSM_SD - sd) / NCSM_SD)
        w = float(np.clip(w, 0.04, 3.0))
        g = float(np.clip(g, 1.0, 12.0))
    raise RuntimeError(f"NCSM moment calibration failed: mean {mean:.2f}, sd {sd:.2f}")


def build_r(rng):
    """Per-country reproduction-rate series around the designed step path."""
    path = np.empty(N_DAYS)
    for day, level in R_SEGMENTS:
        path[DATE_POS[day]:] = level
    # affine-rescale the path so the panel moments land on target
    target_path_sd = math.sqrt(max(R_SD ** 2 - R_COUNTRY_NOISE ** 2, 1e-6))
    path = R_MEAN + (path - path.mean()) * (target_path_sd / path.std())
    if path.min() < 0.3:
        raise RuntimeError("rescaled R path dips too low")
    r = path[None, :] + rng.normal(0.0, R_COUNTRY_NOISE, (N_C, N_DAYS))
    return np.maximum(r, 0.05), path



def select_r_draw():
    """Deterministically pick an R noise seed whose detected-and-promoted
    anchors all land within 3 days of the designed dates (the detector's
    location estimate carries a little noise; the seed is part of the
    snapshot recipe)."""
    for attempt in range(30):
        seed = 614_005 + attempt * 97
        r_values, r_path = build_r(np.random.default_rng(seed))
        masked = r_values.copy()
        agg = masked.mean(axis=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            points = detect(agg, DetectorConfig(arl0=500), dates=DATES)
            rising = filter_rising(points, agg)
        if len(rising) != 6:
            continue
        rising_dates = sorted(p.date for p in rising)
        wanted = sorted([date(2020, 6, 20), date(2020, 9, 14), date(2021, 2, 12),
                         date(2021, 4, 20), date(2021, 7, 5), date(2021, 10, 4)])
        if all(abs((got - want).days) <= 3 for got, want in zip(rising_dates, wanted)):
            print(f"R noise seed {seed} accepted on attempt {attempt}")
            return r_values, r_path
    raise RuntimeError("no R draw produced clean anchor locations")


def apply_missing(rng, values):
    """Punch per-variable missing runs, matching the documented counts."""
    protected = np.zeros(N_DAYS, dtype=bool)
    for a in ANCHORS:
        pos = DATE_POS[a]
        protected[max(0, pos - 15):min(N_DAYS, pos + 16)] = True

    for name, arr in values.items():
        target_missing = 23788 - TARGET_N[name]
        if target_missing <= 0:
            continue
        protect = protected if name in POLICY_MAX or name in ("GRI", "SI", "CHI", "ESI") else None
        punched = 0
        guard = 0
        while punched < target_missing:
            guard += 1
            if guard > 100000:
                raise RuntimeError(f"could not place missing cells for {name}")
            i = int(rng.integers(N_C))
            j = int(rng.integers(N_DAYS))
            run = min(int(rng.integers(1, 6)), target_missing - punched)
            if j + run > N_DAYS:
                continue
            window = slice(j, j + run)
            if protect is not None and protected[window].any():
                continue
            if np.isnan(arr[i, window]).any():
                continue
            arr[i, window] = np.nan
            punched += run
    return values


def write_wide_csv(values, path):
    names = [v.name for v in OXCGRT_SCHEMA]
    int_vars = set(POLICY_MAX)
    with gzip.open(path, "wt", newline="") as fh:
        fh.write("country,date," + ",".join(names) + "\n")
        for i, c in enumerate(COUNTRIES):
            for j, d in enumerate(DATES):
                cells = [c, d.isoformat()]
                for name in names:
                    v = values[name][i, j]
                    if np.isnan(v):
                        cells.append("")
                    elif name in int_vars:
                        cells.append(str(int(v)))
                    elif name == "R":
                        cells.append(f"{v:.4f}")
                    elif name in ("GRI", "SI", "CHI", "ESI"):
                        cells.append(f"{v:.2f}")
                    else:
                        cells.append(f"{v:.6f}")
                fh.write(",".join(cells) + "\n")


def write_support_files(cov_rows):
    cov_path = OUT_DIR / "macro_covariates.csv"
    with open(cov_path, "w") as fh:
        fh.write("country," + ",".join(COVARIATE_NAMES) + "\n")
        for row in cov_rows:
            fh.write(",".join(str(row[k]) for k in ["country"] + COVARIATE_NAMES) + "\n")

    cfg = OUT_DIR / CFG_NAME
    policies = ", ".join(f"{p}:{THRESHOLDS[p]}" for p in GRID_POLICIES)
    cfg.write_text(
        "# benchmark configuration for the pinned snapshot\n"
        "panel = snapshot.csv.gz\n"
        "panel_format = wide\n"
        "covariates = macro_covariates.csv\n"
        "outcome = NCSM\n"
        f"anchors = {', '.join(a.isoformat() for a in ANCHORS)}\n"
        f"policies = {policies}\n"
        "min_group_size = 3\n"
        "max_gap = 3\n"
    )


def verify(values, covs, cells):
    """Re-run the full chain on the assembled arrays and check every target."""
    from psmdid.pipeline import EvaluationConfig, run_grid
    from psmdid.changepoint import OutbreakPoint

    panel = PanelDataset(
        countries=list(COUNTRIES), dates=list(DATES),
        variables=list(OXCGRT_SCHEMA), values={k: v.copy() for k, v in values.items()},
    )

    cfg = EvaluationConfig(
        panel_path="", covariates_path="",
        policies=[(p, float(THRESHOLDS[p])) for p in GRID_POLICIES],
        anchors=[OutbreakPoint(anchor_date=a, source="configured") for a in ANCHORS],
    )
    grid = run_grid(cfg, panel=panel, covariates=covs)

    problems = []
    for cell in grid:
        a_idx = ANCHORS.index(cell.anchor)
        target = CELL_TARGETS[(cell.policy, a_idx)]
        tag = f"{cell.policy}@{cell.anchor}"
        if target is None:
            if cell.status != "skipped":
                problems.append(f"{tag}: expected skip, got {cell.status}")
            continue
        if cell.status != "fit":
            problems.append(f"{tag}: expected fit, got {cell.status} ({cell.reason})")
            continue
        beta4, cr, m = target
        f = cell.fit
        if abs(f.beta[4] - beta4) > 2e-3:
            problems.append(f"{tag}: effect {f.beta[4]:.4f} vs target {beta4}")
        if cr == 0.0 and f.cr is not None and f.cr > 1e-9:
            problems.append(f"{tag}: expected zero CR, got {f.cr:.2f}")
        if cr and cr > 0 and (f.cr is None or abs(f.cr - cr) > 0.25):
            problems.append(f"{tag}: CR {f.cr} vs target {cr}")
        want = EXPECTED_STARS[(cell.policy, a_idx)]
        if f.stars[4] != want:
            problems.append(
                f"{tag}: stars {f.stars[4]!r} (p={f.p_values[4]:.4f}, se={f.se[4]:.4f}) "
                f"vs expected {want!r}")
        if cell.n_pairs != m:
            problems.append(f"{tag}: {cell.n_pairs} pairs vs {m}")

    c3 = next(c for c in grid if c.policy == "C3" and c.anchor == ANCHORS[2])
    print(f"C3@{ANCHORS[2]}: beta4 {c3.fit.beta[4]:.4f}, se {c3.fit.se[4]:.4f}, "
          f"p {c3.fit.p_values[4]:.5f}, CR {c3.fit.cr:.2f}%")
    if abs(c3.fit.p_values[4] - 0.0041) > 1e-3:
        problems.append(f"C3 anchor-3 p-value {c3.fit.p_values[4]:.5f} vs 0.0041")
    if c3.n_control != 10 or c3.n_treated != 28:
        problems.append(f"C3 anchor-3 split {c3.n_control}/{c3.n_treated} vs 10/28")

    # moments
    from psmdid.panel import summarize
    stats = summarize(panel).set_index("variable")
    for name, mean, sd in [("NCSM", NCSM_MEAN, NCSM_SD), ("R", R_MEAN, R_SD)]:
        got_m, got_s = stats.loc[name, "mean"], stats.loc[name, "sd"]
        if abs(got_m - mean) / mean > 0.015 or abs(got_s - sd) / sd > 0.015:
            problems.append(f"{name} moments ({got_m:.2f}, {got_s:.2f}) vs ({mean}, {sd})")
    for name, hi in POLICY_MAX.items():
        if stats.loc[name, "min"] != 0 or stats.loc[name, "max"] != hi:
            problems.append(f"{name} range [{stats.loc[name, 'min']}, {stats.loc[name, 'max']}]"
                            f" vs [0, {hi}]")
    for name, n in TARGET_N.items():
        if int(stats.loc[name, "n"]) != n:
            problems.append(f"{name} n={int(stats.loc[name, 'n'])} vs {n}")

    # change points on the aggregate rate series
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        agg = panel.date_mean("R")
        points = detect(agg, DetectorConfig(arl0=500), dates=DATES)
        rising = filter_rising(points, agg)
        ncsm_mean = panel.date_mean("NCSM")
        anchors = promote_outbreaks(rising, ncsm_mean, max_anchors=3)
    print(f"detected {len(points)} points, {len(rising)} rising; "
          f"promoted: {[a.anchor_date.isoformat() for a in anchors]}")
    if len(rising) != 6:
        problems.append(f"{len(rising)} rising change points vs 6")
    for want, got in zip(ANCHORS, anchors):
        if abs((got.anchor_date - want).days) > 5:
            problems.append(f"promoted {got.anchor_date} vs anchor {want}")

    if problems:
        raise RuntimeError("snapshot verification failed:\n  " + "\n  ".join(problems))
    print("verification passed")
    # show the rendered benchmark table
    from psmdid.pipeline import render_table, rank_policies
    print(render_table(grid))
    print("ranking:", rank_policies(grid)[:4])


def main():
    OUT_DIR.mkdir(exist_ok=True)
    covs, cov_rows = build_covariates()

    rng_assign = np.random.default_rng(614_001)
    anchor_values = design_anchor_assignments(rng_assign)
    policies = build_policy_paths(614_002, anchor_values)

    cells = matched_sets(policies, covs)
    print(f"matched {len(cells)} grid cells")

    windows, abc = build_windows(np.random.default_rng(614_003), cells)
    w, g, ncsm = solve_ncsm_knobs(614_004, windows, abc)
    print(f"NCSM knobs: winter x{w:.3f}, surge x{g:.3f}; "
          f"mean {ncsm.mean():.2f}, sd {ncsm.std(ddof=1):.2f}, min {ncsm.min():.1f}")
    if ncsm.min() <= 10.0:
        raise RuntimeError("NCSM floor violated")

    r_values, r_path = select_r_draw()

    values = dict(policies)
    values.update(compute_indices(policies))
    values["NCSM"] = ncsm
    values["R"] = r_values
    values = apply_missing(np.random.default_rng(614_006), values)

    verify(values, covs, cells)

    write_wide_csv(values, OUT_DIR / "snapshot.csv.gz")
    write_support_files(cov_rows)
    print(f"wrote {OUT_DIR / 'snapshot.csv.gz'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
