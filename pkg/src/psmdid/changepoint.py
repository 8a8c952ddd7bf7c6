"""Sequential, distribution-free detection of level shifts in a stream.

The monitor is a change-point-model scheme on the Mann-Whitney statistic:
at each time t the stream prefix is split at every admissible k, the
standardized two-sample statistic is maximized over k, and an alarm is
raised when the maximum exceeds a time-indexed threshold calibrated by
Monte Carlo for a target in-control average run length (ARL0). After an
alarm the monitor restarts from the estimated change point.

Threshold tables for ARL0 in {370, 500, 1000} ship with the package and can
be regenerated with scripts/generate_thresholds.py.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from datetime import date
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "ChangePoint",
    "DetectorConfig",
    "OutbreakPoint",
    "SUPPORTED_ARL0",
    "mann_whitney_split",
    "detect",
    "filter_rising",
    "promote_outbreaks",
]

SUPPORTED_ARL0 = (370, 500, 1000)
# longest segment the dense O(n^2) scan will accept
_MAX_SCAN = 5000
# after an alarm, restart skips every split whose statistic is within this
# fraction of the maximum (locations inside that run are indistinguishable)
_PLATEAU_FRACTION = 0.85


@dataclass(frozen=True)
class ChangePoint:
    index: int
    date: date | None
    direction: str
    statistic: float


@dataclass(frozen=True)
class DetectorConfig:
    arl0: int = 500
    warmup: int = 20
    restart: bool = True
    min_seg: int = 5
    # extra observations used to refine the change-location estimate after
    # an alarm; the alarm time itself (and so the run length) is unaffected
    location_lag: int = 10

    def __post_init__(self):
        if self.arl0 not in SUPPORTED_ARL0:
            raise ValueError(
                f"unsupported arl0 {self.arl0}; threshold tables exist for {SUPPORTED_ARL0}"
            )
        if self.warmup < 20:
            raise ValueError("warmup must be >= 20")
        if self.min_seg < 1:
            raise ValueError("min_seg must be >= 1")
        if self.location_lag < 0:
            raise ValueError("location_lag must be >= 0")


@dataclass(frozen=True)
class OutbreakPoint:
    anchor_date: date
    source: str
    index: int | None = None


def mann_whitney_split(series: Sequence[float], k: int) -> float:
    """Standardized Mann-Whitney statistic for splitting a series at k.

    U counts pairs (i <= k < j) with x_i < x_j (ties count one half);
    the return value is (U - mean) / sd with the tie-corrected moments,
    so positive values mean the post-split side tends larger. A fully
    tied series gives 0.
    """
    x = np.asarray(series, dtype=float)
    n = x.size
    if n < 4:
        raise ValueError("series must have length >= 4")
    if not 1 <= k < n:
        raise ValueError(f"split index k={k} must satisfy 1 <= k < {n}")
    if not np.isfinite(x).all():
        raise ValueError("series contains non-finite values")

    ranks = rankdata(x)
    s = float(ranks[:k].sum())
    u = k * (n - k) + k * (k + 1) / 2.0 - s
    mu = k * (n - k) / 2.0

    _, counts = np.unique(x, return_counts=True)
    tie_sum = float(np.sum(counts.astype(float) ** 3 - counts))
    var = k * (n - k) / 12.0 * ((n + 1) - tie_sum / (n * (n - 1.0)))
    if var <= 0:
        return 0.0
    return float((u - mu) / np.sqrt(var))


def _mw_scan(x: np.ndarray, min_seg: int):
    """Max standardized split statistic for every prefix of ``x``.

    Returns (max_stat, best_k, signed_stat) indexed by prefix length
    (position t-1 holds the prefix of length t); prefixes too short for a
    valid split get 0 / k=0. Dense O(n^2) memory, capped at _MAX_SCAN.
    """
    n = x.size
    if n > _MAX_SCAN:
        raise ValueError(f"segment of length {n} exceeds the dense-scan cap {_MAX_SCAN}")

    has_ties = np.unique(x).size < n
    less = (x[None, :] < x[:, None])
    L = np.cumsum(less, axis=1, dtype=np.int64)     # L[i, t-1] = #{j < t: x_j < x_i}

    t = np.arange(1, n + 1, dtype=np.float64)[None, :]
    k = np.arange(1, n + 1, dtype=np.float64)[:, None]

    if has_ties:
        tied = (x[None, :] == x[:, None])
        E = np.cumsum(tied, axis=1, dtype=np.float64)       # ties including self
        r = L + 0.5 * (E - 1.0) + 1.0                       # average prefix ranks
        # tie correction per prefix: sum over tie groups of (c^3 - c) equals
        # sum over elements of (c_e^2 - 1), c_e the element's tie count
        valid_elem = np.triu(np.ones((n, n), dtype=bool))   # element i in prefix t iff i <= t-1
        tie_sum = np.sum((E ** 2 - 1.0) * valid_elem, axis=0)[None, :]
    else:
        r = L + 1.0
        tie_sum = np.zeros((1, n))

    S = np.cumsum(r, axis=0)                        # S[k-1, t-1] = rank sum of first k
    U = k * (t - k) + k * (k + 1) / 2.0 - S
    mu = k * (t - k) / 2.0

    denom = np.where(t > 1, t * (t - 1.0), 1.0)
    var = k * (t - k) / 12.0 * ((t + 1.0) - tie_sum / denom)

    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(var > 0, (U - mu) / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)

    # admissible splits: min_seg <= k <= t - min_seg
    admissible = (k >= min_seg) & (k <= t - min_seg)
    zmask = np.where(admissible, z, 0.0)

    absz = np.abs(zmask)
    best_k = np.argmax(absz, axis=0)            # 0-based row -> split k = row + 1
    cols = np.arange(n)
    max_stat = absz[best_k, cols]
    signed = zmask[best_k, cols]
    return max_stat, best_k + 1, signed, zmask


class _ThresholdTable:
    def __init__(self, payload: dict):
        self.arl0 = int(payload["arl0"])
        self.min_seg = int(payload["min_seg"])
        self.grid = np.asarray(payload["t"], dtype=float)
        self.h = np.asarray(payload["h"], dtype=float)

    def at(self, t: np.ndarray) -> np.ndarray:
        """Threshold for prefix length t: linear interpolation on the grid,
        clamped to the end values outside it, +inf below the first entry."""
        out = np.interp(t, self.grid, self.h)
        return np.where(t < self.grid[0], np.inf, out)


_TABLE_CACHE: dict[int, _ThresholdTable] = {}


def load_threshold_table(arl0: int) -> _ThresholdTable:
    if arl0 not in SUPPORTED_ARL0:
        raise ValueError(
            f"unsupported arl0 {arl0}; threshold tables exist for {SUPPORTED_ARL0}"
        )
    if arl0 not in _TABLE_CACHE:
        ref = resources.files("psmdid") / "thresholds" / f"arl0_{arl0}.json"
        _TABLE_CACHE[arl0] = _ThresholdTable(json.loads(ref.read_text()))
    return _TABLE_CACHE[arl0]


def detect(
    series: Sequence[float],
    cfg: DetectorConfig,
    dates: Sequence[date] | None = None,
) -> list[ChangePoint]:
    """Run the sequential monitor over a stream and return detected shifts.

    Each detection reports the estimated change location (index of the
    first post-change observation), the shift direction, and the signed
    standardized statistic at detection time. With ``cfg.restart`` the
    monitor re-begins after each estimated change point; otherwise it
    stops at the first detection.
    """
    x = np.asarray(series, dtype=float)
    if x.size < cfg.warmup:
        raise ValueError(f"series length {x.size} shorter than warmup {cfg.warmup}")
    if not np.isfinite(x).all():
        raise ValueError("series contains missing or non-finite values")
    if dates is not None and len(dates) != x.size:
        raise ValueError("dates must align with the series")
    table = load_threshold_table(cfg.arl0)
    if table.min_seg != cfg.min_seg:
        raise ValueError(
            f"threshold table was generated with min_seg={table.min_seg}, "
            f"config requests {cfg.min_seg}"
        )

    points: list[ChangePoint] = []
    seg_start = 0
    while True:
        seg = x[seg_start:]
        n = seg.size
        if n < max(cfg.warmup, 2 * cfg.min_seg):
            break
        max_stat, best_k, signed, zmat = _mw_scan(seg, cfg.min_seg)
        t = np.arange(1, n + 1)
        h = table.at(t.astype(float))
        testable = t >= cfg.warmup
        alarms = np.where(testable & (max_stat > h))[0]
        if alarms.size == 0:
            break
        at = int(alarms[0])
        # locate the change with a short confirmation window past the alarm
        loc = min(at + cfg.location_lag, n - 1)
        k = int(best_k[loc])
        idx = seg_start + k
        z = float(signed[at])
        direction = "rising" if float(signed[loc]) > 0 else "falling"
        points.append(ChangePoint(
            index=idx,
            date=dates[idx] if dates is not None else None,
            direction=direction,
            statistic=z,
        ))
        if not cfg.restart:
            break
        # restart past the whole near-maximum run of split candidates: the
        # data cannot distinguish locations inside it, and leaving part of
        # the shifted run in the next segment would re-flag the same shift
        zcol = zmat[:, loc]
        peak = abs(zcol[k - 1])
        same_dir = np.sign(zcol) == np.sign(zcol[k - 1])
        near_max = same_dir & (np.abs(zcol) >= _PLATEAU_FRACTION * peak)
        restart_k = int(np.max(np.where(near_max)[0])) + 1
        seg_start += max(k, restart_k)
    return points


def filter_rising(
    points: Sequence[ChangePoint],
    series: Sequence[float],
    window: int = 14,
) -> list[ChangePoint]:
    """Keep points whose post-window mean exceeds the pre-window mean.

    Uses ``window`` observations on each side of the point, truncated at
    the series boundaries. Idempotent by construction.
    """
    x = np.asarray(series, dtype=float)
    kept = []
    for pt in points:
        if not 0 <= pt.index < x.size:
            raise ValueError(f"change point index {pt.index} outside series")
        before = x[max(0, pt.index - window):pt.index]
        after = x[pt.index:pt.index + window]
        if before.size and after.size and after.mean() > before.mean():
            kept.append(pt)
    return kept


def _post_slope(values: np.ndarray, idx: int, span: int = 30) -> float:
    seg = values[idx:idx + span]
    if seg.size < 2:
        return -np.inf
    t = np.arange(seg.size, dtype=float)
    return float(np.polyfit(t, seg, 1)[0])


def promote_outbreaks(
    points: Sequence[ChangePoint],
    ncsm: Sequence[float],
    max_anchors: int,
    merge_days: int = 45,
) -> list[OutbreakPoint]:
    """Promote detected rising shifts to outbreak anchor dates.

    Points are ranked by the least-squares slope of the case series over
    the 30 observations following each point; points within ``merge_days``
    of a stronger one are merged away; the top ``max_anchors`` survivors
    become anchors. Returns fewer (with a warning) when candidates run out.
    """
    if not points:
        raise ValueError("no change points to promote")
    values = np.asarray(ncsm, dtype=float)
    ranked = sorted(points, key=lambda p: (-_post_slope(values, p.index), p.index))
    chosen: list[ChangePoint] = []
    for pt in ranked:
        if all(abs(pt.index - c.index) > merge_days for c in chosen):
            chosen.append(pt)
    chosen = chosen[:max_anchors]
    if len(chosen) < max_anchors:
        warnings.warn(
            f"only {len(chosen)} outbreak candidates after merging; requested {max_anchors}"
        )
    chosen.sort(key=lambda p: p.index)
    out = []
    for pt in chosen:
        if pt.date is None:
            raise ValueError("change points need dates to become outbreak anchors")
        out.append(OutbreakPoint(anchor_date=pt.date, source="detected", index=pt.index))
    return out
