#!/usr/bin/env python3
"""Regenerate the sequential-monitor threshold tables.

Simulates in-control streams (iid continuous draws), computes the running
max standardized split statistic for every prefix, and calibrates the
threshold curve h_t per target ARL0 so that the conditional false-alarm
rate among surviving streams is 1/ARL0 at every step. Tables are written
to src/psmdid/thresholds/arl0_<value>.json.

Run from the repository root:

    python3 scripts/generate_thresholds.py [--streams 6000] [--length 700]

The incremental pair-count recursion used here is exact for tie-free
streams; it is cross-checked against the package's dense scan before the
simulation starts.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from psmdid.changepoint import _mw_scan  # noqa: E402

ARL0_TARGETS = (370, 500, 1000)
WARMUP = 20
MIN_SEG = 5
SMOOTH_START = 150
SMOOTH_WINDOW = 15


def _max_paths_numpy(X: np.ndarray, min_seg: int) -> np.ndarray:
    """M[n, t-1] = max_k |Z_k| over the length-t prefix of stream n.

    U_t[k] = U_{t-1}[k] + #{i <= k : x_i < x_t}; no tie handling (draws are
    continuous), so the variance is k(t-k)(t+1)/12.
    """
    n_streams, T = X.shape
    U = np.zeros((n_streams, T))
    M = np.zeros((n_streams, T))
    for t in range(2, T + 1):
        less = X[:, :t - 1] < X[:, t - 1:t]
        U[:, :t - 1] += np.cumsum(less, axis=1)
        lo, hi = min_seg, t - min_seg
        if hi < lo:
            continue
        ks = np.arange(lo, hi + 1, dtype=float)
        mu = ks * (t - ks) / 2.0
        sd = np.sqrt(ks * (t - ks) * (t + 1) / 12.0)
        z = (U[:, lo - 1:hi] - mu) / sd
        M[:, t - 1] = np.max(np.abs(z), axis=1)
    return M


def _make_numba_kernel():
    try:
        import numba
    except ImportError:
        return None

    @numba.njit(cache=True, parallel=True)
    def kernel(X, min_seg):
        n_streams, T = X.shape
        M = np.zeros((n_streams, T))
        for s in numba.prange(n_streams):
            x = X[s]
            U = np.zeros(T)
            for t in range(2, T + 1):
                xt = x[t - 1]
                c = 0.0
                for i in range(t - 1):
                    if x[i] < xt:
                        c += 1.0
                    U[i] += c
                lo, hi = min_seg, t - min_seg
                best = 0.0
                for k in range(lo, hi + 1):
                    mu = k * (t - k) / 2.0
                    sd = np.sqrt(k * (t - k) * (t + 1) / 12.0)
                    z = abs((U[k - 1] - mu) / sd)
                    if z > best:
                        best = z
                M[s, t - 1] = best
        return M

    return kernel


def compute_max_paths(X: np.ndarray, min_seg: int) -> np.ndarray:
    kernel = _make_numba_kernel()
    if kernel is not None:
        return kernel(X, min_seg)
    print("numba unavailable; using the slower numpy path", flush=True)
    return _max_paths_numpy(X, min_seg)


def cross_check(kernel_paths: np.ndarray, X: np.ndarray, min_seg: int) -> None:
    """The recursion must reproduce the package's dense scan exactly."""
    for s in range(min(4, X.shape[0])):
        ref = _mw_scan(X[s], min_seg)[0]
        if not np.allclose(kernel_paths[s], ref, atol=1e-9):
            raise AssertionError(f"path recursion disagrees with dense scan on stream {s}")


def calibrate(M: np.ndarray, arl0: int, warmup: int) -> np.ndarray:
    """Conditional quantile calibration: at each step the surviving streams'
    (1 - 1/arl0) quantile becomes h_t and exceeders are removed."""
    n_streams, T = M.shape
    alive = np.ones(n_streams, dtype=bool)
    h = np.full(T, np.inf)
    q = 1.0 - 1.0 / arl0
    for t in range(warmup - 1, T):
        vals = M[alive, t]
        if vals.size < 50:
            # the tail is too thin to estimate; freeze the last level
            h[t] = h[t - 1]
            continue
        h[t] = float(np.quantile(vals, q))
        alive[alive] = M[alive, t] <= h[t]
    return h


def smooth_tail(h: np.ndarray, start: int, window: int) -> np.ndarray:
    """Running-mean smoothing for the deep-t part of the curve, where the
    surviving-stream count (and hence the quantile estimate) gets thin."""
    out = h.copy()
    half = window // 2
    for t in range(start, h.size):
        lo = max(start - half, t - half)
        hi = min(h.size, t + half + 1)
        out[t] = float(np.mean(h[lo:hi]))
    return out


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--streams", type=int, default=6000)
    parser.add_argument("--length", type=int, default=700)
    parser.add_argument("--seed", type=int, default=20240601)
    parser.add_argument("--outdir", default=str(REPO / "src" / "psmdid" / "thresholds"))
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    X = rng.uniform(size=(args.streams, args.length))

    t0 = time.perf_counter()
    print(f"computing max-statistic paths for {args.streams} streams of length {args.length} ...",
          flush=True)
    M = compute_max_paths(X, MIN_SEG)
    cross_check(M, X, MIN_SEG)
    print(f"paths done in {time.perf_counter() - t0:.1f}s", flush=True)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = list(range(WARMUP, args.length + 1))
    for arl0 in ARL0_TARGETS:
        h = calibrate(M, arl0, WARMUP)
        h = smooth_tail(h, SMOOTH_START, SMOOTH_WINDOW)
        payload = {
            "arl0": arl0,
            "warmup": WARMUP,
            "min_seg": MIN_SEG,
            "n_streams": args.streams,
            "max_length": args.length,
            "seed": args.seed,
            "t": grid,
            "h": [round(float(h[t - 1]), 6) for t in grid],
        }
        path = outdir / f"arl0_{arl0}.json"
        path.write_text(json.dumps(payload) + "\n")
        print(f"wrote {path} (h range {min(payload['h']):.3f}..{max(payload['h']):.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
