from datetime import date, timedelta

import numpy as np
import pytest

from psmdid.changepoint import (
    ChangePoint,
    DetectorConfig,
    detect,
    filter_rising,
    load_threshold_table,
    mann_whitney_split,
    promote_outbreaks,
)

from oracles import brute_force_mw, brute_force_u


class TestMannWhitneySplit:
    def test_ascending_spec_example(self):
        # all four cross pairs ascend: U = 4, positive statistic
        assert brute_force_u([1, 2, 3, 4], 2) == 4
        stat = mann_whitney_split([1, 2, 3, 4], 2)
        assert stat > 0
        assert stat == pytest.approx(brute_force_mw([1, 2, 3, 4], 2))

    def test_descending_antisymmetric(self):
        up = mann_whitney_split([1, 2, 3, 4], 2)
        down = mann_whitney_split([4, 3, 2, 1], 2)
        assert brute_force_u([4, 3, 2, 1], 2) == 0
        assert down == pytest.approx(-up)

    def test_all_tied_is_zero(self):
        assert mann_whitney_split([7, 7, 7, 7, 7], 2) == 0.0

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(21)
        for _ in range(60):
            n = int(rng.integers(4, 50))
            x = rng.integers(0, 5, n).astype(float).tolist()
            k = int(rng.integers(1, n))
            assert mann_whitney_split(x, k) == pytest.approx(
                brute_force_mw(x, k), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=30)
        for k in (1, 7, 15, 29):
            base = mann_whitney_split(x, k)
            assert mann_whitney_split(np.exp(x), k) == pytest.approx(base, abs=1e-12)
            assert mann_whitney_split(3.0 * x + 11.0, k) == pytest.approx(base, abs=1e-12)

    def test_reversal_antisymmetry_no_ties(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=20)
        for k in range(1, 20):
            assert mann_whitney_split(x[::-1], 20 - k) == pytest.approx(
                -mann_whitney_split(x, k), abs=1e-10)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="length"):
            mann_whitney_split([1, 2, 3], 1)
        with pytest.raises(ValueError, match="split index"):
            mann_whitney_split([1, 2, 3, 4], 4)
        with pytest.raises(ValueError, match="split index"):
            mann_whitney_split([1, 2, 3, 4], 0)

    def test_scan_agrees_with_split_on_every_prefix(self):
        # the detector's vectorized scan is the optimized route; it must
        # reproduce the direct statistic for every (prefix, split)
        from psmdid.changepoint import _mw_scan
        rng = np.random.default_rng(24)
        for trial in range(10):
            n = int(rng.integers(8, 50))
            x = rng.integers(0, 4, n).astype(float) if trial % 2 else rng.normal(size=n)
            max_stat, best_k, signed, zmat = _mw_scan(x, 1)
            for t in range(2, n + 1):
                direct = max(abs(mann_whitney_split(x[:t], k)) for k in range(1, t))
                assert max_stat[t - 1] == pytest.approx(direct, abs=1e-10)


class TestDetectorConfig:
    def test_unsupported_arl0(self):
        with pytest.raises(ValueError, match="arl0"):
            DetectorConfig(arl0=200)

    def test_warmup_floor(self):
        with pytest.raises(ValueError, match="warmup"):
            DetectorConfig(warmup=10)

    def test_tables_load_for_all_supported(self):
        for arl0 in (370, 500, 1000):
            table = load_threshold_table(arl0)
            assert table.arl0 == arl0
            assert np.all(np.isfinite(table.h))
        # larger arl0 -> higher thresholds at matched t
        t = np.arange(30.0, 600.0)
        assert np.all(load_threshold_table(1000).at(t) > load_threshold_table(370).at(t))


class TestDetect:
    def two_level(self, seed, lo=1.0, hi=2.0, sd=0.1, n=100):
        rng = np.random.default_rng(seed)
        return np.concatenate([rng.normal(lo, sd, n), rng.normal(hi, sd, n)])

    def test_two_level_stream(self):
        cfg = DetectorConfig(arl0=500)
        hits = 0
        for seed in range(100):
            x = self.two_level(seed)
            points = detect(x, cfg)
            near = [p for p in points
                    if p.direction == "rising" and abs(p.index - 100) <= 10]
            hits += (len(near) == 1)
        assert hits >= 95

    def test_constant_series_empty(self):
        cfg = DetectorConfig(arl0=500)
        assert detect(np.full(200, 3.21), cfg) == []

    def test_statistic_exceeds_threshold(self):
        cfg = DetectorConfig(arl0=500)
        table = load_threshold_table(500)
        points = detect(self.two_level(5), cfg)
        assert points and all(abs(p.statistic) > table.h.min() for p in points)

    def test_dates_attached(self):
        cfg = DetectorConfig(arl0=500)
        x = self.two_level(3)
        start = date(2021, 1, 1)
        dates = [start + timedelta(days=i) for i in range(len(x))]
        points = detect(x, cfg, dates=dates)
        assert all(p.date == dates[p.index] for p in points)

    def test_restart_false_stops_after_first(self):
        cfg = DetectorConfig(arl0=500, restart=False)
        rng = np.random.default_rng(8)
        x = np.concatenate([rng.normal(0, 0.1, 80), rng.normal(2, 0.1, 80),
                            rng.normal(4, 0.1, 80)])
        points = detect(x, cfg)
        assert len(points) == 1

    def test_short_series_rejected(self):
        with pytest.raises(ValueError, match="warmup"):
            detect(np.zeros(10), DetectorConfig(arl0=500))

    def test_nan_rejected(self):
        x = np.ones(50)
        x[10] = np.nan
        with pytest.raises(ValueError, match="missing"):
            detect(x, DetectorConfig(arl0=500))

    def test_false_alarm_rate_within_arl_bound(self):
        # loose one-sided check: estimated in-control ARL at the arl0=500
        # table must clear 250 (exposure / alarms over censored streams)
        cfg = DetectorConfig(arl0=500, restart=False)
        alarms = 0
        exposure = 0
        for seed in range(1000):
            rng = np.random.default_rng(50_000 + seed)
            points = detect(rng.normal(size=500), cfg)
            if points:
                alarms += 1
                exposure += points[0].index
            else:
                exposure += 500
        assert alarms > 0
        assert exposure / alarms >= 250


class TestFilterRising:
    def test_step_up_retained_step_down_removed(self):
        rng = np.random.default_rng(31)
        x = np.concatenate([rng.normal(1, 0.05, 100), rng.normal(2, 0.05, 100)])
        up = ChangePoint(index=100, date=None, direction="rising", statistic=4.0)
        down = ChangePoint(index=100, date=None, direction="falling", statistic=-4.0)
        assert filter_rising([up], x) == [up]
        assert filter_rising([down], x[::-1]) == []

    def test_idempotent(self):
        rng = np.random.default_rng(32)
        x = np.concatenate([rng.normal(1, 0.05, 50), rng.normal(2, 0.05, 50)])
        pts = [ChangePoint(index=50, date=None, direction="rising", statistic=4.0),
               ChangePoint(index=20, date=None, direction="falling", statistic=-4.0)]
        once = filter_rising(pts, x)
        assert filter_rising(once, x) == once

    def test_boundary_uses_truncated_side(self):
        x = np.concatenate([np.zeros(5), np.ones(40)])
        pt = ChangePoint(index=5, date=None, direction="rising", statistic=4.0)
        assert filter_rising([pt], x) == [pt]


class TestPromoteOutbreaks:
    def mk(self, index, day):
        return ChangePoint(index=index, date=day, direction="rising", statistic=4.0)

    def test_single_point_promoted(self):
        ncsm = np.concatenate([np.full(50, 10.0), 10 + 3 * np.arange(50.0)])
        pt = self.mk(50, date(2021, 3, 1))
        out = promote_outbreaks([pt], ncsm, max_anchors=1)
        assert len(out) == 1
        assert out[0].anchor_date == date(2021, 3, 1)
        assert out[0].source == "detected"

    def test_merge_keeps_higher_slope(self):
        # two candidates 10 apart; the later one sits on the steeper ramp
        ncsm = np.concatenate([np.full(60, 10.0), 10 + 5 * np.arange(60.0)])
        weak = self.mk(50, date(2021, 3, 1))
        strong = self.mk(60, date(2021, 3, 11))
        with pytest.warns(UserWarning, match="candidates"):
            out = promote_outbreaks([weak, strong], ncsm, max_anchors=2)
        assert len(out) == 1 and out[0].anchor_date == date(2021, 3, 11)

    def test_warns_when_fewer_than_requested(self):
        ncsm = np.arange(100.0)
        with pytest.warns(UserWarning, match="candidates"):
            out = promote_outbreaks([self.mk(40, date(2021, 3, 1))], ncsm, max_anchors=3)
        assert len(out) == 1

    def test_empty_points_error(self):
        with pytest.raises(ValueError, match="no change points"):
            promote_outbreaks([], np.arange(10.0), 3)

    def test_far_points_all_survive(self):
        ncsm = np.concatenate([np.full(100, 5.0), 5 + 2 * np.arange(100.0),
                               np.full(100, 205.0)])
        a = self.mk(100, date(2021, 1, 1))
        b = self.mk(200, date(2021, 4, 11))
        out = promote_outbreaks([a, b], ncsm, max_anchors=2)
        assert [o.anchor_date for o in out] == [date(2021, 1, 1), date(2021, 4, 11)]
