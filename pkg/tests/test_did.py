from datetime import date

import numpy as np
import pytest
from scipy import stats

from psmdid.did import (
    DidDesign,
    build_design,
    containment_ratio,
    design_from_groups,
    fit_ols,
    fitted_lines,
    stars_for_pvalue,
    student_t_pvalue,
)
from psmdid.panel import Window
from psmdid.psm import MatchResult

from oracles import normal_equations_ols

ANCHOR = date(2021, 10, 4)


def make_window(n_countries, beta=(50.0, 1.5, 5.0, 2.5, -2.0), noise_sd=0.0,
                seed=0, labels=None):
    rng = np.random.default_rng(seed)
    t = np.arange(1, 61, dtype=float)
    u = (t - 30.0) * (t >= 31.0)
    countries = [f"W{i:02d}" for i in range(n_countries)]
    if labels is None:
        labels = [i % 2 for i in range(n_countries)]
    b0, b1, b2, b3, b4 = beta
    series = {}
    for c, lab in zip(countries, labels):
        mean = b0 + b1 * t + b2 * lab + (b3 + b4 * lab) * u
        series[c] = mean + (rng.normal(0, noise_sd, 60) if noise_sd else 0.0)
    window = Window(anchor_date=ANCHOR, countries=countries, series=series)
    controls = [c for c, lab in zip(countries, labels) if lab == 0]
    treated = [c for c, lab in zip(countries, labels) if lab == 1]
    return window, controls, treated


def pairs_result(controls, treated):
    pairs = [(c, t, 0.1) for c, t in zip(controls, treated)]
    return MatchResult(pairs=pairs, total_distance=0.1 * len(pairs),
                       unmatched_treated=set(treated[len(controls):]))


class TestBuildDesign:
    def test_ten_pairs_gives_1200_rows(self):
        window, controls, treated = make_window(20)
        design = build_design(window, pairs_result(controls, treated))
        assert design.n == 1200
        assert design.p.sum() == 600

    def test_single_pair_split(self):
        window, controls, treated = make_window(2)
        design = build_design(window, pairs_result(controls, treated))
        assert design.n == 120
        assert (design.p == 1).sum() == 60 and (design.p == 0).sum() == 60

    def test_post_columns_zero_before_break(self):
        window, controls, treated = make_window(4)
        design = build_design(window, pairs_result(controls, treated))
        X = design.matrix()
        pre = design.t <= 30
        assert np.all(X[pre, 3] == 0) and np.all(X[pre, 4] == 0)
        post = design.t >= 31
        assert np.all(X[post, 3] == design.t[post] - 30)

    def test_missing_country_named(self):
        window, controls, treated = make_window(4)
        del window.series[treated[0]]
        with pytest.raises(ValueError, match=treated[0]):
            build_design(window, pairs_result(controls, treated))


class TestFitOls:
    def test_noiseless_recovery(self):
        beta = (40.0, 1.2, 8.0, 3.0, -2.5)
        window, controls, treated = make_window(8, beta=beta)
        fit = fit_ols(build_design(window, pairs_result(controls, treated)))
        assert np.max(np.abs(fit.beta - np.array(beta))) < 1e-8
        assert fit.diagnostics["rss"] < 1e-12

    def test_matches_normal_equations(self):
        window, controls, treated = make_window(10, noise_sd=3.0, seed=4)
        design = build_design(window, pairs_result(controls, treated))
        fit = fit_ols(design)
        beta, cov = normal_equations_ols(design.matrix(), design.y)
        assert np.max(np.abs(fit.beta - beta)) < 1e-8 * max(1.0, np.abs(beta).max())
        assert np.allclose(fit.covariance, cov, rtol=1e-6)

    def test_rank_deficiency_names_column(self):
        window, controls, treated = make_window(4, labels=[1, 1, 1, 1])
        design = design_from_groups(window, [], ["W00", "W01", "W02", "W03"])
        # every unit treated: the group column equals the intercept
        with pytest.raises(ValueError, match="group|const"):
            fit_ols(design)

    def test_shift_moves_only_intercept(self):
        window, controls, treated = make_window(8, noise_sd=2.0, seed=5)
        design = build_design(window, pairs_result(controls, treated))
        base = fit_ols(design)
        shifted = DidDesign(country=design.country, t=design.t,
                            y=design.y + 13.5, p=design.p, d=design.d)
        moved = fit_ols(shifted)
        assert moved.beta[0] == pytest.approx(base.beta[0] + 13.5, abs=1e-9)
        assert np.max(np.abs(moved.beta[1:] - base.beta[1:])) < 1e-9
        assert np.max(np.abs(moved.se - base.se)) < 1e-9
        assert np.max(np.abs(moved.p_values - base.p_values)) < 1e-9

    def test_scaling_y_scales_estimates_not_inference(self):
        window, controls, treated = make_window(8, noise_sd=2.0, seed=6)
        design = build_design(window, pairs_result(controls, treated))
        base = fit_ols(design)
        scaled = DidDesign(country=design.country, t=design.t,
                           y=design.y * 4.0, p=design.p, d=design.d)
        big = fit_ols(scaled)
        assert np.max(np.abs(big.beta - 4.0 * base.beta)) < 1e-9 * 4 * np.abs(base.beta).max()
        assert np.max(np.abs(big.se - 4.0 * base.se)) < 1e-7
        assert np.max(np.abs(big.t_stats - base.t_stats)) < 1e-9
        assert np.max(np.abs(big.p_values - base.p_values)) < 1e-9
        assert big.stars == base.stars
        assert big.cr == pytest.approx(base.cr, abs=1e-9)

    def test_label_swap_consistency(self):
        window, controls, treated = make_window(8, noise_sd=2.0, seed=7)
        design = build_design(window, pairs_result(controls, treated))
        base = fit_ols(design)
        swapped_design = DidDesign(country=design.country, t=design.t,
                                   y=design.y, p=1.0 - design.p, d=design.d)
        swapped = fit_ols(swapped_design)
        assert swapped.beta[2] == pytest.approx(-base.beta[2], abs=1e-9)
        assert swapped.beta[4] == pytest.approx(-base.beta[4], abs=1e-9)
        fitted_base = design.matrix() @ base.beta
        fitted_swap = swapped_design.matrix() @ swapped.beta
        assert np.max(np.abs(fitted_base - fitted_swap)) < 1e-9

    def test_residual_orthogonality(self):
        window, controls, treated = make_window(12, noise_sd=5.0, seed=8)
        design = build_design(window, pairs_result(controls, treated))
        fit = fit_ols(design)
        assert fit.diagnostics["residual_orthogonality"] < 1e-7 * fit.diagnostics["xty_scale"]

    def test_needs_enough_rows(self):
        design = DidDesign(country=["X"] * 3, t=np.array([1.0, 2.0, 31.0]),
                           y=np.zeros(3), p=np.zeros(3),
                           d=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError, match="observations"):
            fit_ols(design)


class TestStudentT:
    def test_matches_scipy(self):
        for df in (5, 57, 1195):
            for t in (0.0, 0.5, 1.96, 2.879, 4.5):
                expected = 2.0 * stats.t.sf(abs(t), df)
                assert student_t_pvalue(t, df) == pytest.approx(expected, rel=1e-10)

    def test_monotone_in_t(self):
        ts = np.linspace(0, 6, 40)
        ps = [student_t_pvalue(t, 100) for t in ts]
        assert all(a >= b for a, b in zip(ps, ps[1:]))

    def test_star_bands(self):
        assert stars_for_pvalue(0.04) == "*"
        assert stars_for_pvalue(0.01) == "*"
        assert stars_for_pvalue(0.009) == "**"
        assert stars_for_pvalue(0.001) == "**"
        assert stars_for_pvalue(0.0009) == "***"
        assert stars_for_pvalue(0.2) == ""


class TestContainmentRatio:
    def fake_fit(self, beta):
        window, controls, treated = make_window(4, beta=beta)
        return fit_ols(build_design(window, pairs_result(controls, treated)))

    def test_positive_effect_clamps_to_zero(self):
        fit = self.fake_fit((50.0, 2.0, 5.0, 2.0, 1.0))
        assert containment_ratio(fit) == pytest.approx(0.0)
        assert fit.cr == pytest.approx(0.0)

    def test_arithmetic(self):
        fit = self.fake_fit((50.0, 1.0, 5.0, 3.0, -2.0))
        assert containment_ratio(fit) == pytest.approx(50.0, abs=1e-8)

    def test_non_rising_baseline_flagged(self):
        fit = self.fake_fit((300.0, -1.0, 5.0, -2.0, -1.0))
        assert fit.cr is None and "non-rising" in fit.cr_note
        with pytest.raises(ValueError, match="non-rising"):
            containment_ratio(fit)


class TestFittedLines:
    def test_lines_coincide_at_break(self):
        fit = TestContainmentRatio().fake_fit((50.0, 1.5, 6.0, 2.5, -3.4422))
        lines = fitted_lines(fit)
        at30 = lines[lines["t"] == 30].iloc[0]
        assert at30["treatment"] == pytest.approx(at30["counterfactual_treatment"])

    def test_zero_effect_identical(self):
        fit = TestContainmentRatio().fake_fit((50.0, 1.5, 6.0, 2.5, 0.0))
        lines = fitted_lines(fit)
        assert np.allclose(lines["treatment"], lines["counterfactual_treatment"])

    def test_gap_at_end_is_30_beta4(self):
        fit = TestContainmentRatio().fake_fit((50.0, 1.5, 6.0, 2.5, -3.4422))
        lines = fitted_lines(fit)
        at60 = lines[lines["t"] == 60].iloc[0]
        gap = at60["counterfactual_treatment"] - at60["treatment"]
        assert gap == pytest.approx(103.266, abs=1e-6)

    def test_pre_break_offset_constant(self):
        fit = TestContainmentRatio().fake_fit((50.0, 1.5, 6.0, 2.5, -3.0))
        lines = fitted_lines(fit)
        pre = lines[lines["t"] <= 30]
        offsets = pre["treatment"] - pre["control"]
        assert np.allclose(offsets, fit.beta[2])
